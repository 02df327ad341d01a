#pragma once

// Binary model checkpoint.
//
// Layout (all integers little-endian):
//   8 bytes   magic "WRCKPT01"
//   u64       length of the config JSON, then that many bytes (ModelConfig)
//   u32       section count
//   per section:
//     u32     tag length, then the tag ("backbone", "mp_head" or "adapter")
//     u64     matrix count
//     per matrix: u64 rows, u64 cols, rows*cols IEEE-754 doubles, row-major
//
// Matrices appear in BackboneParams::all() / MPHeadParams::all() order. The
// backbone section is required; the other two are optional, so a baseline
// checkpoint loads with or without an MP-Head. Doubles are stored as raw
// bits, so save followed by load reproduces every value exactly.

#include <optional>
#include <string>

#include "webrec/model.hpp"

namespace webrec {

struct Checkpoint {
  ModelConfig config;
  BackboneParams backbone;
  std::optional<MPHeadParams> mp;
  std::optional<TaskAdapter> adapter;

  Transformer transformer() const;
};

void save_checkpoint(const std::string& path, const Transformer& model,
                     const MPHeadParams* mp = nullptr, const TaskAdapter* adapter = nullptr);

/// Throws DataError on a bad magic, truncated file or shape mismatch.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace webrec
