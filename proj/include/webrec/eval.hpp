#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "webrec/model.hpp"

namespace webrec {

struct EvalReport {
  std::map<std::size_t, double> hr_at;
  std::map<std::size_t, double> ndcg_at;
  std::size_t n_instances = 0;
  std::uint64_t config_hash = 0;
};

/// `target_ranks` are 1-based positions of the single relevant item.
EvalReport hr_ndcg(std::span<const std::size_t> target_ranks, std::span<const std::size_t> ks,
                   std::uint64_t config_hash = 0);

struct RankedCandidate {
  std::size_t index = 0;  // position in the input candidate list
  double score = 0.0;     // mean log-probability of the candidate's tokens
};

/// Scores every candidate by the length-normalized log-likelihood of its
/// tokens appended after the prompt and sorts descending, ties by index.
/// The prompt is left-truncated when prompt + candidate exceeds max_seq_len.
std::vector<RankedCandidate> rank_candidates(const Transformer& model,
                                             std::span<const TokenId> prompt,
                                             const std::vector<std::vector<TokenId>>& candidates,
                                             const MPHeadParams* mp = nullptr,
                                             const TaskAdapter* adapter = nullptr);

/// 1-based rank of candidate `target` in a ranked list.
std::size_t rank_of(std::span<const RankedCandidate> ranked, std::size_t target);

}  // namespace webrec
