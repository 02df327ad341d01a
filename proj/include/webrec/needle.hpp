#pragma once

// Synthetic long-distance benchmark. Each sequence is filler tokens with one
// evidence token E_e planted far before a final query token; the correct
// answer at the query position is the label token L_e, one of n_labels.
//
// The backbone is first trained on a purely local task (at every position,
// predict a fixed successor of the previous token, where the successor of E_e
// is L_e) and then frozen. It can therefore answer when the evidence sits
// right before the query but has no reason to look 200 positions back.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "webrec/model.hpp"
#include "webrec/train.hpp"

namespace webrec {

enum class NeedleMode {
  kDistant,   // evidence at distance >= min_distance
  kAdjacent,  // evidence immediately before the query
  kNoise,     // label drawn independently of the evidence
};

struct NeedleConfig {
  std::size_t seq_len = 256;
  std::size_t min_distance = 200;
  std::size_t n_labels = 20;
  std::size_t n_fillers = 19;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t n_layers = 2;
  std::size_t mp_hops = 1;
  std::size_t relation_top_k = 0;
  NeedleMode mode = NeedleMode::kDistant;

  std::uint64_t backbone_seed = 1234;
  std::size_t pretrain_steps = 600;
  std::size_t pretrain_batch = 4;
  double pretrain_lr = 3e-3;

  std::size_t train_samples = 1024;
  std::size_t eval_samples = 256;
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double learning_rate = 1.5e-3;
  double weight_decay = 0.0;
  bool freeze_gate = false;
  /// Initialize the MP-Head's output side from the backbone's source head.
  bool warm_start = true;
  /// Multiplies the MP-Head query map after init; 0 starts from uniform attention.
  double query_init_scale = 0.0;

  /// Token layout: specials, evidence, labels, query, fillers.
  std::size_t vocab_size() const { return 4 + 2 * n_labels + 1 + n_fillers; }
  TokenId evidence_token(std::size_t e) const { return static_cast<TokenId>(4 + e); }
  TokenId label_token(std::size_t e) const { return static_cast<TokenId>(4 + n_labels + e); }
  TokenId query_token() const { return static_cast<TokenId>(4 + 2 * n_labels); }
  TokenId filler_token(std::size_t j) const { return static_cast<TokenId>(5 + 2 * n_labels + j); }
  ModelConfig model_config() const;
};

struct NeedleSample {
  std::vector<TokenId> tokens;
  std::size_t evidence_position = 0;
  std::size_t label = 0;  // index in [0, n_labels)
};

NeedleSample make_needle_sample(const NeedleConfig& cfg, Rng& rng);

/// Successor used by the local pretraining task.
TokenId local_successor(const NeedleConfig& cfg, TokenId t);

struct PretrainReport {
  std::vector<double> loss_curve;
  double final_accuracy = 0.0;  // next-token accuracy on fresh sequences
};

/// Trains a fresh backbone on the local task, then freezes it.
Transformer pretrain_needle_backbone(const NeedleConfig& cfg, PretrainReport* report = nullptr);

struct NeedleArm {
  double accuracy = 0.0;
  double gate = 0.0;  // largest |g| over MP-Head layers, 0 for the baseline
  std::vector<double> loss_curve;
  std::size_t steps = 0;
};

struct NeedleRun {
  std::uint64_t seed = 0;
  NeedleArm baseline;
  NeedleArm mp_head;
};

/// Trains the frozen-backbone baseline (logit-bias adapter only) and the
/// MP-Head model (adapter + MP-Head) on identical data and step budgets.
NeedleRun run_needle_seed(const Transformer& backbone, const NeedleConfig& cfg, std::uint64_t seed);

struct NeedleReport {
  NeedleConfig config;
  std::vector<NeedleRun> runs;
  PretrainReport pretrain;
};

NeedleReport needle_benchmark(const NeedleConfig& cfg, std::span<const std::uint64_t> seeds);

}  // namespace webrec
