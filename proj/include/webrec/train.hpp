#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "webrec/autodiff.hpp"
#include "webrec/model.hpp"

namespace webrec {

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  /// Stops after this many optimizer steps; 0 means epochs decide.
  std::size_t max_steps = 0;
  /// Keeps every MP-Head gate at its current value.
  bool freeze_gate = false;
  /// Refuse to train unless a sampled finite-difference check on the
  /// MP-Head parameters passes.
  bool require_grad_check = true;
  double grad_check_tolerance = 1e-4;
  /// Called after every optimizer step with the step count and batch loss.
  std::function<void(std::size_t, double)> on_step;

  void validate() const;
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<ad::Variable> params, const TrainConfig& cfg);

  /// Applies one update from the gradients currently stored on the params.
  void step();
  void zero_grad();
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<ad::Variable> params_;
  std::vector<Matrix> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

/// One supervised sequence. `rows[i]` indexes the token whose logits must
/// predict `labels[i]`. When `hidden` is set it is the frozen hidden state
/// entering `first_layer`, which lets the trainer skip the frozen prefix.
/// A non-empty `columns` restricts the prediction to those vocabulary
/// entries, and labels then index into `columns`.
struct TrainExample {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> rows;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> columns;
  std::optional<Matrix> hidden;
  std::size_t first_layer = 0;
};

struct NllLoss {
  ad::Variable value;  // 1x1 mean over label tokens
  std::size_t label_count = 0;
  std::size_t clamped = 0;
};

/// Mean of -log p(label) over the rows of `logits`, probabilities floored at
/// 1e-12 (floored rows are counted and contribute no gradient).
NllLoss nll_loss(const ad::Variable& logits, std::span<const std::size_t> labels);

struct TrainResult {
  std::vector<double> loss_curve;  // one entry per optimizer step
  std::size_t steps = 0;
  std::size_t clamped = 0;
  std::uint64_t backbone_checksum = 0;
};

/// Logits for an example's label rows under the given trainable pieces.
ad::Variable example_logits(const Transformer& model, const TrainExample& ex,
                            const MPHeadParams* mp, const TaskAdapter* adapter);

/// Trains the MP-Head and/or adapter against the frozen backbone. Throws
/// InvariantError if the backbone changes or the loss becomes non-finite.
TrainResult train(const Transformer& model, MPHeadParams* mp, TaskAdapter* adapter,
                  std::span<const TrainExample> data, const TrainConfig& cfg);

struct GradCheckResult {
  double worst_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Central-difference check of every MP-Head member on one example.
/// `max_coords_per_member` = 0 checks every coordinate.
GradCheckResult check_mp_gradients(const Transformer& model, MPHeadParams& mp,
                                   const TrainExample& ex, double eps, double tolerance,
                                   std::size_t max_coords_per_member = 0, std::uint64_t seed = 0);

}  // namespace webrec
