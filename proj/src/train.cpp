#include "webrec/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "webrec/error.hpp"

namespace webrec {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("train: learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
}

AdamW::AdamW(std::vector<ad::Variable> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      lr_(cfg.learning_rate),
      wd_(cfg.weight_decay),
      b1_(cfg.beta1),
      b2_(cfg.beta2),
      eps_(cfg.adam_eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.rows(), p.cols());
    v_.emplace_back(p.rows(), p.cols());
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& w = params_[i].mutable_value().data();
    const auto& g = params_[i].grad().data();
    auto& m = m_[i].data();
    auto& v = v_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
      v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

NllLoss nll_loss(const ad::Variable& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows()) {
    throw ShapeError("nll_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(logits.rows()) + " rows");
  }
  if (labels.empty()) throw ShapeError("nll_loss: no labels");
  NllLoss out;
  out.label_count = labels.size();
  const auto total = ad::cross_entropy_sum(logits, labels, 1e-12, &out.clamped);
  out.value = ad::scale(total, 1.0 / static_cast<double>(labels.size()));
  return out;
}

ad::Variable example_logits(const Transformer& model, const TrainExample& ex,
                            const MPHeadParams* mp, const TaskAdapter* adapter) {
  KVCache cache;
  ForwardOptions opts;
  opts.mp = mp;
  opts.adapter = adapter;
  opts.output_rows = ex.rows;
  // A restricted final layer returns rows in request order, so the labels
  // line up without further gathering.
  auto logits = ex.hidden ? model.forward_from(ex.first_layer, ad::Variable::constant(*ex.hidden), 0,
                                               cache, opts)
                                .logits
                          : model.forward(ex.tokens, cache, opts).logits;
  if (!ex.columns.empty()) logits = ad::gather_cols(logits, ex.columns);
  return logits;
}

namespace {

std::vector<std::pair<std::string, ad::Variable>> trainable_set(MPHeadParams* mp,
                                                                TaskAdapter* adapter,
                                                                bool freeze_gate) {
  std::vector<std::pair<std::string, ad::Variable>> out;
  if (mp) {
    for (auto& [name, v] : mp->named()) {
      if (freeze_gate && name.ends_with(".gate")) continue;
      out.emplace_back(name, v);
    }
  }
  if (adapter) out.emplace_back("adapter.logit_bias", adapter->logit_bias);
  return out;
}

std::string norm_dump(const std::vector<std::pair<std::string, ad::Variable>>& params) {
  std::ostringstream os;
  for (const auto& [name, v] : params) {
    double sq = 0.0;
    for (double x : v.value().data()) sq += x * x;
    os << " " << name << "=" << std::sqrt(sq);
  }
  return os.str();
}

}  // namespace

TrainResult train(const Transformer& model, MPHeadParams* mp, TaskAdapter* adapter,
                  std::span<const TrainExample> data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw DataError("train: no training examples");
  for (const auto& v : model.params().all()) {
    if (v.requires_grad()) throw InvariantError("train: backbone parameter is trainable");
  }
  const auto named = trainable_set(mp, adapter, cfg.freeze_gate);
  if (named.empty()) throw ConfigError("train: nothing to train");

  if (mp && cfg.require_grad_check && !mp->per_layer.empty()) {
    auto probe = mp->clone();
    // With a zero gate every branch gradient vanishes and the check would be
    // vacuous, so it runs on a copy with the gate opened.
    for (auto& l : probe.per_layer)
      if (l.gate.value()(0, 0) == 0.0) l.gate.mutable_value()(0, 0) = 0.5;
    const auto check = check_mp_gradients(model, probe, data.front(), 1e-4,
                                          cfg.grad_check_tolerance, 4, cfg.seed);
    if (!check.passed) {
      throw InvariantError("train: gradient check failed, relative error " +
                           std::to_string(check.worst_relative_error) + " at " +
                           check.worst_parameter);
    }
  }

  TrainResult result;
  result.backbone_checksum = model.params().checksum();
  std::vector<ad::Variable> params;
  for (const auto& [name, v] : named) params.push_back(v);
  AdamW opt(params, cfg);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(cfg.seed);
  bool done = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t b = 0; b < order.size() && !done; b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      std::size_t labels = 0;
      for (std::size_t i = b; i < end; ++i) labels += data[order[i]].labels.size();
      opt.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = b; i < end; ++i) {
        const auto& ex = data[order[i]];
        const auto logits = example_logits(model, ex, mp, adapter);
        std::size_t clamped = 0;
        const auto sum = ad::cross_entropy_sum(logits, ex.labels, 1e-12, &clamped);
        result.clamped += clamped;
        const auto scaled = ad::scale(sum, 1.0 / static_cast<double>(labels));
        batch_loss += scaled.value()(0, 0);
        scaled.backward();
      }
      if (!std::isfinite(batch_loss)) {
        throw InvariantError("train: non-finite loss at step " + std::to_string(result.steps) +
                             "; parameter norms:" + norm_dump(named));
      }
      opt.step();
      result.loss_curve.push_back(batch_loss);
      ++result.steps;
      if (cfg.on_step) cfg.on_step(result.steps, batch_loss);
      if (cfg.max_steps != 0 && result.steps >= cfg.max_steps) done = true;
    }
  }
  if (result.clamped > 0) {
    spdlog::warn("train: {} label probabilities clamped at 1e-12", result.clamped);
  }
  if (model.params().checksum() != result.backbone_checksum) {
    throw InvariantError("train: backbone parameters changed during training");
  }
  return result;
}

GradCheckResult check_mp_gradients(const Transformer& model, MPHeadParams& mp,
                                   const TrainExample& ex, double eps, double tolerance,
                                   std::size_t max_coords_per_member, std::uint64_t seed) {
  auto loss = [&] { return nll_loss(example_logits(model, ex, &mp, nullptr), ex.labels).value; };
  auto named = mp.named();
  for (auto& [name, v] : named) v.zero_grad();
  loss().backward();

  GradCheckResult res;
  Rng rng(seed);
  for (auto& [name, v] : named) {
    const Matrix analytic = v.grad();
    auto& w = v.mutable_value().data();
    std::vector<std::size_t> coords(w.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords_per_member != 0 && coords.size() > max_coords_per_member) {
      for (std::size_t i = 0; i < max_coords_per_member; ++i) {
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      }
      coords.resize(max_coords_per_member);
    }
    for (std::size_t c : coords) {
      const double orig = w[c];
      w[c] = orig + eps;
      const double fp = loss().value()(0, 0);
      w[c] = orig - eps;
      const double fm = loss().value()(0, 0);
      w[c] = orig;
      const double num = (fp - fm) / (2.0 * eps);
      const double a = analytic.data()[c];
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6});
      ++res.coordinates;
      if (err > res.worst_relative_error) {
        res.worst_relative_error = err;
        res.worst_parameter = name + "[" + std::to_string(c) + "]";
      }
    }
  }
  for (auto& [name, v] : named) v.zero_grad();
  res.passed = res.worst_relative_error < tolerance;
  return res;
}

}  // namespace webrec
