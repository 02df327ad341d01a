#include "webrec/needle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "webrec/error.hpp"

namespace webrec {

ModelConfig NeedleConfig::model_config() const {
  ModelConfig m;
  m.vocab_size = vocab_size();
  m.d_model = d_model;
  m.n_heads = n_heads;
  m.n_layers = n_layers;
  m.max_seq_len = seq_len;
  m.eos_token = -1;
  m.mp_head_layers = {n_layers - 1};
  m.mp_hops = mp_hops;
  m.relation_top_k = relation_top_k;
  return m;
}

TokenId local_successor(const NeedleConfig& cfg, TokenId t) {
  const auto ev0 = cfg.evidence_token(0);
  const auto f0 = cfg.filler_token(0);
  if (t >= ev0 && t < ev0 + cfg.n_labels) return cfg.label_token(t - ev0);
  if (t >= f0 && t < f0 + cfg.n_fillers) return cfg.filler_token((t - f0 + 1) % cfg.n_fillers);
  return cfg.filler_token(0);
}

NeedleSample make_needle_sample(const NeedleConfig& cfg, Rng& rng) {
  if (cfg.seq_len < 2) throw ConfigError("needle: seq_len must be >= 2");
  if (cfg.mode == NeedleMode::kDistant && cfg.min_distance + 1 > cfg.seq_len) {
    throw ConfigError("needle: min_distance does not fit in seq_len");
  }
  NeedleSample s;
  s.tokens.resize(cfg.seq_len);
  for (std::size_t i = 0; i + 1 < cfg.seq_len; ++i) {
    s.tokens[i] = cfg.filler_token(rng.below(cfg.n_fillers));
  }
  const std::size_t query = cfg.seq_len - 1;
  s.tokens[query] = cfg.query_token();
  s.evidence_position =
      cfg.mode == NeedleMode::kAdjacent ? query - 1 : rng.below(query - cfg.min_distance + 1);
  const std::size_t e = rng.below(cfg.n_labels);
  s.tokens[s.evidence_position] = cfg.evidence_token(e);
  s.label = cfg.mode == NeedleMode::kNoise ? rng.below(cfg.n_labels) : e;
  return s;
}

namespace {

// Random mixture of every non-special token; targets are the successor of
// the previous token at every position after the first.
TrainExample pretrain_example(const NeedleConfig& cfg, Rng& rng) {
  const std::size_t first = cfg.evidence_token(0);
  const std::size_t span = cfg.vocab_size() - first;
  TrainExample ex;
  ex.tokens.resize(cfg.seq_len);
  for (auto& t : ex.tokens) {
    const auto pick = rng.below(span);
    t = static_cast<TokenId>(first + pick);
    // Label tokens never appear as inputs in the benchmark.
    if (t >= cfg.label_token(0) && t < cfg.query_token()) t = cfg.filler_token(rng.below(cfg.n_fillers));
    // Extra query tokens so the flat label prior after a non-evidence token
    // is learned well.
    if (rng.uniform() < 0.1) t = cfg.query_token();
  }
  const auto ev0 = cfg.evidence_token(0);
  for (std::size_t i = 1; i < cfg.seq_len; ++i) {
    const auto prev = ex.tokens[i - 1];
    const bool evidence_before = prev >= ev0 && prev < ev0 + static_cast<TokenId>(cfg.n_labels);
    ex.rows.push_back(i);
    // A query with no evidence right before it has no locally knowable
    // label, so the target is drawn at random and the backbone learns a flat
    // prior over labels there.
    if (ex.tokens[i] == cfg.query_token() && !evidence_before) {
      ex.labels.push_back(cfg.label_token(rng.below(cfg.n_labels)));
    } else {
      ex.labels.push_back(local_successor(cfg, prev));
    }
  }
  return ex;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct NeedleData {
  std::vector<TrainExample> train;
  std::vector<TrainExample> eval;
  std::vector<std::size_t> eval_labels;
};

NeedleData make_data(const Transformer& backbone, const NeedleConfig& cfg, std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0x6e6565646c65ULL));
  const std::size_t last = cfg.n_layers - 1;
  auto make = [&](std::vector<TrainExample>& into, std::vector<std::size_t>* labels, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      auto s = make_needle_sample(cfg, rng);
      TrainExample ex;
      ex.rows = {cfg.seq_len - 1};
      for (std::size_t e = 0; e < cfg.n_labels; ++e) ex.columns.push_back(cfg.label_token(e));
      ex.labels = {s.label};
      ex.hidden = backbone.hidden_before(s.tokens, last);
      ex.first_layer = last;
      ex.tokens = std::move(s.tokens);
      if (labels) labels->push_back(s.label);
      into.push_back(std::move(ex));
    }
  };
  NeedleData d;
  make(d.train, nullptr, cfg.train_samples);
  make(d.eval, &d.eval_labels, cfg.eval_samples);
  return d;
}

double accuracy(const Transformer& model, const NeedleData& d,
                const MPHeadParams* mp, const TaskAdapter* adapter) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.eval.size(); ++i) {
    const auto logits = example_logits(model, d.eval[i], mp, adapter).value();
    if (argmax(logits.row(0)) == d.eval_labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(d.eval.size());
}

}  // namespace

Transformer pretrain_needle_backbone(const NeedleConfig& cfg, PretrainReport* report) {
  const auto mcfg = cfg.model_config();
  auto model = Transformer::init(mcfg, cfg.backbone_seed);
  auto& params = model.mutable_params();
  params.set_trainable(true);
  TrainConfig tc;
  tc.learning_rate = cfg.pretrain_lr;
  tc.weight_decay = 0.0;
  AdamW opt(params.all(), tc);
  Rng rng(mix64(cfg.backbone_seed));
  PretrainReport rep;
  for (std::size_t step = 0; step < cfg.pretrain_steps; ++step) {
    opt.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < cfg.pretrain_batch; ++b) {
      const auto ex = pretrain_example(cfg, rng);
      const auto loss = ad::scale(nll_loss(example_logits(model, ex, nullptr, nullptr), ex.labels).value,
                                  1.0 / static_cast<double>(cfg.pretrain_batch));
      total += loss.value()(0, 0);
      loss.backward();
    }
    opt.step();
    rep.loss_curve.push_back(total);
  }
  params.set_trainable(false);

  std::size_t hits = 0;
  std::size_t count = 0;
  for (int i = 0; i < 4; ++i) {
    const auto ex = pretrain_example(cfg, rng);
    const auto logits = model.logits(ex.tokens);
    for (std::size_t r = 0; r < ex.rows.size(); ++r) {
      hits += argmax(logits.row(ex.rows[r])) == ex.labels[r];
      ++count;
    }
  }
  rep.final_accuracy = static_cast<double>(hits) / static_cast<double>(count);
  spdlog::info("needle: backbone local-task accuracy {:.4f} after {} steps", rep.final_accuracy,
               cfg.pretrain_steps);
  if (report) *report = std::move(rep);
  return model;
}

NeedleRun run_needle_seed(const Transformer& backbone, const NeedleConfig& cfg, std::uint64_t seed) {
  const auto data = make_data(backbone, cfg, seed);
  TrainConfig tc;
  tc.epochs = cfg.steps * cfg.batch_size / std::max<std::size_t>(1, cfg.train_samples) + 1;
  tc.max_steps = cfg.steps;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.weight_decay = cfg.weight_decay;
  tc.seed = seed;
  tc.freeze_gate = cfg.freeze_gate;
  tc.require_grad_check = false;

  NeedleRun run;
  run.seed = seed;
  const auto mcfg = cfg.model_config();
  {
    auto adapter = TaskAdapter::init(mcfg);
    const auto res = train(backbone, nullptr, &adapter, data.train, tc);
    run.baseline.accuracy = accuracy(backbone, data, nullptr, &adapter);
    run.baseline.loss_curve = res.loss_curve;
    run.baseline.steps = res.steps;
  }
  {
    auto adapter = TaskAdapter::init(mcfg);
    Rng rng(mix64(seed));
    auto mp = MPHeadParams::init(mcfg, rng);
    if (cfg.warm_start) mp.warm_start_from(backbone);
    for (auto& l : mp.per_layer)
      for (double& v : l.query.mutable_value().data()) v *= cfg.query_init_scale;
    const auto res = train(backbone, &mp, &adapter, data.train, tc);
    run.mp_head.accuracy = accuracy(backbone, data, &mp, &adapter);
    run.mp_head.loss_curve = res.loss_curve;
    run.mp_head.steps = res.steps;
    for (const auto& l : mp.per_layer) run.mp_head.gate = std::max(run.mp_head.gate, std::abs(l.gate.value()(0, 0)));
  }
  spdlog::info("needle seed {}: baseline {:.3f}, mp-head {:.3f}, |g| {:.3f}", seed,
               run.baseline.accuracy, run.mp_head.accuracy, run.mp_head.gate);
  return run;
}

NeedleReport needle_benchmark(const NeedleConfig& cfg, std::span<const std::uint64_t> seeds) {
  NeedleReport rep;
  rep.config = cfg;
  const auto backbone = pretrain_needle_backbone(cfg, &rep.pretrain);
  for (auto s : seeds) rep.runs.push_back(run_needle_seed(backbone, cfg, s));
  return rep;
}

}  // namespace webrec
