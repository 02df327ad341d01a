#include "webrec/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "webrec/mp_head.hpp"
#include "webrec/train.hpp"

namespace webrec {

namespace {

template <class F>
CheckResult timed(std::string name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = std::move(name);
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// Straight loops over every entity in [0, pos]; no pruning, no autodiff.
std::vector<double> dense_row(const Matrix& e0, const std::vector<double>& c, const Matrix& queries,
                              std::size_t pos, const MPLayerParams& layer, std::size_t hops) {
  const std::size_t n = pos + 1;
  const std::size_t w = e0.cols();
  const std::size_t d = w / 2;
  std::vector<std::vector<double>> e(n, std::vector<double>(w));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < w; ++j) e[t][j] = e0(t, j);
  std::vector<double> deg(n, 0.0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) deg[a] += c[a] * c[b] > 0.0 ? 1.0 : 0.0;
  for (std::size_t h = 0; h < hops; ++h) {
    const auto& m = layer.proj_message[h].value();
    std::vector<std::vector<double>> proj(n, std::vector<double>(w, 0.0));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t k = 0; k < w; ++k) proj[b][j] += e[b][k] * m(k, j);
    auto next = e;
    for (std::size_t a = 0; a < n; ++a) {
      if (deg[a] == 0.0) continue;
      for (std::size_t j = 0; j < w; ++j) {
        double s = layer.bias.value()(0, j);
        for (std::size_t b = 0; b < n; ++b)
          if (deg[b] > 0.0) s += std::max(0.0, c[a] * c[b]) / std::sqrt(deg[a] * deg[b]) * proj[b][j];
        next[a][j] = s;
      }
    }
    e = std::move(next);
  }
  std::vector<double> score(n);
  for (std::size_t t = 0; t < n; ++t) {
    score[t] = 0.0;
    for (std::size_t j = 0; j < d; ++j) score[t] += queries(pos, j) * e[t][j];
  }
  const double mx = *std::max_element(score.begin(), score.end());
  double z = 0.0;
  for (double& s : score) z += (s = std::exp(s - mx));
  std::vector<double> out(d, 0.0);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j) out[j] += score[t] / z * e[t][d + j];
  return out;
}

MPLayerParams random_layer(std::size_t dh, std::size_t hops, Rng& rng) {
  MPLayerParams l;
  l.query = ad::Variable::constant(init_uniform(2 * dh, dh, 1.0, rng));
  l.proj_entity = ad::Variable::constant(init_uniform(2 * dh, 2 * dh, 0.5, rng));
  l.proj_relation = ad::Variable::constant(init_uniform(3, 2 * dh, 1.0, rng));
  for (std::size_t h = 0; h < hops; ++h)
    l.proj_message.push_back(ad::Variable::constant(init_uniform(2 * dh, 2 * dh, 0.5, rng)));
  l.bias = ad::Variable::constant(init_uniform(1, 2 * dh, 0.2, rng));
  l.gate = ad::Variable::constant(Matrix(1, 1, 1.0));
  l.out_extension = ad::Variable::constant(init_uniform(dh, 2 * dh, 1.0, rng));
  return l;
}

}  // namespace

CheckResult check_gate_zero(std::size_t seeds) {
  return timed("gate-zero equivalence", [&](CheckResult& r) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
      Rng rng(mix64(seed));
      ModelConfig cfg;
      cfg.vocab_size = 24;
      cfg.d_model = 16;
      cfg.n_heads = 2;
      cfg.n_layers = 1 + rng.below(3);
      cfg.max_seq_len = 24;
      cfg.mp_hops = 1 + rng.below(3);
      for (std::size_t l = 0; l < cfg.n_layers; ++l)
        if (rng.below(2) == 0) cfg.mp_head_layers.push_back(l);
      if (cfg.mp_head_layers.empty()) cfg.mp_head_layers.push_back(rng.below(cfg.n_layers));
      const auto model = Transformer::init(cfg, seed);
      std::vector<TokenId> tokens(4 + rng.below(16));
      for (auto& t : tokens) t = static_cast<TokenId>(rng.below(cfg.vocab_size));
      const auto base = model.logits(tokens);
      for (bool zero_extension : {true, false}) {
        auto mp = MPHeadParams::init(cfg, rng);
        if (zero_extension)
          for (auto& l : mp.per_layer) {
            auto& m = l.out_extension.mutable_value();
            m = Matrix(m.rows(), m.cols());
          }
        const auto with = model.logits(tokens, &mp);
        for (std::size_t i = 0; i < base.data().size(); ++i)
          worst = std::max(worst, std::abs(base.data()[i] - with.data()[i]));
      }
    }
    r.passed = worst <= 1e-12;
    std::ostringstream s;
    s << seeds << " seeds, max |logit difference| " << worst;
    r.detail = s.str();
  });
}

CheckResult check_gradient_fidelity() {
  return timed("gradient fidelity", [&](CheckResult& r) {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.max_seq_len = 12;
    cfg.mp_head_layers = {0, 1};
    cfg.mp_hops = 2;
    cfg.relation_top_k = 4;
    const auto model = Transformer::init(cfg, 3);
    Rng rng(3);
    auto mp = MPHeadParams::init(cfg, rng);
    mp.set_gate(0.7);
    TrainExample ex;
    ex.tokens = {1, 4, 2, 9, 0, 3, 3, 7};
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      ex.rows.push_back(i);
      ex.labels.push_back((ex.tokens[i] + 5) % cfg.vocab_size);
    }
    const auto res = check_mp_gradients(model, mp, ex, 1e-4, 1e-4, 0, 0);
    r.passed = res.passed;
    std::ostringstream s;
    s << res.coordinates << " coordinates, worst relative error " << res.worst_relative_error << " at "
      << res.worst_parameter;
    r.detail = s.str();
  });
}

CheckResult check_pruning(std::size_t seeds) {
  return timed("pruning oracle", [&](CheckResult& r) {
    double worst = 0.0;
    bool sparse_ok = true;
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
      Rng rng(mix64(seed + 1000));
      const std::size_t dh = 3;
      const std::size_t n = 2 + rng.below(9);
      const std::size_t hops = 1 + rng.below(3);
      const auto layer = random_layer(dh, hops, rng);
      const auto entities = init_uniform(n, 2 * dh, 1.0, rng);
      std::vector<double> c(n);
      for (double& v : c) v = rng.uniform(-1.0, 1.0);
      Matrix cm(n, 1);
      for (std::size_t i = 0; i < n; ++i) cm(i, 0) = c[i];
      const auto queries = init_uniform(n, dh, 1.0, rng);
      std::vector<std::size_t> pos(n);
      std::iota(pos.begin(), pos.end(), std::size_t{0});
      const auto out = mp::head_rows(ad::Variable::constant(entities), ad::Variable::constant(cm),
                                     ad::Variable::constant(queries), pos, layer, hops, n)
                           .value();
      for (std::size_t i = 0; i < n; ++i) {
        const auto expect = dense_row(entities, c, queries, i, layer, hops);
        for (std::size_t j = 0; j < dh; ++j) worst = std::max(worst, std::abs(out(i, j) - expect[j]));
      }

      const std::size_t k = 1 + rng.below(n);
      const auto rel = mp::relations_from_relevance(c, k);
      const std::set<std::size_t> keep(rel.top_k.begin(), rel.top_k.end());
      if (rel.nonzero_count() > k * k) sparse_ok = false;
      const auto dense = rel.dense();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if ((!keep.count(i) || !keep.count(j)) && dense(i, j) != 0.0) sparse_ok = false;
    }
    r.passed = worst <= 1e-10 && sparse_ok;
    std::ostringstream s;
    s << seeds << " seeds, max deviation from the dense reference " << worst
      << (sparse_ok ? ", pruned relations sparse" : ", pruned relation has entries outside the top-k");
    r.detail = s.str();
  });
}

std::vector<CheckResult> run_selfcheck() {
  return {check_gate_zero(), check_gradient_fidelity(), check_pruning()};
}

}  // namespace webrec
