#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "webrec/error.hpp"
#include "webrec/mp_head.hpp"

using namespace webrec;

namespace {

MPLayerParams random_layer(std::size_t dh, std::size_t hops, Rng& rng) {
  MPLayerParams l;
  l.query = ad::Variable::parameter(init_uniform(dh * 2, dh, 1.0, rng));
  l.proj_entity = ad::Variable::parameter(init_uniform(2 * dh, 2 * dh, 0.5, rng));
  l.proj_relation = ad::Variable::parameter(init_uniform(3, 2 * dh, 1.0, rng));
  for (std::size_t h = 0; h < hops; ++h)
    l.proj_message.push_back(ad::Variable::parameter(init_uniform(2 * dh, 2 * dh, 0.5, rng)));
  l.bias = ad::Variable::parameter(init_uniform(1, 2 * dh, 0.2, rng));
  l.gate = ad::Variable::parameter(Matrix(1, 1, 1.0));
  l.out_extension = ad::Variable::parameter(init_uniform(dh, dh * 2, 1.0, rng));
  return l;
}

}  // namespace

TEST_CASE("encode_entities examples") {
  const auto e = mp::encode_entities(Matrix::from_rows({{1, 0}}), Matrix::from_rows({{0, 2}}),
                                     Matrix::identity(4));
  CHECK(e == Matrix::from_rows({{1, 0, 0, 2}}));

  Rng rng(1);
  const auto proj = init_uniform(4, 4, 1.0, rng);
  CHECK(mp::encode_entities(Matrix(3, 2), Matrix(3, 2), proj) == Matrix(3, 4));

  const auto k = init_uniform(5, 2, 1.0, rng);
  const auto v = init_uniform(5, 2, 1.0, rng);
  const auto out = mp::encode_entities(k, v, proj);
  for (std::size_t i = 0; i < 5; ++i) {
    const std::vector<double> kv{k(i, 0), k(i, 1), v(i, 0), v(i, 1)};
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < 4; ++r) s += kv[r] * proj(r, j);
      CHECK(std::abs(out(i, j) - s) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(mp::encode_entities(Matrix(0, 2), Matrix(0, 2), proj), ShapeError);
}

TEST_CASE("relations from the worked relevance example") {
  const std::vector<double> c{0.6, -0.5, 0.7, 0.1};
  const auto rel = mp::relations_from_relevance(c, 2);
  CHECK(rel.top_k == std::vector<std::size_t>{0, 2});
  CHECK(rel.at(2, 2) == doctest::Approx(0.49));
  CHECK(rel.at(0, 2) == doctest::Approx(0.42));
  CHECK(rel.at(2, 0) == doctest::Approx(0.42));
  CHECK(rel.at(0, 0) == doctest::Approx(0.36));
  const auto dense = rel.dense();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const bool inside = (i == 0 || i == 2) && (j == 0 || j == 2);
      if (!inside) CHECK(dense(i, j) == 0.0);
      CHECK(dense(i, j) == dense(j, i));
    }
  CHECK(rel.nonzero_count() <= 4);

  const std::vector<double> opposed{0.5, -0.4};
  CHECK(mp::relations_from_relevance(opposed, 2).at(0, 1) == 0.0);
}

TEST_CASE("k = n relation equals the dense clamped outer product") {
  Rng rng(4);
  std::vector<double> c(7);
  for (double& v : c) v = rng.uniform(-1.0, 1.0);
  const auto dense = mp::relations_from_relevance(c, 7).dense();
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) CHECK(dense(i, j) == std::max(0.0, c[i] * c[j]));
}

TEST_CASE("encode_relations uses cosine relevance and zero-norm entities score zero") {
  const auto entities = Matrix::from_rows({{1, 0}, {0, 0}, {1, 1}, {-1, 0}});
  const auto rel = mp::encode_relations(entities, Matrix::from_rows({{1, 0}}), Matrix::identity(2), 2);
  CHECK(rel.relevance[0] == doctest::Approx(1.0));
  CHECK(rel.relevance[1] == 0.0);
  CHECK(rel.relevance[2] == doctest::Approx(std::sqrt(0.5)));
  CHECK(rel.relevance[3] == doctest::Approx(-1.0));
  CHECK(rel.top_k == std::vector<std::size_t>{0, 2});
  CHECK_THROWS_AS(mp::relations_from_relevance(std::vector<double>{0.1}, 0), ShapeError);
}

TEST_CASE("top-k ties go to the lower index") {
  const std::vector<double> s{0.3, 0.5, 0.5, 0.5};
  CHECK(mp::select_top_k(s, 2) == std::vector<std::size_t>{1, 2});
  CHECK(mp::top_k_for(0, 3) == 3);
  CHECK(mp::top_k_for(0, 100) == 10);
  CHECK(mp::top_k_for(0, 256) == 26);
  CHECK(mp::top_k_for(5, 3) == 3);
}

TEST_CASE("message passing worked example") {
  const std::vector<double> c{0.6, -0.5, 0.7, 0.1};
  const auto rel = mp::relations_from_relevance(c, 2);
  CHECK(rel.degree(0) == 2);
  CHECK(rel.degree(2) == 2);
  Matrix e(4, 4);
  e(0, 0) = 1.0;
  e(2, 1) = 1.0;
  e(1, 3) = 9.0;
  const std::vector<Matrix> msg{Matrix::identity(4)};
  const auto out = mp::message_pass(e, rel, msg, Matrix(1, 4), 1);
  CHECK(out(0, 0) == doctest::Approx(0.18));
  CHECK(out(0, 1) == doctest::Approx(0.21));
  CHECK(out(0, 2) == 0.0);
  CHECK(out(1, 3) == 9.0);  // outside the top-k set
}

TEST_CASE("message passing with no positive relations leaves entities unchanged") {
  const std::vector<double> c{0.0, 0.0, 0.0};
  const auto rel = mp::relations_from_relevance(c, 3);
  Rng rng(3);
  const auto e = init_uniform(3, 4, 1.0, rng);
  const std::vector<Matrix> msg{init_uniform(4, 4, 1.0, rng)};
  CHECK(mp::message_pass(e, rel, msg, init_uniform(1, 4, 1.0, rng), 1) == e);
}

TEST_CASE("two hops equal the one-hop operator applied twice") {
  Rng rng(8);
  std::vector<double> c(6);
  for (double& v : c) v = rng.uniform(-1.0, 1.0);
  const auto rel = mp::relations_from_relevance(c, 4);
  const auto e = init_uniform(6, 4, 1.0, rng);
  const auto p = init_uniform(4, 4, 1.0, rng);
  const auto b = init_uniform(1, 4, 1.0, rng);
  const std::vector<Matrix> twice{p, p};
  const std::vector<Matrix> once{p};
  const auto step = mp::message_pass(mp::message_pass(e, rel, once, b, 1), rel, once, b, 1);
  CHECK(max_abs_diff(mp::message_pass(e, rel, twice, b, 2), step) <= 1e-12);
}

TEST_CASE("normalized weights scale linearly with the relation") {
  Rng rng(12);
  std::vector<double> c(8);
  for (double& v : c) v = rng.uniform(-1.0, 1.0);
  const auto rel = mp::relations_from_relevance(c, 5);
  const double lambda = 2.5;
  auto scaled = rel;
  for (auto& [ij, v] : scaled.entries) v *= lambda;
  for (std::size_t i : rel.top_k) CHECK(scaled.degree(i) == rel.degree(i));
  const auto w = mp::normalized_weights(rel);
  const auto ws = mp::normalized_weights(scaled);
  for (std::size_t i = 0; i < w.data().size(); ++i) CHECK(ws.data()[i] == doctest::Approx(lambda * w.data()[i]));
}

TEST_CASE("mp_attention examples") {
  const auto single = mp::mp_attention(Matrix::from_rows({{0.3, 0.4}}), Matrix::from_rows({{1, 2, 3, 4}}));
  CHECK(single == Matrix::from_rows({{3, 4}}));

  const auto same = Matrix::from_rows({{1, 1, 2, 0}, {1, 1, 0, 2}, {1, 1, 4, 4}});
  const auto u = mp::mp_attention(Matrix(3, 2, 0.9), same);
  CHECK(u(1, 0) == doctest::Approx(1.0));
  CHECK(u(2, 0) == doctest::Approx(2.0));

  Rng rng(5);
  const auto q = init_uniform(5, 3, 1.0, rng);
  const auto e = init_uniform(5, 6, 1.0, rng);
  const auto out = mp::mp_attention(q, e);
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> s;
    for (std::size_t t = 0; t <= i; ++t) s.push_back(oracle::dot(oracle::row_of(q, i, 0, 3), oracle::row_of(e, t, 0, 3)));
    const auto a = oracle::softmax(s);
    CHECK(std::abs(std::accumulate(a.begin(), a.end(), 0.0) - 1.0) <= 1e-9);
    for (std::size_t j = 0; j < 3; ++j) {
      double expect = 0.0;
      for (std::size_t t = 0; t <= i; ++t) expect += a[t] * e(t, 3 + j);
      CHECK(std::abs(out(i, j) - expect) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(mp::mp_attention(q, init_uniform(5, 5, 1.0, rng)), ShapeError);
}

TEST_CASE("gated_output examples") {
  Rng rng(6);
  const auto head = init_uniform(3, 2, 1.0, rng);
  CHECK(mp::gated_output(head, 0.0) == Matrix(3, 2));
  CHECK(mp::gated_output(head, 1.0) == head);
  const auto one = mp::gated_output(head, 0.35);
  const auto two = mp::gated_output(head, 0.7);
  for (std::size_t i = 0; i < head.data().size(); ++i) CHECK(two.data()[i] == doctest::Approx(2.0 * one.data()[i]));
}

TEST_CASE("head_rows with k = n matches the dense reference on 50 seeds") {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed);
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
    std::vector<Matrix> msgs;
    for (const auto& m : layer.proj_message) msgs.push_back(m.value());
    for (std::size_t i = 0; i < n; ++i) {
      const auto expect = oracle::dense_mp_row(entities, c, oracle::row_of(queries, i, 0, dh), i, msgs,
                                               layer.bias.value(), hops);
      for (std::size_t j = 0; j < dh; ++j) CHECK(std::abs(out(i, j) - expect[j]) <= 1e-10);
    }
  }
}

TEST_CASE("MP-Head gradients match central differences") {
  ModelConfig cfg;
  cfg.vocab_size = 10;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.max_seq_len = 12;
  cfg.mp_head_layers = {1};
  cfg.mp_hops = 2;
  cfg.relation_top_k = 4;
  const auto model = Transformer::init(cfg, 3);
  Rng rng(3);
  auto mp = MPHeadParams::init(cfg, rng);
  mp.set_gate(0.7);
  const std::vector<TokenId> tokens{1, 4, 2, 9, 0, 3, 3, 7};
  const std::vector<std::size_t> labels{4, 2, 9, 0, 3, 3, 7, 5};
  auto loss = [&] {
    KVCache cache;
    ForwardOptions opts;
    opts.mp = &mp;
    return ad::cross_entropy_sum(model.forward(tokens, cache, opts).logits, labels);
  };
  const auto rep = oracle::check_gradients(mp.named(), loss, 1e-4);
  INFO("worst " << rep.worst << " at " << rep.worst_name);
  CHECK(rep.worst < 1e-4);
}
