#include "webrec/mp_head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "webrec/error.hpp"

namespace webrec::mp {

double RelationMatrix::at(std::size_t i, std::size_t j) const {
  auto it = entries.find({i, j});
  return it == entries.end() ? 0.0 : it->second;
}

std::size_t RelationMatrix::nonzero_count() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                [](const auto& e) { return e.second != 0.0; }));
}

std::size_t RelationMatrix::degree(std::size_t i) const {
  std::size_t d = 0;
  for (std::size_t j : top_k)
    if (at(i, j) > 0.0) ++d;
  return d;
}

Matrix RelationMatrix::dense() const {
  Matrix m(n, n);
  for (const auto& [ij, v] : entries) m(ij.first, ij.second) = v;
  return m;
}

std::size_t top_k_for(std::size_t configured, std::size_t n) {
  if (configured == 0) {
    const auto tenth = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(n)));
    return std::min(n, std::max<std::size_t>(4, tenth));
  }
  return std::min(configured, n);
}

std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

RelationMatrix relations_from_relevance(std::span<const double> relevance, std::size_t k) {
  std::vector<double> c(relevance.begin(), relevance.end());
  if (c.empty()) throw ShapeError("encode_relations: no entities");
  if (k == 0) throw ShapeError("encode_relations: k must be >= 1");
  RelationMatrix rel;
  rel.n = c.size();
  rel.top_k = select_top_k(c, k);
  for (std::size_t i : rel.top_k)
    for (std::size_t j : rel.top_k) rel.entries[{i, j}] = std::max(0.0, c[i] * c[j]);
  rel.relevance = std::move(c);
  return rel;
}

Matrix encode_entities(const Matrix& keys, const Matrix& values, const Matrix& proj_entity) {
  if (keys.rows() == 0) throw ShapeError("encode_entities: empty cache");
  if (keys.rows() != values.rows() || keys.cols() != values.cols()) {
    throw ShapeError("encode_entities: keys " + keys.shape_string() + " vs values " +
                     values.shape_string());
  }
  auto kv = ad::concat_cols(std::vector{ad::Variable::constant(keys), ad::Variable::constant(values)});
  return ad::matmul(kv, ad::Variable::constant(proj_entity)).value();
}

RelationMatrix encode_relations(const Matrix& entities, const Matrix& task_feature,
                                const Matrix& proj_relation, std::size_t k) {
  if (entities.rows() == 0) throw ShapeError("encode_relations: no entities");
  const auto u = webrec::matmul(task_feature, proj_relation);
  const auto c = ad::cosine_rows(ad::Variable::constant(u), ad::Variable::constant(entities)).value();
  for (std::size_t i = 0; i < entities.rows(); ++i) {
    double sq = 0.0;
    for (double v : entities.row(i)) sq += v * v;
    if (sq == 0.0) spdlog::warn("encode_relations: entity {} has zero norm, relevance set to 0", i);
  }
  return relations_from_relevance(c.data(), k);
}

PrefixGraph build_prefix_graph(std::span<const double> relevance, std::size_t k) {
  PrefixGraph g;
  g.top_k = select_top_k(relevance, k);
  const std::size_t m = g.top_k.size();
  std::vector<std::size_t> deg(m, 0);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b)
      if (relevance[g.top_k[a]] * relevance[g.top_k[b]] > 0.0) ++deg[a];
  g.norm = Matrix(m, m);
  for (std::size_t a = 0; a < m; ++a) {
    if (deg[a] == 0) {
      g.isolated.push_back(a);
      continue;
    }
    for (std::size_t b = 0; b < m; ++b) {
      if (deg[b] == 0) continue;
      g.norm(a, b) = 1.0 / (std::sqrt(static_cast<double>(deg[a])) *
                            std::sqrt(static_cast<double>(deg[b])));
    }
  }
  return g;
}

ad::Variable propagate(const ad::Variable& entities, const ad::Variable& relevance,
                       const PrefixGraph& graph, std::span<const ad::Variable> proj_message,
                       const ad::Variable& bias, std::size_t hops) {
  if (graph.top_k.empty() || hops == 0) return entities;
  if (proj_message.size() < hops) throw ShapeError("propagate: fewer message maps than hops");
  const auto ct = ad::gather_rows(relevance, graph.top_k);
  const auto weights =
      ad::hadamard(ad::relu(ad::matmul_bt(ct, ct)), ad::Variable::constant(graph.norm));
  auto selected = ad::gather_rows(entities, graph.top_k);
  for (std::size_t h = 0; h < hops; ++h) {
    auto msg = ad::add_row(ad::matmul(weights, ad::matmul(selected, proj_message[h])), bias);
    if (!graph.isolated.empty()) {
      msg = ad::scatter_rows(msg, graph.isolated, ad::gather_rows(selected, graph.isolated));
    }
    selected = msg;
  }
  return ad::scatter_rows(entities, graph.top_k, selected);
}

ad::Variable head_rows(const ad::Variable& entities, const ad::Variable& relevance,
                       const ad::Variable& queries, std::span<const std::size_t> positions,
                       const MPLayerParams& layer, std::size_t hops, std::size_t configured_k) {
  const std::size_t d = entities.cols() / 2;
  if (queries.rows() != positions.size() || queries.cols() != d) {
    throw ShapeError("head_rows: queries " + queries.value().shape_string() + " for " +
                     std::to_string(positions.size()) + " positions of width " + std::to_string(d));
  }
  ad::Variable out = ad::Variable::constant(Matrix(0, d));
  const auto& c = relevance.value().data();
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const std::size_t n = positions[r] + 1;
    if (n > entities.rows()) throw ShapeError("head_rows: position beyond entity count");
    const auto graph = build_prefix_graph(std::span(c.data(), n), top_k_for(configured_k, n));
    const auto updated = propagate(ad::slice_rows(entities, 0, n), ad::slice_rows(relevance, 0, n),
                                   graph, layer.proj_message, layer.bias, hops);
    const auto scores =
        ad::matmul_bt(ad::slice_rows(queries, r, r + 1), ad::slice_cols(updated, 0, d));
    const std::size_t valid[] = {n};
    const auto weights = ad::masked_softmax(scores, valid);
    out = ad::concat_rows(out, ad::matmul(weights, ad::slice_cols(updated, d, 2 * d)));
  }
  return out;
}

Matrix normalized_weights(const RelationMatrix& rel) {
  const std::size_t m = rel.top_k.size();
  Matrix w(m, m);
  for (std::size_t a = 0; a < m; ++a) {
    const auto da = rel.degree(rel.top_k[a]);
    for (std::size_t b = 0; b < m; ++b) {
      const auto db = rel.degree(rel.top_k[b]);
      if (da == 0 || db == 0) continue;
      w(a, b) = rel.at(rel.top_k[a], rel.top_k[b]) /
                (std::sqrt(static_cast<double>(da)) * std::sqrt(static_cast<double>(db)));
    }
  }
  return w;
}

Matrix message_pass(const Matrix& entities, const RelationMatrix& rel,
                    std::span<const Matrix> proj_message, const Matrix& bias, std::size_t hops) {
  if (rel.n != entities.rows()) throw ShapeError("message_pass: relation built for other entities");
  if (proj_message.size() < hops) throw ShapeError("message_pass: fewer message maps than hops");
  const auto weights = ad::Variable::constant(normalized_weights(rel));
  std::vector<std::size_t> isolated;
  for (std::size_t a = 0; a < rel.top_k.size(); ++a)
    if (rel.degree(rel.top_k[a]) == 0) isolated.push_back(a);

  auto selected = ad::gather_rows(ad::Variable::constant(entities), rel.top_k);
  const auto b = ad::Variable::constant(bias);
  for (std::size_t h = 0; h < hops; ++h) {
    auto msg = ad::add_row(
        ad::matmul(weights, ad::matmul(selected, ad::Variable::constant(proj_message[h]))), b);
    if (!isolated.empty()) msg = ad::scatter_rows(msg, isolated, ad::gather_rows(selected, isolated));
    selected = msg;
  }
  return ad::scatter_rows(ad::Variable::constant(entities), rel.top_k, selected).value();
}

Matrix mp_attention(const Matrix& queries, const Matrix& entities) {
  const std::size_t d = queries.cols();
  if (entities.cols() != 2 * d || queries.rows() != entities.rows()) {
    throw ShapeError("mp_attention: queries " + queries.shape_string() + " vs entities " +
                     entities.shape_string());
  }
  const auto e = ad::Variable::constant(entities);
  const auto scores = ad::matmul_bt(ad::Variable::constant(queries), ad::slice_cols(e, 0, d));
  std::vector<std::size_t> valid(queries.rows());
  std::iota(valid.begin(), valid.end(), std::size_t{1});
  return ad::matmul(ad::masked_softmax(scores, valid), ad::slice_cols(e, d, 2 * d)).value();
}

Matrix gated_output(const Matrix& head, double g) {
  Matrix out = head;
  for (double& v : out.data()) v *= g;
  return out;
}

}  // namespace webrec::mp
