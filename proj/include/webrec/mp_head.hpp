#pragma once

// Message-passing attention head: cached K/V become entities, a task feature
// scores their relevance, the top-k relevant entities exchange messages over
// a clamped relation graph, and the query attends over the updated entities.

#include <cstddef>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "webrec/autodiff.hpp"
#include "webrec/model.hpp"
#include "webrec/numeric.hpp"

namespace webrec::mp {

/// Pruned relation graph over n entities.
struct RelationMatrix {
  std::size_t n = 0;
  /// Selected entity indices, ascending.
  std::vector<std::size_t> top_k;
  /// Relevance score c_i of every entity.
  std::vector<double> relevance;
  /// r(i, j) for i, j in top_k; absent pairs are zero.
  std::map<std::pair<std::size_t, std::size_t>, double> entries;

  double at(std::size_t i, std::size_t j) const;
  std::size_t nonzero_count() const;
  /// Number of j in top_k with r(i, j) > 0.
  std::size_t degree(std::size_t i) const;
  Matrix dense() const;
};

/// Resolved k for a prefix of length n (see ModelConfig::relation_top_k).
std::size_t top_k_for(std::size_t configured, std::size_t n);

/// Indices of the k largest scores, ties to the lower index, returned ascending.
std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k);

/// e_i = proj_entity([K_i, V_i]); keys and values are n x d_head.
Matrix encode_entities(const Matrix& keys, const Matrix& values, const Matrix& proj_entity);

/// c_i = cos(proj_relation(z), e_i); relation over the k most relevant entities.
RelationMatrix encode_relations(const Matrix& entities, const Matrix& task_feature,
                                const Matrix& proj_relation, std::size_t k);

/// Relation over precomputed relevance scores c.
RelationMatrix relations_from_relevance(std::span<const double> relevance, std::size_t k);

/// `hops` rounds of degree-normalized aggregation over the relation's top-k
/// set; proj_message holds one map per hop.
Matrix message_pass(const Matrix& entities, const RelationMatrix& rel,
                    std::span<const Matrix> proj_message, const Matrix& bias, std::size_t hops);

/// Causal scoring over key-surrogates e[:, :d], aggregation of e[:, d:].
Matrix mp_attention(const Matrix& queries, const Matrix& entities);

/// g * head.
Matrix gated_output(const Matrix& head, double g);

/// r_ij / sqrt(deg i deg j) for the selected entities; isolated entities get
/// zero rows. Exposed so normalization can be checked directly.
Matrix normalized_weights(const RelationMatrix& rel);

// Differentiable pieces used by the transformer.

struct PrefixGraph {
  std::vector<std::size_t> top_k;
  Matrix norm;                        // 1/sqrt(deg_a deg_b) or 0
  std::vector<std::size_t> isolated;  // local indices with deg = 0
};

/// Builds the pruned graph for entities [0, n) from relevance values.
PrefixGraph build_prefix_graph(std::span<const double> relevance, std::size_t k);

/// Updated entity matrix for a prefix of length n = entities.rows().
ad::Variable propagate(const ad::Variable& entities, const ad::Variable& relevance,
                       const PrefixGraph& graph, std::span<const ad::Variable> proj_message,
                       const ad::Variable& bias, std::size_t hops);

/// Head output rows for the given absolute positions. `entities` and
/// `relevance` cover positions [0, N); `queries` has one row per position.
ad::Variable head_rows(const ad::Variable& entities, const ad::Variable& relevance,
                       const ad::Variable& queries, std::span<const std::size_t> positions,
                       const MPLayerParams& layer, std::size_t hops, std::size_t configured_k);

}  // namespace webrec::mp
