#pragma once

// Turning a decoding trace into a web query: every generated token is scored
// by how much later tokens attend to it times the entropy of the distribution
// it was drawn from, scores are mean-pooled over sliding windows, and the
// best windows become the keyword query.

#include <cstddef>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "webrec/model.hpp"

namespace webrec {

struct ScoredToken {
  std::size_t index = 0;
  TokenId token_id = 0;
  double s_attention = 0.0;
  double s_entropy = 0.0;
  double s = 0.0;
  bool selected = false;
};

/// s_i = max over later generated tokens j of the attention j pays to i; the
/// last token gets 0.
std::vector<double> score_attention(const DecodeTrace& trace);

/// Natural-log entropy of each step's distribution, with 0 ln 0 = 0.
std::vector<double> score_entropy(const DecodeTrace& trace);
double entropy(std::span<const double> dist);

std::vector<double> combine_scores(std::span<const double> att, std::span<const double> ent);

/// Half-open token span [begin, end).
using Span = std::pair<std::size_t, std::size_t>;

struct PoolSelection {
  std::vector<double> pooled;        // one mean per window start
  std::vector<std::size_t> windows;  // selected window starts, ascending
  std::vector<Span> spans;           // merged, in generation order
};

/// Sliding mean with stride 1, top-k_q windows (ties to the earlier start),
/// overlapping windows merged.
PoolSelection pool_and_select(std::span<const double> s, std::size_t window, std::size_t k_q);

struct RetrievalQuery {
  std::vector<Span> keywords;
  std::string text;
  std::vector<double> source_cluster_scores;
  bool usable = false;
};

using Detokenizer = std::function<std::string(TokenId)>;

/// Joins the surface forms of the spans' tokens with single spaces.
RetrievalQuery assemble_query(std::span<const TokenId> tokens, std::span<const Span> spans,
                              const Detokenizer& detok);

struct QueryOptions {
  std::size_t window = 3;
  std::size_t k_q = 8;
  /// Surface forms whose score is forced to 0 before pooling; empty disables.
  std::set<std::string> stopwords;
};

struct QueryResult {
  std::vector<ScoredToken> tokens;
  PoolSelection selection;
  RetrievalQuery query;
};

/// The full scoring pipeline. A generation shorter than the window pools with
/// window = generation length.
QueryResult build_query(const DecodeTrace& trace, const Detokenizer& detok,
                        const QueryOptions& opts = {});

/// Tab-separated table: index, token, s_att, s_ent, s, selected.
std::string format_score_table(const QueryResult& r, const Detokenizer& detok);

/// A small English stopword list for the optional filter.
std::set<std::string> default_stopwords();

}  // namespace webrec
