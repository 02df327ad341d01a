#include "webrec/query.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "webrec/error.hpp"

namespace webrec {

std::vector<double> score_attention(const DecodeTrace& trace) {
  const std::size_t n = trace.tokens.size();
  if (trace.attention.size() != n) {
    throw DataError("score_attention: " + std::to_string(trace.attention.size()) +
                    " attention rows for " + std::to_string(n) + " tokens");
  }
  const std::size_t p = trace.prompt_length;
  for (std::size_t j = 0; j < n; ++j) {
    if (trace.attention[j].size() != p + j + 1) {
      throw DataError("score_attention: attention row " + std::to_string(j) + " has length " +
                      std::to_string(trace.attention[j].size()) + ", expected " +
                      std::to_string(p + j + 1));
    }
  }
  std::vector<double> s(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s[i] = std::max(s[i], trace.attention[j][p + i]);
  return s;
}

double entropy(std::span<const double> dist) {
  double h = 0.0;
  for (double p : dist)
    if (p > 0.0) h -= p * std::log(p);
  // Rounding can push a near-uniform sum a hair past ln |V|.
  const double cap = dist.empty() ? 0.0 : std::log(static_cast<double>(dist.size()));
  return std::clamp(h, 0.0, cap);
}

std::vector<double> score_entropy(const DecodeTrace& trace) {
  std::vector<double> out;
  out.reserve(trace.dist.size());
  for (std::size_t j = 0; j < trace.dist.size(); ++j) {
    const auto& d = trace.dist[j];
    const double total = std::accumulate(d.begin(), d.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-6) {
      throw DataError("score_entropy: distribution " + std::to_string(j) + " sums to " +
                      std::to_string(total));
    }
    out.push_back(entropy(d));
  }
  return out;
}

std::vector<double> combine_scores(std::span<const double> att, std::span<const double> ent) {
  if (att.size() != ent.size()) {
    throw ShapeError("combine_scores: " + std::to_string(att.size()) + " attention scores vs " +
                     std::to_string(ent.size()) + " entropy scores");
  }
  std::vector<double> s(att.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = att[i] * ent[i];
  return s;
}

PoolSelection pool_and_select(std::span<const double> s, std::size_t window, std::size_t k_q) {
  if (window == 0) throw ShapeError("pool_and_select: window must be >= 1");
  if (s.size() < window) {
    throw DataError("pool_and_select: " + std::to_string(s.size()) +
                    " tokens is fewer than the window of " + std::to_string(window) +
                    "; shrink the window");
  }
  PoolSelection out;
  const std::size_t n_windows = s.size() - window + 1;
  out.pooled.resize(n_windows);
  for (std::size_t i = 0; i < n_windows; ++i) {
    double sum = 0.0;
    for (std::size_t t = i; t < i + window; ++t) sum += s[t];
    out.pooled[i] = sum / static_cast<double>(window);
  }
  std::vector<std::size_t> order(n_windows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out.pooled[a] > out.pooled[b]; });
  order.resize(std::min(k_q, n_windows));
  std::sort(order.begin(), order.end());
  out.windows = order;
  for (std::size_t start : order) {
    const std::size_t end = start + window;
    if (!out.spans.empty() && start <= out.spans.back().second) {
      out.spans.back().second = std::max(out.spans.back().second, end);
    } else {
      out.spans.emplace_back(start, end);
    }
  }
  return out;
}

RetrievalQuery assemble_query(std::span<const TokenId> tokens, std::span<const Span> spans,
                              const Detokenizer& detok) {
  RetrievalQuery q;
  std::vector<std::string> words;
  for (const auto& sp : spans) {
    if (sp.first >= sp.second || sp.second > tokens.size()) {
      throw ShapeError("assemble_query: span out of bounds");
    }
    if (!q.keywords.empty() && sp.first < q.keywords.back().second) {
      throw ShapeError("assemble_query: spans must be ordered and disjoint");
    }
    q.keywords.push_back(sp);
    for (std::size_t i = sp.first; i < sp.second; ++i) {
      auto w = detok(tokens[i]);
      if (!w.empty()) words.push_back(std::move(w));
    }
  }
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) q.text += ' ';
    q.text += words[i];
  }
  q.usable = !q.text.empty();
  return q;
}

QueryResult build_query(const DecodeTrace& trace, const Detokenizer& detok, const QueryOptions& opts) {
  QueryResult r;
  if (trace.tokens.empty()) return r;
  const auto att = score_attention(trace);
  const auto ent = score_entropy(trace);
  auto s = combine_scores(att, ent);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!opts.stopwords.empty() && opts.stopwords.count(detok(trace.tokens[i]))) s[i] = 0.0;
    r.tokens.push_back({i, trace.tokens[i], att[i], ent[i], s[i], false});
  }
  r.selection = pool_and_select(s, std::min(opts.window, s.size()), opts.k_q);
  for (const auto& sp : r.selection.spans)
    for (std::size_t i = sp.first; i < sp.second; ++i) r.tokens[i].selected = true;
  r.query = assemble_query(trace.tokens, r.selection.spans, detok);
  for (auto w : r.selection.windows) r.query.source_cluster_scores.push_back(r.selection.pooled[w]);
  return r;
}

std::string format_score_table(const QueryResult& r, const Detokenizer& detok) {
  std::string out = "index\ttoken\ts_att\ts_ent\ts\tselected\n";
  char buf[160];
  for (const auto& t : r.tokens) {
    std::snprintf(buf, sizeof buf, "%zu\t", t.index);
    out += buf;
    out += detok(t.token_id);
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\t%.6f\t%d\n", t.s_attention, t.s_entropy, t.s,
                  t.selected ? 1 : 0);
    out += buf;
  }
  return out;
}

std::set<std::string> default_stopwords() {
  return {"a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it",
          "of", "on", "or", "that", "the", "this", "to", "was", "with", ",", ".", "\"", ":", ";"};
}

}  // namespace webrec
