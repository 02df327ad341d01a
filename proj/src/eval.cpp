#include "webrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "webrec/error.hpp"

namespace webrec {

EvalReport hr_ndcg(std::span<const std::size_t> target_ranks, std::span<const std::size_t> ks,
                   std::uint64_t config_hash) {
  EvalReport r;
  r.n_instances = target_ranks.size();
  r.config_hash = config_hash;
  for (std::size_t k : ks) {
    double hits = 0.0;
    double gain = 0.0;
    for (std::size_t rank : target_ranks) {
      if (rank == 0) throw ShapeError("hr_ndcg: ranks are 1-based");
      if (rank <= k) {
        hits += 1.0;
        gain += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
      }
    }
    const double n = target_ranks.empty() ? 1.0 : static_cast<double>(target_ranks.size());
    r.hr_at[k] = hits / n;
    r.ndcg_at[k] = gain / n;
  }
  return r;
}

std::vector<RankedCandidate> rank_candidates(const Transformer& model,
                                             std::span<const TokenId> prompt,
                                             const std::vector<std::vector<TokenId>>& candidates,
                                             const MPHeadParams* mp, const TaskAdapter* adapter) {
  if (prompt.empty()) throw DataError("rank_candidates: empty prompt");
  const std::size_t limit = model.config().max_seq_len;
  // The prompt prefix is forwarded once per distinct truncation and its
  // cache reused for every candidate; copying a KVCache never aliases
  // appended rows.
  struct Prefix {
    KVCache cache;
    std::vector<double> next;  // distribution after the last prompt token
  };
  std::map<std::size_t, Prefix> prefixes;
  ForwardOptions opts;
  opts.mp = mp;
  opts.adapter = adapter;

  std::vector<RankedCandidate> out;
  out.reserve(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const auto& cand = candidates[c];
    if (cand.empty()) throw DataError("rank_candidates: candidate " + std::to_string(c) + " has no tokens");
    if (cand.size() >= limit) throw DataError("rank_candidates: candidate longer than max_seq_len");
    const std::size_t keep = std::min(prompt.size(), limit - cand.size());
    auto it = prefixes.find(keep);
    if (it == prefixes.end()) {
      Prefix pre;
      ForwardOptions last = opts;
      last.output_rows = {keep - 1};
      const auto logits = model.forward(prompt.subspan(prompt.size() - keep), pre.cache, last).logits;
      const auto probs = softmax_rows(logits.value());
      pre.next.assign(probs.data().begin(), probs.data().end());
      it = prefixes.emplace(keep, std::move(pre)).first;
    }
    double total = std::log(std::max(it->second.next[cand[0]], 1e-300));
    if (cand.size() > 1) {
      KVCache cache = it->second.cache;
      ForwardOptions rows = opts;
      for (std::size_t j = 0; j + 1 < cand.size(); ++j) rows.output_rows.push_back(j);
      const auto probs = softmax_rows(
          model.forward(std::span(cand).first(cand.size() - 1), cache, rows).logits.value());
      for (std::size_t j = 1; j < cand.size(); ++j) total += std::log(std::max(probs(j - 1, cand[j]), 1e-300));
    }
    out.push_back({c, total / static_cast<double>(cand.size())});
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedCandidate& a, const RankedCandidate& b) {
    return a.score > b.score;
  });
  return out;
}

std::size_t rank_of(std::span<const RankedCandidate> ranked, std::size_t target) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (ranked[i].index == target) return i + 1;
  throw ShapeError("rank_of: target not among candidates");
}

}  // namespace webrec
