#include "webrec/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "webrec/error.hpp"
#include "webrec/numeric.hpp"

namespace webrec {

using nlohmann::json;

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kNone: return "none";
    case Strategy::kRecPrompt: return "rec-prompt-as-query";
    case Strategy::kTemplateQuery: return "llm-generated-query";
    case Strategy::kWebRec: return "webrec-scored";
  }
  return "?";
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all{Strategy::kNone, Strategy::kRecPrompt, Strategy::kTemplateQuery,
                                         Strategy::kWebRec};
  return all;
}

Strategy parse_strategy(const std::string& name) {
  for (auto s : all_strategies())
    if (strategy_name(s) == name) return s;
  throw ConfigError("unknown retrieval strategy '" + name +
                    "' (expected none, rec-prompt-as-query, llm-generated-query or webrec-scored)");
}

RecCorpus make_rec_corpus(const std::vector<RecInstance>& instances,
                          const std::vector<std::string>& extra_texts, std::size_t vocab_cap) {
  RecCorpus c;
  std::vector<std::string> texts{kRagInstruction, kPlainInstruction, "[1] Title: . Content: ;"};
  for (const auto& inst : instances) {
    texts.push_back(render_rec_prompt(inst));
    for (const auto& cand : inst.candidates) texts.push_back(cand);
    switch (inst.split) {
      case Split::kTrain: c.train.push_back(inst); break;
      case Split::kValid: c.valid.push_back(inst); break;
      case Split::kTest: c.test.push_back(inst); break;
    }
  }
  texts.insert(texts.end(), extra_texts.begin(), extra_texts.end());
  c.vocab = Vocab::build(texts, vocab_cap);
  return c;
}

std::vector<std::string> corpus_texts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open search corpus " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(path + ": " + e.what());
    }
    for (const char* key : {"title", "snippet"})
      if (j.contains(key) && j[key].is_string()) out.push_back(j[key].get<std::string>());
  }
  return out;
}

void save_vocab(const std::string& path, const Vocab& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary " + path);
  for (const auto& w : v.words()) out << w << '\n';
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read vocabulary " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) words.push_back(line);
  if (words.size() < 4 || words[0] != "<pad>" || words[3] != "<eos>") {
    throw DataError("vocabulary " + path + " does not start with the special tokens");
  }
  try {
    return Vocab::from_words({words.begin() + 4, words.end()});
  } catch (const ConfigError& e) {
    throw DataError(path + ": " + e.what());
  }
}

namespace {

std::vector<TokenId> with_bos(const Vocab& vocab, const std::string& text) {
  std::vector<TokenId> out{Vocab::kBos};
  const auto body = vocab.encode(text);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

void keep_tail(std::vector<TokenId>& v, std::size_t n) {
  if (v.size() > n) v.erase(v.begin(), v.end() - static_cast<std::ptrdiff_t>(n));
}

}  // namespace

Transformer pretrain_rec_backbone(const ModelConfig& cfg, const RecCorpus& corpus,
                                  const PretrainOptions& opts, std::vector<double>* loss_curve) {
  const auto& pool = corpus.train.empty() ? corpus.test : corpus.train;
  if (pool.empty()) throw DataError("pretraining needs at least one instance");
  if (corpus.vocab.size() > cfg.vocab_size) {
    throw ConfigError("model.vocab_size " + std::to_string(cfg.vocab_size) + " is smaller than the vocabulary (" +
                      std::to_string(corpus.vocab.size()) + " words)");
  }
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& inst : pool) {
    auto t = with_bos(corpus.vocab, assemble_prompt(render_rec_prompt(inst), {}).rendered + " " + inst.target);
    t.push_back(Vocab::kEos);
    keep_tail(t, cfg.max_seq_len);
    seqs.push_back(std::move(t));
  }

  auto model = Transformer::init(cfg, opts.seed);
  auto& params = model.mutable_params();
  params.set_trainable(true);
  TrainConfig tc;
  tc.learning_rate = opts.learning_rate;
  tc.weight_decay = 0.0;
  AdamW opt(params.all(), tc);
  Rng rng(mix64(opts.seed ^ 0x9e3779b97f4a7c15ULL));
  for (std::size_t step = 0; step < opts.steps; ++step) {
    opt.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < opts.batch; ++b) {
      TrainExample ex;
      ex.tokens = seqs[rng.below(seqs.size())];
      for (std::size_t i = 0; i + 1 < ex.tokens.size(); ++i) {
        ex.rows.push_back(i);
        ex.labels.push_back(ex.tokens[i + 1]);
      }
      const auto loss = ad::scale(nll_loss(example_logits(model, ex, nullptr, nullptr), ex.labels).value,
                                  1.0 / static_cast<double>(opts.batch));
      total += loss.value()(0, 0);
      loss.backward();
    }
    if (!std::isfinite(total)) throw InvariantError("pretraining: non-finite loss at step " + std::to_string(step));
    opt.step();
    if (loss_curve) loss_curve->push_back(total);
    if ((step + 1) % 50 == 0) spdlog::debug("pretrain step {} loss {:.4f}", step + 1, total);
  }
  params.set_trainable(false);
  return model;
}

std::string template_query(const RecInstance& inst) {
  static const auto stop = default_stopwords();
  std::vector<std::string> words;
  std::set<std::string> seen;
  for (auto it = inst.history.rbegin(); it != inst.history.rend(); ++it) {
    if (*it == kPadTitle) continue;
    for (const auto& w : Vocab::split(*it)) {
      if (words.size() == 12) break;
      if (!std::isalpha(static_cast<unsigned char>(w[0])) || stop.count(w) || !seen.insert(w).second) continue;
      words.push_back(w);
    }
  }
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

PreparedPrompt prepare_prompt(const Transformer& backbone, const Vocab& vocab, const RecInstance& inst,
                              const PromptPlan& plan, SearchClient* client) {
  const auto& mcfg = backbone.config();
  PreparedPrompt p;
  const auto rec = render_rec_prompt(inst);
  switch (plan.strategy) {
    case Strategy::kNone: break;
    case Strategy::kRecPrompt: p.query = rec; break;
    case Strategy::kTemplateQuery: p.query = template_query(inst); break;
    case Strategy::kWebRec: {
      auto prompt = with_bos(vocab, assemble_prompt(rec, {}).rendered);
      keep_tail(prompt, mcfg.max_seq_len - std::min(mcfg.max_seq_len - 1, plan.max_new_tokens));
      const auto trace = backbone.greedy_decode(prompt, plan.max_new_tokens);
      if (trace.tokens.empty()) break;
      auto qopts = plan.scoring;
      // Specials and punctuation never make useful keywords.
      for (const auto& w : vocab.words()) {
        const auto c = static_cast<unsigned char>(w[0]);
        if (c < 0x80 && !std::isalnum(c)) qopts.stopwords.insert(w);
      }
      const auto r = build_query(trace, [&](TokenId t) { return vocab.surface(t); }, qopts);
      if (r.query.usable) p.query = r.query.text;
      break;
    }
  }

  std::vector<WebDocument> docs;
  if (client && plan.strategy != Strategy::kNone && p.query.find_first_not_of(' ') != std::string::npos) {
    docs = search_or_empty(p.query, *client, plan.top_n);
  }
  p.docs_retrieved = docs.size();

  std::size_t longest = 0;
  for (const auto& c : inst.candidates) {
    p.candidates.push_back(vocab.encode(c));
    longest = std::max(longest, p.candidates.back().size());
  }
  p.target_index = inst.target_index;
  if (longest >= mcfg.max_seq_len) throw DataError("candidate title longer than the context window");

  std::size_t used = docs.size();
  for (;;) {
    const std::vector<WebDocument> part(docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(used));
    p.rendered = assemble_prompt(rec, part).rendered;
    p.tokens = with_bos(vocab, p.rendered);
    if (p.tokens.size() + longest <= mcfg.max_seq_len) break;
    if (used == 0) {
      keep_tail(p.tokens, mcfg.max_seq_len - longest);
      break;
    }
    --used;
  }
  p.docs_used = used;
  return p;
}

TrainExample make_rec_example(const Transformer& backbone, const PreparedPrompt& p, std::size_t first_layer) {
  TrainExample ex;
  ex.tokens = p.tokens;
  const auto& title = p.candidates.at(p.target_index);
  if (title.empty()) throw DataError("target title has no tokens");
  ex.tokens.insert(ex.tokens.end(), title.begin(), title.end());
  for (std::size_t i = 0; i < title.size(); ++i) {
    ex.rows.push_back(p.tokens.size() - 1 + i);
    ex.labels.push_back(title[i]);
  }
  ex.first_layer = first_layer;
  ex.hidden = backbone.hidden_before(ex.tokens, first_layer);
  return ex;
}

const PreparedPrompt& PromptCache::get(const Transformer& backbone, const Vocab& vocab,
                                       const RecInstance& inst, std::size_t index, const PromptPlan& plan,
                                       SearchClient* client) {
  const auto key = strategy_name(plan.strategy) + "/" + std::to_string(plan.top_n) + "/" +
                   std::to_string(static_cast<int>(inst.split)) + "/" + std::to_string(index);
  auto it = entries_.find(key);
  if (it == entries_.end()) it = entries_.emplace(key, prepare_prompt(backbone, vocab, inst, plan, client)).first;
  return it->second;
}

namespace {

template <class T>
std::vector<T> head(const std::vector<T>& v, std::size_t n) {
  if (n == 0 || n >= v.size()) return v;
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::uint64_t run_hash(const RecRunConfig& cfg) {
  std::ostringstream s;
  s << cfg.use_mp << '|' << cfg.model.mp_hops << '|' << cfg.model.relation_top_k << '|';
  for (auto l : cfg.model.mp_head_layers) s << l << ',';
  s << '|' << strategy_name(cfg.plan.strategy) << '|' << cfg.plan.top_n << '|' << cfg.train.seed << '|'
    << cfg.train.learning_rate << '|' << cfg.train.epochs;
  return fnv1a64(s.str());
}

}  // namespace

RecRunResult evaluate_rec(const Transformer& backbone, const Vocab& vocab,
                          const std::vector<RecInstance>& instances, const RecRunConfig& cfg,
                          const MPHeadParams* mp, const TaskAdapter& adapter, SearchClient* client,
                          PromptCache* cache) {
  PromptCache local;
  if (!cache) cache = &local;
  RecRunResult res;
  res.adapter = adapter;
  const auto eval = head(instances, cfg.max_eval_instances);
  std::vector<std::size_t> ranks;
  double docs = 0.0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto& p = cache->get(backbone, vocab, eval[i], i, cfg.plan, client);
    const auto ranked = rank_candidates(backbone, p.tokens, p.candidates, mp, &adapter);
    const auto r = rank_of(ranked, p.target_index);
    ranks.push_back(r);
    docs += static_cast<double>(p.docs_used);
    res.outcomes.push_back({eval[i].user_id, p.query, p.docs_used, r});
  }
  res.report = hr_ndcg(ranks, cfg.ks, run_hash(cfg));
  res.mean_docs = eval.empty() ? 0.0 : docs / static_cast<double>(eval.size());
  if (mp) {
    res.mp = *mp;
    double g = 0.0;
    for (const auto& l : mp->per_layer) g += std::abs(l.gate.value()(0, 0));
    res.final_gate = mp->per_layer.empty() ? 0.0 : g / static_cast<double>(mp->per_layer.size());
  }
  return res;
}

RecRunResult run_rec(const Transformer& backbone, const RecCorpus& corpus, const RecRunConfig& cfg,
                     SearchClient* client, PromptCache* cache) {
  PromptCache local;
  if (!cache) cache = &local;
  const auto& mcfg = backbone.config();
  std::optional<MPHeadParams> mp;
  // The last layer has to run so the trainer can restrict it to label rows.
  std::size_t first_layer = mcfg.n_layers - 1;
  if (cfg.use_mp) {
    auto mp_cfg = mcfg;
    mp_cfg.mp_head_layers = cfg.model.mp_head_layers;
    mp_cfg.mp_hops = cfg.model.mp_hops;
    mp_cfg.relation_top_k = cfg.model.relation_top_k;
    mp_cfg.mp_source_head = cfg.model.mp_source_head;
    mp_cfg.d_z = cfg.model.d_z;
    mp_cfg.validate();
    if (mp_cfg.mp_head_layers.empty()) throw ConfigError("use_mp needs at least one mp_head_layers entry");
    Rng rng(mix64(cfg.train.seed ^ 0x6d70686561645fULL));
    mp = MPHeadParams::init(mp_cfg, rng);
    first_layer = *std::min_element(mp_cfg.mp_head_layers.begin(), mp_cfg.mp_head_layers.end());
  }
  auto adapter = TaskAdapter::init(mcfg);

  const auto train_set = head(corpus.train, cfg.max_train_instances);
  if (train_set.empty()) throw DataError("no training instances");
  std::vector<TrainExample> data;
  data.reserve(train_set.size());
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    data.push_back(make_rec_example(backbone, cache->get(backbone, corpus.vocab, train_set[i], i, cfg.plan, client),
                                    first_layer));
  }
  const auto tr = train(backbone, mp ? &*mp : nullptr, &adapter, data, cfg.train);

  auto res = evaluate_rec(backbone, corpus.vocab, corpus.test, cfg, mp ? &*mp : nullptr, adapter, client, cache);
  res.loss_curve = tr.loss_curve;
  return res;
}

// ---------------------------------------------------------------- sweep

const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes{"hops",     "baseline", "layer",    "relation_top_k",
                                             "strategy", "top_n",    "top_k_rec"};
  return axes;
}

namespace {

SweepRow make_row(std::string axis, std::string value, std::string label, std::size_t k,
                  const RecRunResult& r, double runtime) {
  SweepRow row;
  row.axis = std::move(axis);
  row.value = std::move(value);
  row.label = std::move(label);
  row.metric_k = k;
  row.report = r.report;
  const auto hr = r.report.hr_at.find(k);
  const auto nd = r.report.ndcg_at.find(k);
  row.hr = hr == r.report.hr_at.end() ? 0.0 : hr->second;
  row.ndcg = nd == r.report.ndcg_at.end() ? 0.0 : nd->second;
  row.final_loss = r.loss_curve.empty() ? 0.0 : r.loss_curve.back();
  row.final_gate = r.final_gate;
  row.mean_docs = r.mean_docs;
  row.runtime_s = runtime;
  return row;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::vector<SweepRow> ablation_sweep(const Transformer& backbone, const RecCorpus& corpus,
                                     const SweepOptions& opts, SearchClient* client) {
  for (const auto& a : opts.axes) {
    if (std::find(sweep_axes().begin(), sweep_axes().end(), a) == sweep_axes().end()) {
      throw ConfigError("unknown sweep axis '" + a + "'");
    }
  }
  PromptCache cache;
  std::vector<SweepRow> rows;
  const std::size_t default_k = 10;
  auto timed = [&](const RecRunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = run_rec(backbone, corpus, cfg, client, &cache);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return std::make_pair(std::move(r), s);
  };

  for (const auto& axis : opts.axes) {
    spdlog::info("sweep: axis {}", axis);
    if (axis == "hops") {
      for (auto h : opts.hops) {
        auto cfg = opts.base;
        cfg.use_mp = true;
        cfg.model.mp_hops = h;
        const auto [r, s] = timed(cfg);
        rows.push_back(make_row(axis, std::to_string(h), std::to_string(h) + "-hop MP-Head", default_k, r, s));
      }
    } else if (axis == "baseline") {
      auto cfg = opts.base;
      cfg.use_mp = false;
      const auto [r, s] = timed(cfg);
      rows.push_back(make_row(axis, "none", "no MP-Head", default_k, r, s));
    } else if (axis == "layer") {
      for (std::size_t l = 0; l < backbone.config().n_layers; ++l) {
        auto cfg = opts.base;
        cfg.use_mp = true;
        cfg.model.mp_head_layers = {l};
        const auto [r, s] = timed(cfg);
        rows.push_back(make_row(axis, std::to_string(l), "MP-Head at layer " + std::to_string(l), default_k, r, s));
      }
    } else if (axis == "relation_top_k") {
      for (auto k : opts.relation_top_k) {
        auto cfg = opts.base;
        cfg.use_mp = true;
        cfg.model.relation_top_k = k;
        const auto [r, s] = timed(cfg);
        rows.push_back(make_row(axis, std::to_string(k), "relation top-" + std::to_string(k), default_k, r, s));
      }
    } else if (axis == "strategy") {
      for (auto st : all_strategies()) {
        auto cfg = opts.base;
        cfg.plan.strategy = st;
        const auto [r, s] = timed(cfg);
        rows.push_back(make_row(axis, strategy_name(st), "retrieval: " + strategy_name(st), default_k, r, s));
      }
    } else if (axis == "top_n") {
      for (auto n : opts.top_n) {
        auto cfg = opts.base;
        cfg.plan.top_n = n;
        const auto [r, s] = timed(cfg);
        rows.push_back(make_row(axis, std::to_string(n), "top-" + std::to_string(n) + " websites", default_k, r, s));
      }
    } else if (axis == "top_k_rec") {
      auto cfg = opts.base;
      for (auto k : opts.top_k_rec)
        if (std::find(cfg.ks.begin(), cfg.ks.end(), k) == cfg.ks.end()) cfg.ks.push_back(k);
      std::sort(cfg.ks.begin(), cfg.ks.end());
      const auto [r, s] = timed(cfg);
      for (auto k : opts.top_k_rec) {
        rows.push_back(make_row(axis, std::to_string(k), "top-" + std::to_string(k) + " recommendations", k, r, s));
      }
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::set<std::size_t> ks;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.report.hr_at) ks.insert(k);
  std::ostringstream out;
  out << "axis,value,label,metric_k,hr,ndcg";
  for (auto k : ks) out << ",hr@" << k;
  for (auto k : ks) out << ",ndcg@" << k;
  out << ",n_instances,final_loss,gate,mean_docs\n";
  for (const auto& r : rows) {
    out << r.axis << ',' << r.value << ",\"" << r.label << "\"," << r.metric_k << ',' << fmt(r.hr) << ','
        << fmt(r.ndcg);
    for (auto k : ks) {
      const auto it = r.report.hr_at.find(k);
      out << ',' << (it == r.report.hr_at.end() ? "" : fmt(it->second));
    }
    for (auto k : ks) {
      const auto it = r.report.ndcg_at.find(k);
      out << ',' << (it == r.report.ndcg_at.end() ? "" : fmt(it->second));
    }
    out << ',' << r.report.n_instances << ',' << fmt(r.final_loss) << ',' << fmt(r.final_gate) << ','
        << fmt(r.mean_docs) << '\n';
  }
  return out.str();
}

json sweep_series(const std::vector<SweepRow>& rows) {
  json series = json::object();
  for (const auto& r : rows) {
    auto& s = series[r.axis];
    if (s.is_null()) s = json{{"x", json::array()}, {"label", json::array()}, {"hr", json::array()},
                              {"ndcg", json::array()}, {"metric_k", json::array()}};
    s["x"].push_back(r.value);
    s["label"].push_back(r.label);
    s["hr"].push_back(r.hr);
    s["ndcg"].push_back(r.ndcg);
    s["metric_k"].push_back(r.metric_k);
  }
  return json{{"series", series}};
}

std::string sweep_timings_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "axis,value,runtime_s\n";
  for (const auto& r : rows) out << r.axis << ',' << r.value << ',' << fmt(r.runtime_s) << '\n';
  return out.str();
}

}  // namespace webrec
