#pragma once

// The recommendation pipeline at toy scale: a word vocabulary over the
// dataset and the search corpus, a backbone pretrained as a language model on
// recommendation prompts, web-augmented prompts built by one of four
// retrieval strategies, MP-Head training against the frozen backbone, and
// candidate ranking. The ablation sweep is layered on top.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "webrec/eval.hpp"
#include "webrec/query.hpp"
#include "webrec/rec_data.hpp"
#include "webrec/train.hpp"
#include "webrec/vocab.hpp"
#include "webrec/web.hpp"

namespace webrec {

enum class Strategy { kNone, kRecPrompt, kTemplateQuery, kWebRec };

/// "none", "rec-prompt-as-query", "llm-generated-query", "webrec-scored".
std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);
const std::vector<Strategy>& all_strategies();

struct RecCorpus {
  Vocab vocab;
  std::vector<RecInstance> train, valid, test;
};

/// Splits instances by their split field and builds a vocabulary of at most
/// `vocab_cap` words from prompts, titles and `extra_texts`.
RecCorpus make_rec_corpus(const std::vector<RecInstance>& instances,
                          const std::vector<std::string>& extra_texts, std::size_t vocab_cap);

/// Titles and snippets of a local search corpus, for vocabulary building.
std::vector<std::string> corpus_texts(const std::string& path);

/// One word per line, specials included.
void save_vocab(const std::string& path, const Vocab& v);
Vocab load_vocab(const std::string& path);

struct PretrainOptions {
  std::size_t steps = 300;
  std::size_t batch = 4;
  double learning_rate = 3e-3;
  std::uint64_t seed = 7;
};

/// Next-token pretraining on "<bos> plain prompt + target title <eos>" for the
/// training instances, then the backbone is frozen.
Transformer pretrain_rec_backbone(const ModelConfig& cfg, const RecCorpus& corpus,
                                  const PretrainOptions& opts,
                                  std::vector<double>* loss_curve = nullptr);

/// Deterministic keyword dump used as the "LLM-generated query" arm: distinct
/// non-stopword words of the history titles, most recent first, at most 12.
std::string template_query(const RecInstance& inst);

struct PromptPlan {
  Strategy strategy = Strategy::kWebRec;
  std::size_t top_n = 10;
  QueryOptions scoring;
  std::size_t max_new_tokens = 16;
};

struct PreparedPrompt {
  std::string query;  // empty for Strategy::kNone
  std::size_t docs_retrieved = 0;
  std::size_t docs_used = 0;  // after dropping documents that do not fit
  std::string rendered;
  std::vector<TokenId> tokens;
  std::vector<std::vector<TokenId>> candidates;
  std::size_t target_index = 0;
};

/// Builds the prompt an instance is ranked with. Lowest-ranked documents are
/// dropped until prompt plus the longest candidate fits the context window.
PreparedPrompt prepare_prompt(const Transformer& backbone, const Vocab& vocab,
                              const RecInstance& inst, const PromptPlan& plan,
                              SearchClient* client);

/// Next-token supervision on the target title after the prompt, with the
/// frozen prefix below `first_layer` precomputed.
TrainExample make_rec_example(const Transformer& backbone, const PreparedPrompt& p,
                              std::size_t first_layer);

struct RecRunConfig {
  ModelConfig model;  // backbone shape plus MP-Head placement
  bool use_mp = true;
  TrainConfig train;
  PromptPlan plan;
  std::vector<std::size_t> ks{1, 3, 5, 10, 20};
  /// 0 keeps every instance.
  std::size_t max_train_instances = 0;
  std::size_t max_eval_instances = 0;
};

struct InstanceOutcome {
  std::string user_id;
  std::string query;
  std::size_t docs_used = 0;
  std::size_t target_rank = 0;
};

struct RecRunResult {
  EvalReport report;
  std::vector<InstanceOutcome> outcomes;
  std::vector<double> loss_curve;
  double final_gate = 0.0;  // mean |g| over MP-Head layers, 0 without one
  double mean_docs = 0.0;
  std::optional<MPHeadParams> mp;
  TaskAdapter adapter;
};

/// Memoizes prepared prompts per (strategy, top_n, instance) so runs that
/// differ only in the MP-Head share retrieval work.
class PromptCache {
 public:
  const PreparedPrompt& get(const Transformer& backbone, const Vocab& vocab,
                            const RecInstance& inst, std::size_t index, const PromptPlan& plan,
                            SearchClient* client);

 private:
  std::map<std::string, PreparedPrompt> entries_;
};

/// Trains MP-Head (when enabled) and adapter on the training split, then
/// ranks the test split.
RecRunResult run_rec(const Transformer& backbone, const RecCorpus& corpus, const RecRunConfig& cfg,
                     SearchClient* client, PromptCache* cache = nullptr);

/// Ranks `instances` with already trained pieces.
RecRunResult evaluate_rec(const Transformer& backbone, const Vocab& vocab,
                          const std::vector<RecInstance>& instances, const RecRunConfig& cfg,
                          const MPHeadParams* mp, const TaskAdapter& adapter, SearchClient* client,
                          PromptCache* cache = nullptr);

// ---------------------------------------------------------------- sweep

/// Axis names: "hops", "baseline" (the single no-MP-Head row), "layer",
/// "relation_top_k", "strategy", "top_n", "top_k_rec".
const std::vector<std::string>& sweep_axes();

struct SweepRow {
  std::string axis;
  std::string value;
  std::string label;
  std::size_t metric_k = 10;
  double hr = 0.0;    // HR@metric_k
  double ndcg = 0.0;  // NDCG@metric_k
  EvalReport report;
  double final_loss = 0.0;
  double final_gate = 0.0;
  double mean_docs = 0.0;
  double runtime_s = 0.0;
};

struct SweepOptions {
  std::vector<std::string> axes;
  RecRunConfig base;
  std::vector<std::size_t> hops{1, 2, 3};
  std::vector<std::size_t> top_n{1, 5, 10, 15, 20};
  std::vector<std::size_t> top_k_rec{1, 3, 5, 10, 20};
  std::vector<std::size_t> relation_top_k{2, 4, 8};
};

std::vector<SweepRow> ablation_sweep(const Transformer& backbone, const RecCorpus& corpus,
                                     const SweepOptions& opts, SearchClient* client);

/// One row per configuration; runtimes are left out so equal seeds give equal
/// bytes.
std::string sweep_csv(const std::vector<SweepRow>& rows);
/// Per-axis x/y arrays for plotting.
nlohmann::json sweep_series(const std::vector<SweepRow>& rows);
/// axis, value, runtime_s.
std::string sweep_timings_csv(const std::vector<SweepRow>& rows);

}  // namespace webrec
