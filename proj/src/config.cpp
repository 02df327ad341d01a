#include "webrec/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "webrec/error.hpp"

namespace webrec {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Walks one JSON object, handing out typed fields and remembering which
// keys were consumed so leftovers can be reported.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& dst) {
    used_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string path = where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError(path + ": expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError(path + ": expected a string");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError(path + ": expected a number");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw ConfigError(path + ": expected an integer");
    } else {
      if (!it->is_array()) throw ConfigError(path + ": expected an array");
      for (const auto& e : *it)
        if (!e.is_number_unsigned()) throw ConfigError(path + ": expected non-negative integers");
    }
    dst = it->get<T>();
  }

  const json* child(const char* key) {
    used_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown config key '" + where_ + "." + key + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base) / p).lexically_normal().string();
}

}  // namespace

PipelineConfig::PipelineConfig() { model.mp_head_layers = {1}; }

void PipelineConfig::validate() const {
  model.validate();
  train.validate();
  if (!(train.learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
  if (pretrain_learning_rate <= 0) throw ConfigError("pretrain_learning_rate must be > 0");
  if (retrieval.top_n == 0) throw ConfigError("retrieval.top_n must be >= 1");
  if (retrieval.max_in_flight == 0) throw ConfigError("retrieval.max_in_flight must be >= 1");
  if (retrieval.backend != "replay" && retrieval.backend != "local" && retrieval.backend != "tavily-like" &&
      retrieval.backend != "brave-like") {
    throw ConfigError("retrieval.backend must be replay, local, tavily-like or brave-like, got '" +
                      retrieval.backend + "'");
  }
  if (scoring.window == 0 || scoring.k_q == 0) throw ConfigError("scoring.window and scoring.k_q must be >= 1");
  if (eval.strategy != "none" && eval.strategy != "rec-prompt-as-query" && eval.strategy != "llm-generated-query" &&
      eval.strategy != "webrec-scored") {
    throw ConfigError("eval.strategy must be none, rec-prompt-as-query, llm-generated-query or webrec-scored, got '" +
                      eval.strategy + "'");
  }
  if (eval.ks.empty()) throw ConfigError("eval.ks must not be empty");
  for (auto k : eval.ks)
    if (k == 0) throw ConfigError("eval.ks entries must be >= 1");
}

json to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size},       {"d_model", c.d_model},
              {"n_heads", c.n_heads},             {"n_layers", c.n_layers},
              {"max_seq_len", c.max_seq_len},     {"d_ff", c.d_ff},
              {"trace_layer", c.trace_layer},     {"eos_token", c.eos_token},
              {"mp_head_layers", c.mp_head_layers}, {"mp_hops", c.mp_hops},
              {"relation_top_k", c.relation_top_k}, {"mp_source_head", c.mp_source_head},
              {"d_z", c.d_z}};
}

ModelConfig model_config_from_json(const json& j, const std::string& where) {
  ModelConfig c;
  Reader r(j, where);
  r.get("vocab_size", c.vocab_size);
  r.get("d_model", c.d_model);
  r.get("n_heads", c.n_heads);
  r.get("n_layers", c.n_layers);
  r.get("max_seq_len", c.max_seq_len);
  r.get("d_ff", c.d_ff);
  r.get("trace_layer", c.trace_layer);
  r.get("eos_token", c.eos_token);
  r.get("mp_head_layers", c.mp_head_layers);
  r.get("mp_hops", c.mp_hops);
  r.get("relation_top_k", c.relation_top_k);
  r.get("mp_source_head", c.mp_source_head);
  r.get("d_z", c.d_z);
  r.finish();
  return c;
}

json to_json(const PipelineConfig& c) {
  const auto& t = c.train;
  return json{
      {"seed", c.seed},
      {"model", to_json(c.model)},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"weight_decay", t.weight_decay},
        {"max_steps", t.max_steps},
        {"freeze_gate", t.freeze_gate},
        {"require_grad_check", t.require_grad_check},
        {"grad_check_tolerance", t.grad_check_tolerance},
        {"pretrain_steps", c.pretrain_steps},
        {"pretrain_learning_rate", c.pretrain_learning_rate}}},
      {"retrieval",
       {{"backend", c.retrieval.backend},
        {"top_n", c.retrieval.top_n},
        {"fixtures", c.retrieval.fixtures},
        {"max_in_flight", c.retrieval.max_in_flight}}},
      {"scoring",
       {{"window", c.scoring.window},
        {"k_q", c.scoring.k_q},
        {"max_new_tokens", c.scoring.max_new_tokens},
        {"stopwords", c.scoring.stopwords}}},
      {"eval",
       {{"strategy", c.eval.strategy},
        {"ks", c.eval.ks},
        {"max_train_instances", c.eval.max_train_instances},
        {"max_eval_instances", c.eval.max_eval_instances}}},
      {"paths",
       {{"dataset", c.paths.dataset}, {"checkpoint", c.paths.checkpoint}, {"report_dir", c.paths.report_dir},
        {"vocab_corpus", c.paths.vocab_corpus}}}};
}

PipelineConfig parse_pipeline_config(const json& j, const std::string& base_dir) {
  PipelineConfig c;
  Reader top(j, "config");
  top.get("seed", c.seed);
  if (const auto* m = top.child("model")) c.model = model_config_from_json(*m, "model");
  if (const auto* t = top.child("train")) {
    Reader r(*t, "train");
    r.get("epochs", c.train.epochs);
    r.get("batch_size", c.train.batch_size);
    r.get("learning_rate", c.train.learning_rate);
    r.get("weight_decay", c.train.weight_decay);
    r.get("max_steps", c.train.max_steps);
    r.get("freeze_gate", c.train.freeze_gate);
    r.get("require_grad_check", c.train.require_grad_check);
    r.get("grad_check_tolerance", c.train.grad_check_tolerance);
    r.get("pretrain_steps", c.pretrain_steps);
    r.get("pretrain_learning_rate", c.pretrain_learning_rate);
    r.finish();
  }
  if (const auto* s = top.child("retrieval")) {
    Reader r(*s, "retrieval");
    r.get("backend", c.retrieval.backend);
    r.get("top_n", c.retrieval.top_n);
    r.get("fixtures", c.retrieval.fixtures);
    r.get("max_in_flight", c.retrieval.max_in_flight);
    r.finish();
  }
  if (const auto* s = top.child("scoring")) {
    Reader r(*s, "scoring");
    r.get("window", c.scoring.window);
    r.get("k_q", c.scoring.k_q);
    r.get("max_new_tokens", c.scoring.max_new_tokens);
    r.get("stopwords", c.scoring.stopwords);
    r.finish();
  }
  if (const auto* e = top.child("eval")) {
    Reader r(*e, "eval");
    r.get("strategy", c.eval.strategy);
    r.get("ks", c.eval.ks);
    r.get("max_train_instances", c.eval.max_train_instances);
    r.get("max_eval_instances", c.eval.max_eval_instances);
    r.finish();
  }
  if (const auto* p = top.child("paths")) {
    Reader r(*p, "paths");
    r.get("dataset", c.paths.dataset);
    r.get("checkpoint", c.paths.checkpoint);
    r.get("report_dir", c.paths.report_dir);
    r.get("vocab_corpus", c.paths.vocab_corpus);
    r.finish();
  }
  top.finish();

  c.train.seed = c.seed;
  // Paths written in the file are relative to it; untouched defaults stay
  // relative to the working directory.
  const PipelineConfig defaults;
  auto rebase = [&](std::string& path, const std::string& fallback) {
    if (path != fallback) path = resolve(base_dir, path);
  };
  rebase(c.retrieval.fixtures, defaults.retrieval.fixtures);
  rebase(c.paths.dataset, defaults.paths.dataset);
  rebase(c.paths.checkpoint, defaults.paths.checkpoint);
  rebase(c.paths.report_dir, defaults.paths.report_dir);
  rebase(c.paths.vocab_corpus, defaults.paths.vocab_corpus);
  c.validate();
  const bool offline = c.retrieval.backend == "replay" || c.retrieval.backend == "local";
  if (offline && !fs::exists(c.retrieval.fixtures)) {
    throw ConfigError("retrieval.fixtures: no such file '" + c.retrieval.fixtures + "'");
  }
  if (!c.paths.dataset.empty() && !fs::exists(c.paths.dataset)) {
    throw ConfigError("paths.dataset: no such file '" + c.paths.dataset + "'");
  }
  if (!c.paths.vocab_corpus.empty() && !fs::exists(c.paths.vocab_corpus)) {
    throw ConfigError("paths.vocab_corpus: no such file '" + c.paths.vocab_corpus + "'");
  }
  return c;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  const auto base = fs::path(path).parent_path().string();
  return parse_pipeline_config(j, base.empty() ? "." : base);
}

}  // namespace webrec
