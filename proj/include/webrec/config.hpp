#pragma once

// Pipeline configuration file. Parsing is strict: an unknown key anywhere is
// a ConfigError naming its dotted path, as is a value of the wrong type.
//
// {
//   "seed": 7,
//   "model":     {"vocab_size": 512, "d_model": 64, "n_heads": 4, "n_layers": 4,
//                 "max_seq_len": 512, "d_ff": 0, "trace_layer": -1, "eos_token": 3,
//                 "mp_head_layers": [1], "mp_hops": 1, "relation_top_k": 0,
//                 "mp_source_head": 0, "d_z": 0},
//   "train":     {"epochs": 5, "batch_size": 8, "learning_rate": 0.001,
//                 "weight_decay": 0.01, "max_steps": 0, "freeze_gate": false,
//                 "require_grad_check": true, "grad_check_tolerance": 0.0001,
//                 "pretrain_steps": 300, "pretrain_learning_rate": 0.003},
//   "retrieval": {"backend": "replay", "top_n": 10, "fixtures": "fixtures/table7.jsonl",
//                 "max_in_flight": 4},
//   "scoring":   {"window": 3, "k_q": 8, "max_new_tokens": 16, "stopwords": false},
//   "eval":      {"strategy": "webrec-scored", "ks": [1, 3, 5, 10, 20],
//                 "max_train_instances": 0, "max_eval_instances": 0},
//   "paths":     {"dataset": "", "checkpoint": "", "report_dir": "reports",
//                 "vocab_corpus": ""}
// }
//
// An empty dataset path selects the built-in synthetic catalog. The
// vocabulary covers the dataset plus the titles and snippets of vocab_corpus,
// or of the offline retrieval fixtures when vocab_corpus is empty. The
// checkpoint's vocabulary is stored next to it as <checkpoint>.vocab.
//
// Every key is optional; missing keys keep the defaults above. Relative paths
// are resolved against the directory holding the config file.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "webrec/model.hpp"
#include "webrec/train.hpp"

namespace webrec {

struct RetrievalSettings {
  std::string backend = "replay";
  std::size_t top_n = 10;
  std::string fixtures = "fixtures/table7.jsonl";
  std::size_t max_in_flight = 4;
};

struct ScoringSettings {
  std::size_t window = 3;
  std::size_t k_q = 8;
  std::size_t max_new_tokens = 16;
  /// Zero the scores of common English words before pooling.
  bool stopwords = false;
};

struct EvalSettings {
  std::string strategy = "webrec-scored";
  std::vector<std::size_t> ks{1, 3, 5, 10, 20};
  /// 0 keeps every instance.
  std::size_t max_train_instances = 0;
  std::size_t max_eval_instances = 0;
};

struct PathSettings {
  std::string dataset;
  std::string checkpoint;
  std::string report_dir = "reports";
  std::string vocab_corpus;
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  TrainConfig train;
  /// Backbone pretraining on the instance prompts before the frozen phase.
  std::size_t pretrain_steps = 300;
  double pretrain_learning_rate = 3e-3;
  RetrievalSettings retrieval;
  ScoringSettings scoring;
  EvalSettings eval;
  PathSettings paths;

  PipelineConfig();
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Strict: unknown keys throw ConfigError naming `where` + key.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& where = "model");

nlohmann::json to_json(const PipelineConfig& cfg);
/// Relative paths set in the document are anchored at `base_dir`; default paths
/// stay relative to the working directory. Referenced input files must exist.
PipelineConfig parse_pipeline_config(const nlohmann::json& j, const std::string& base_dir = ".");
PipelineConfig load_pipeline_config(const std::string& path);

}  // namespace webrec
