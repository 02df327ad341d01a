// webrec: command-line entry point for the whole pipeline.
//
// Results go to stdout and report files; logs go to stderr. Failures print a
// single line "webrec: <TAG>: <message>" and exit with the tag's code
// (2 config, 3 data, 4 network, 5 invariant).

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "webrec/checkpoint.hpp"
#include "webrec/config.hpp"
#include "webrec/error.hpp"
#include "webrec/needle.hpp"
#include "webrec/pipeline.hpp"
#include "webrec/selfcheck.hpp"

using namespace webrec;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

PipelineConfig load_config(const Common& c) {
  auto cfg = c.config_path.empty() ? parse_pipeline_config(json::object(), ".") : load_pipeline_config(c.config_path);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

std::vector<RecInstance> load_instances(const PipelineConfig& cfg) {
  if (!cfg.paths.dataset.empty()) return read_instances(cfg.paths.dataset);
  SyntheticCatalogConfig sc;
  sc.seed = cfg.seed;
  return build_instances(five_core_filter(synthetic_interactions(sc)), cfg.seed);
}

std::vector<std::string> vocab_extras(const PipelineConfig& cfg) {
  if (!cfg.paths.vocab_corpus.empty()) return corpus_texts(cfg.paths.vocab_corpus);
  const auto& r = cfg.retrieval;
  if ((r.backend == "replay" || r.backend == "local") && fs::exists(r.fixtures)) return corpus_texts(r.fixtures);
  return {};
}

RecRunConfig run_config(const PipelineConfig& cfg, const ModelConfig& model) {
  RecRunConfig rc;
  rc.model = model;
  rc.use_mp = !model.mp_head_layers.empty();
  rc.train = cfg.train;
  rc.plan.strategy = parse_strategy(cfg.eval.strategy);
  rc.plan.top_n = cfg.retrieval.top_n;
  rc.plan.scoring.window = cfg.scoring.window;
  rc.plan.scoring.k_q = cfg.scoring.k_q;
  if (cfg.scoring.stopwords) rc.plan.scoring.stopwords = default_stopwords();
  rc.plan.max_new_tokens = cfg.scoring.max_new_tokens;
  rc.ks = cfg.eval.ks;
  rc.max_train_instances = cfg.eval.max_train_instances;
  rc.max_eval_instances = cfg.eval.max_eval_instances;
  return rc;
}

Transformer pretrain(const PipelineConfig& cfg, const RecCorpus& corpus, std::vector<double>* curve) {
  auto backbone_cfg = cfg.model;
  backbone_cfg.mp_head_layers.clear();
  PretrainOptions po;
  po.steps = cfg.pretrain_steps;
  po.learning_rate = cfg.pretrain_learning_rate;
  po.seed = cfg.seed;
  spdlog::info("pretraining the backbone for {} steps on {} instances", po.steps, corpus.train.size());
  return pretrain_rec_backbone(backbone_cfg, corpus, po, curve);
}

json report_json(const RecRunResult& r) {
  json hr = json::object(), ndcg = json::object();
  for (const auto& [k, v] : r.report.hr_at) hr["@" + std::to_string(k)] = v;
  for (const auto& [k, v] : r.report.ndcg_at) ndcg["@" + std::to_string(k)] = v;
  json rows = json::array();
  for (const auto& o : r.outcomes)
    rows.push_back({{"user_id", o.user_id}, {"query", o.query}, {"docs", o.docs_used}, {"target_rank", o.target_rank}});
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.report.config_hash));
  return json{{"n_instances", r.report.n_instances},
              {"config_hash", hash},
              {"hr", hr},
              {"ndcg", ndcg},
              {"mean_docs", r.mean_docs},
              {"gate", r.final_gate},
              {"final_loss", r.loss_curve.empty() ? 0.0 : r.loss_curve.back()},
              {"instances", rows}};
}

void print_metrics(const RecRunResult& r) {
  for (const auto& [k, v] : r.report.hr_at)
    std::cout << "HR@" << k << " " << v << "  NDCG@" << k << " " << r.report.ndcg_at.at(k) << "\n";
}

std::string vocab_path(const std::string& checkpoint) { return checkpoint + ".vocab"; }

// ---------------------------------------------------------------- commands

int cmd_ingest(const std::string& input, const std::string& output, std::uint64_t seed, std::size_t min_core,
               std::size_t synthetic_users) {
  std::vector<Interaction> raw;
  if (synthetic_users > 0) {
    SyntheticCatalogConfig sc;
    sc.n_users = synthetic_users;
    sc.seed = seed;
    raw = synthetic_interactions(sc);
  } else {
    if (input.empty()) throw ConfigError("ingest needs --input or --synthetic-users");
    IngestReport rep;
    raw = ingest(input, &rep);
    spdlog::info("ingest: {} lines, {} parsed, {} malformed", rep.lines, rep.parsed, rep.malformed);
  }
  const auto core = five_core_filter(raw, min_core);
  const auto inst = build_instances(core, seed);
  write_instances(output, inst);
  std::set<std::string> users, items;
  for (const auto& i : core) {
    users.insert(i.user_id);
    items.insert(i.item_id);
  }
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& i : inst) ++counts[static_cast<int>(i.split)];
  std::cout << "users " << users.size() << " items " << items.size() << " interactions " << core.size() << "\n"
            << "instances " << inst.size() << " (train " << counts[static_cast<int>(Split::kTrain)] << ", valid "
            << counts[static_cast<int>(Split::kValid)] << ", test " << counts[static_cast<int>(Split::kTest)]
            << ") -> " << output << "\n";
  return 0;
}

int cmd_train(const Common& common) {
  const auto cfg = load_config(common);
  if (cfg.paths.checkpoint.empty()) throw ConfigError("train needs paths.checkpoint");
  const auto corpus = make_rec_corpus(load_instances(cfg), vocab_extras(cfg), cfg.model.vocab_size);
  std::vector<double> curve;
  const auto backbone = pretrain(cfg, corpus, &curve);
  auto client = make_client(cfg.retrieval.backend, cfg.retrieval.fixtures, cfg.retrieval.max_in_flight);
  const auto res = run_rec(backbone, corpus, run_config(cfg, cfg.model), client.get());

  // The stored config carries the MP-Head placement used for training.
  Transformer stored(cfg.model, backbone.params());
  save_checkpoint(cfg.paths.checkpoint, stored, res.mp ? &*res.mp : nullptr, &res.adapter);
  save_vocab(vocab_path(cfg.paths.checkpoint), corpus.vocab);
  auto rep = report_json(res);
  rep["pretrain_loss"] = curve;
  rep["train_loss"] = res.loss_curve;
  write_file(fs::path(cfg.paths.report_dir) / "train_report.json", dump(rep));
  print_metrics(res);
  std::cout << "checkpoint " << cfg.paths.checkpoint << "\n";
  return 0;
}

struct Loaded {
  Checkpoint ck;
  Transformer model;
  Vocab vocab;
};

Loaded load_trained(const PipelineConfig& cfg) {
  if (cfg.paths.checkpoint.empty()) throw ConfigError("paths.checkpoint is not set");
  auto ck = load_checkpoint(cfg.paths.checkpoint);
  auto model = ck.transformer();
  auto vocab = load_vocab(vocab_path(cfg.paths.checkpoint));
  if (vocab.size() > ck.config.vocab_size) throw DataError("vocabulary larger than the checkpoint's model");
  return {std::move(ck), std::move(model), std::move(vocab)};
}

int cmd_eval(const Common& common) {
  const auto cfg = load_config(common);
  const auto l = load_trained(cfg);
  std::vector<RecInstance> test;
  for (const auto& i : load_instances(cfg))
    if (i.split == Split::kTest) test.push_back(i);
  auto client = make_client(cfg.retrieval.backend, cfg.retrieval.fixtures, cfg.retrieval.max_in_flight);
  const auto adapter = l.ck.adapter ? *l.ck.adapter : TaskAdapter::init(l.ck.config);
  const auto res = evaluate_rec(l.model, l.vocab, test, run_config(cfg, l.ck.config),
                                l.ck.mp ? &*l.ck.mp : nullptr, adapter, client.get());
  write_file(fs::path(cfg.paths.report_dir) / "eval_report.json", dump(report_json(res)));
  print_metrics(res);
  return 0;
}

int cmd_score_query(const Common& common, const std::string& prompt, std::optional<std::size_t> instance) {
  const auto cfg = load_config(common);
  const auto l = load_trained(cfg);
  std::string text = prompt;
  if (instance) {
    std::vector<RecInstance> test;
    for (const auto& i : load_instances(cfg))
      if (i.split == Split::kTest) test.push_back(i);
    if (*instance >= test.size()) throw ConfigError("--instance beyond the " + std::to_string(test.size()) + " test instances");
    text = assemble_prompt(render_rec_prompt(test[*instance]), {}).rendered;
  }
  if (text.empty()) throw ConfigError("score-query needs --prompt or --instance");
  std::vector<TokenId> tokens{Vocab::kBos};
  for (auto t : l.vocab.encode(text)) tokens.push_back(t);
  const auto room = l.ck.config.max_seq_len - std::min(l.ck.config.max_seq_len - 1, cfg.scoring.max_new_tokens);
  if (tokens.size() > room) tokens.erase(tokens.begin(), tokens.end() - static_cast<std::ptrdiff_t>(room));
  const auto trace = l.model.greedy_decode(tokens, cfg.scoring.max_new_tokens);
  QueryOptions qo;
  qo.window = cfg.scoring.window;
  qo.k_q = cfg.scoring.k_q;
  if (cfg.scoring.stopwords) qo.stopwords = default_stopwords();
  const auto detok = [&](TokenId t) { return l.vocab.surface(t); };
  const auto r = build_query(trace, detok, qo);
  std::cout << "query\t" << r.query.text << "\n" << format_score_table(r, detok);
  return 0;
}

struct RetrievalFlags {
  std::string backend;
  std::optional<std::size_t> top_n;
  std::string fixtures;
};

void apply(const RetrievalFlags& f, PipelineConfig& cfg) {
  if (!f.backend.empty()) cfg.retrieval.backend = f.backend;
  if (f.top_n) cfg.retrieval.top_n = *f.top_n;
  if (!f.fixtures.empty()) cfg.retrieval.fixtures = f.fixtures;
  cfg.validate();
}

int cmd_retrieve(const Common& common, const RetrievalFlags& flags, const std::string& query,
                 const std::string& rec_prompt, const std::string& record) {
  auto cfg = load_config(common);
  apply(flags, cfg);
  auto inner = make_client(cfg.retrieval.backend, cfg.retrieval.fixtures, cfg.retrieval.max_in_flight);
  RecordingClient recorder(*inner);
  const auto docs = search(query, recorder, cfg.retrieval.top_n);
  for (const auto& d : docs)
    std::cout << json{{"rank", d.rank}, {"title", d.title}, {"snippet", d.snippet}, {"url", d.url}}.dump() << "\n";
  if (!rec_prompt.empty()) std::cout << "\n" << assemble_prompt(rec_prompt, docs).rendered;
  if (!record.empty()) recorder.write(record);
  return 0;
}

int cmd_e2e(const Common& common, const RetrievalFlags& flags, const std::string& output, const std::string& record) {
  auto cfg = load_config(common);
  apply(flags, cfg);
  const auto corpus = make_rec_corpus(load_instances(cfg), vocab_extras(cfg), cfg.model.vocab_size);
  const auto backbone = pretrain(cfg, corpus, nullptr);
  auto inner = make_client(cfg.retrieval.backend, cfg.retrieval.fixtures, cfg.retrieval.max_in_flight);
  RecordingClient recorder(*inner);
  const auto res = run_rec(backbone, corpus, run_config(cfg, cfg.model), &recorder);
  auto rep = report_json(res);
  rep["config"] = to_json(cfg);
  // Paths depend on where the run happens, not on what it computes.
  rep["config"].erase("paths");
  rep["config"]["retrieval"].erase("fixtures");
  char sum[17];
  std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(backbone.params().checksum()));
  rep["backbone_checksum"] = sum;
  const auto path = output.empty() ? (fs::path(cfg.paths.report_dir) / "e2e_report.json").string() : output;
  write_file(path, dump(rep));
  if (!record.empty()) recorder.write(record);
  print_metrics(res);
  std::cout << "report " << path << "\n";
  return 0;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_sweep(const Common& common, const std::string& axes, const std::string& out_dir) {
  const auto cfg = load_config(common);
  const auto corpus = make_rec_corpus(load_instances(cfg), vocab_extras(cfg), cfg.model.vocab_size);
  const auto backbone = pretrain(cfg, corpus, nullptr);
  auto client = make_client(cfg.retrieval.backend, cfg.retrieval.fixtures, cfg.retrieval.max_in_flight);
  SweepOptions so;
  so.axes = axes.empty() ? sweep_axes() : split_list(axes);
  so.base = run_config(cfg, cfg.model);
  if (so.base.model.mp_head_layers.empty()) so.base.model.mp_head_layers = {0};
  const auto rows = ablation_sweep(backbone, corpus, so, client.get());
  const fs::path dir = out_dir.empty() ? fs::path(cfg.paths.report_dir) : fs::path(out_dir);
  write_file(dir / "sweep.csv", sweep_csv(rows));
  write_file(dir / "sweep_series.json", dump(sweep_series(rows)));
  write_file(dir / "sweep_timings.csv", sweep_timings_csv(rows));
  std::cout << sweep_csv(rows);
  return 0;
}

int cmd_needle(const NeedleConfig& nc, std::size_t n_seeds, const std::string& out) {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 1; s <= n_seeds; ++s) seeds.push_back(s);
  const auto rep = needle_benchmark(nc, seeds);
  json runs = json::array();
  std::size_t wins = 0;
  for (const auto& r : rep.runs) {
    const bool win = r.mp_head.accuracy - r.baseline.accuracy >= 0.10 && r.mp_head.gate > 0.1;
    wins += win;
    std::cout << "seed " << r.seed << " baseline " << r.baseline.accuracy << " mp-head " << r.mp_head.accuracy
              << " |g| " << r.mp_head.gate << (win ? "  win" : "") << "\n";
    runs.push_back({{"seed", r.seed},
                    {"baseline_accuracy", r.baseline.accuracy},
                    {"mp_head_accuracy", r.mp_head.accuracy},
                    {"gate", r.mp_head.gate},
                    {"baseline_loss", r.baseline.loss_curve},
                    {"mp_head_loss", r.mp_head.loss_curve}});
  }
  std::cout << "mp-head ahead by >= 10 points with |g| > 0.1 on " << wins << "/" << rep.runs.size() << " seeds\n";
  if (!out.empty()) {
    write_file(out, dump(json{{"pretrain_accuracy", rep.pretrain.final_accuracy},
                              {"steps", nc.steps},
                              {"batch_size", nc.batch_size},
                              {"learning_rate", nc.learning_rate},
                              {"runs", runs}}));
  }
  return 0;
}

int cmd_selfcheck() {
  bool ok = true;
  for (const auto& r : run_selfcheck()) {
    ok = ok && r.passed;
    std::printf("%s %s (%.2fs): %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
  }
  if (!ok) throw InvariantError("selfcheck failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("webrec"));

  CLI::App app{"webrec: web-augmented recommendation with an MP-Head at toy scale"};
  app.require_subcommand(1);
  Common common;
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "pipeline config file (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "overrides the config seed");
  };
  RetrievalFlags rflags;
  auto add_retrieval = [&](CLI::App* sub) {
    sub->add_option("--search-backend", rflags.backend, "replay, local, tavily-like or brave-like");
    sub->add_option("--top-n", rflags.top_n, "documents per query (default 10)");
    sub->add_option("--fixtures", rflags.fixtures, "replay or local corpus file");
  };

  std::string input, output, record, query, rec_prompt, prompt, axes;
  std::uint64_t ingest_seed = 7;
  std::size_t min_core = 5, synthetic_users = 0;
  std::optional<std::size_t> instance;

  auto* ingest_cmd = app.add_subcommand("ingest", "filter interactions and build instance files");
  ingest_cmd->add_option("--input", input, "interaction JSONL");
  ingest_cmd->add_option("--output", output, "instance JSONL")->required();
  ingest_cmd->add_option("--seed", ingest_seed, "negative-sampling seed");
  ingest_cmd->add_option("--min-core", min_core, "five-core threshold");
  ingest_cmd->add_option("--synthetic-users", synthetic_users, "generate a synthetic catalog instead of --input");

  auto* train_cmd = app.add_subcommand("train", "pretrain the backbone, train the MP-Head, save a checkpoint");
  add_common(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "rank the test split with a saved checkpoint");
  add_common(eval_cmd);

  auto* score_cmd = app.add_subcommand("score-query", "decode a prompt and print the per-token query scores");
  add_common(score_cmd);
  score_cmd->add_option("--prompt", prompt, "prompt text");
  score_cmd->add_option("--instance", instance, "index into the test split");

  auto* retrieve_cmd = app.add_subcommand("retrieve", "search one query and optionally assemble a prompt");
  add_common(retrieve_cmd);
  add_retrieval(retrieve_cmd);
  retrieve_cmd->add_option("--query", query, "search query")->required();
  retrieve_cmd->add_option("--rec-prompt", rec_prompt, "recommendation prompt to augment");
  retrieve_cmd->add_option("--record", record, "save results as a replay fixture");

  auto* e2e_cmd = app.add_subcommand("e2e", "generate, score, retrieve, assemble and rank end to end");
  add_common(e2e_cmd);
  add_retrieval(e2e_cmd);
  e2e_cmd->add_option("--output", output, "report path (default <report_dir>/e2e_report.json)");
  e2e_cmd->add_option("--record", record, "save every search as a replay fixture");

  auto* sweep_cmd = app.add_subcommand("sweep", "ablation sweep over hops, layers, retrieval and top-N/K");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--axes", axes, "comma list from hops, baseline, layer, relation_top_k, strategy, top_n, top_k_rec");
  sweep_cmd->add_option("--output-dir", output, "report directory (default report_dir)");

  NeedleConfig nc;
  std::size_t needle_seeds = 5;
  std::string needle_mode = "distant";
  auto* needle_cmd = app.add_subcommand("needle", "long-distance benchmark: baseline vs MP-Head");
  needle_cmd->add_option("--seeds", needle_seeds, "number of seeds");
  needle_cmd->add_option("--steps", nc.steps, "optimizer steps per arm");
  needle_cmd->add_option("--batch", nc.batch_size, "batch size");
  needle_cmd->add_option("--lr", nc.learning_rate, "learning rate");
  needle_cmd->add_option("--pretrain-steps", nc.pretrain_steps, "backbone pretraining steps");
  needle_cmd->add_option("--mode", needle_mode, "distant, adjacent or noise")
      ->check(CLI::IsMember({"distant", "adjacent", "noise"}));
  needle_cmd->add_option("--output", output, "JSON report path");

  app.add_subcommand("selfcheck", "gate-zero, gradient and pruning checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "webrec: E_CONFIG: " << e.what() << "\n";
    return static_cast<int>(ErrorCode::kConfig);
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "ingest") return cmd_ingest(input, output, ingest_seed, min_core, synthetic_users);
    if (name == "train") return cmd_train(common);
    if (name == "eval") return cmd_eval(common);
    if (name == "score-query") return cmd_score_query(common, prompt, instance);
    if (name == "retrieve") return cmd_retrieve(common, rflags, query, rec_prompt, record);
    if (name == "e2e") return cmd_e2e(common, rflags, output, record);
    if (name == "sweep") return cmd_sweep(common, axes, output);
    if (name == "needle") {
      nc.mode = needle_mode == "adjacent" ? NeedleMode::kAdjacent
                : needle_mode == "noise"  ? NeedleMode::kNoise
                                          : NeedleMode::kDistant;
      return cmd_needle(nc, needle_seeds, output);
    }
    if (name == "selfcheck") return cmd_selfcheck();
  } catch (const Error& e) {
    std::cerr << "webrec: " << e.tag() << ": " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "webrec: E_INVARIANT: " << e.what() << "\n";
    return static_cast<int>(ErrorCode::kInvariant);
  }
  return 0;
}
