#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "webrec/error.hpp"
#include "webrec/pipeline.hpp"

using namespace webrec;
namespace fs = std::filesystem;

namespace {

std::string temp_file(const std::string& name, const std::string& body) {
  const auto p = (fs::temp_directory_path() / name).string();
  std::ofstream(p, std::ios::binary) << body;
  return p;
}

// A small catalog and backbone shared by the pipeline cases. Built once;
// pretraining is short because only shapes and determinism are asserted.
struct Toy {
  RecCorpus corpus;
  Transformer backbone;
  LocalIndexClient search;
};

ModelConfig toy_model() {
  ModelConfig m;
  m.vocab_size = 400;
  m.d_model = 16;
  m.n_heads = 2;
  m.n_layers = 2;
  m.max_seq_len = 320;
  m.mp_head_layers = {1};
  return m;
}

const Toy& toy() {
  static const Toy t = [] {
    SyntheticCatalogConfig sc;
    sc.n_users = 30;
    sc.n_items = 40;
    const auto inst = build_instances(five_core_filter(synthetic_interactions(sc)), 3);
    auto corpus = make_rec_corpus(inst, corpus_texts("fixtures/corpus.jsonl"), 400);
    auto m = toy_model();
    m.mp_head_layers.clear();
    PretrainOptions po;
    po.steps = 4;
    po.batch = 2;
    auto backbone = pretrain_rec_backbone(m, corpus, po);
    return Toy{std::move(corpus), std::move(backbone), LocalIndexClient::load("fixtures/corpus.jsonl")};
  }();
  return t;
}

RecRunConfig toy_run() {
  RecRunConfig rc;
  rc.model = toy_model();
  rc.train.epochs = 1;
  rc.train.batch_size = 4;
  rc.train.learning_rate = 3e-3;
  rc.train.require_grad_check = false;
  rc.plan.max_new_tokens = 6;
  rc.plan.top_n = 3;
  rc.max_train_instances = 8;
  rc.max_eval_instances = 6;
  return rc;
}

}  // namespace

TEST_CASE("vocab splits words and punctuation and orders by frequency") {
  CHECK(Vocab::split("Rich Cream, SPF-50!") ==
        std::vector<std::string>{"rich", "cream", ",", "spf", "-", "50", "!"});
  CHECK(Vocab::split("Minéral 89") == std::vector<std::string>{"minéral", "89"});

  const auto v = Vocab::build({"b a b", "c a b", "d"}, 7);
  // b x3, a x2, then c and d tie at 1 and the cap leaves room for one.
  CHECK(v.words() == std::vector<std::string>{"<pad>", "<unk>", "<bos>", "<eos>", "b", "a", "c"});
  CHECK(v.encode("B a zzz") == std::vector<TokenId>{4, 5, Vocab::kUnk});
  CHECK(v.decode({4, 6}) == "b c");
  CHECK_THROWS_AS(v.word(99), ShapeError);
  CHECK_THROWS_AS(Vocab::build({"x"}, 3), ConfigError);
  CHECK_THROWS_AS(Vocab::from_words({"x", "x"}), ConfigError);
}

TEST_CASE("vocab files round-trip") {
  const auto v = Vocab::from_words({"rich", "cream", "é"});
  const auto path = (fs::temp_directory_path() / "webrec_vocab_test.txt").string();
  save_vocab(path, v);
  CHECK(load_vocab(path).words() == v.words());
  temp_file("webrec_vocab_bad.txt", "rich\ncream\n");
  CHECK_THROWS_AS(load_vocab((fs::temp_directory_path() / "webrec_vocab_bad.txt").string()), DataError);
}

TEST_CASE("local index ranks by summed inverse document frequency") {
  const auto path = temp_file("webrec_local.jsonl",
                              R"({"title": "Rich cream", "snippet": "a rich night cream", "url": "u1"}
{"title": "Light lotion", "snippet": "daily lotion", "url": "u2"}
{"title": "Cream cleanser", "snippet": "foaming", "url": "u3"}
{"title": "Night mask", "snippet": "rich mask", "url": "u4"}
)");
  auto c = LocalIndexClient::load(path);
  // N = 4; df(rich) = 2, df(cream) = 2, df(night) = 2.
  // doc1 has all three words, doc3 has cream, doc4 has rich and night.
  const auto docs = c.search("Rich NIGHT cream", 10);
  REQUIRE(docs.size() == 3);
  CHECK(docs[0].url == "u1");
  CHECK(docs[1].url == "u4");
  CHECK(docs[2].url == "u3");
  CHECK(docs[2].rank == 3);
  CHECK(c.search("lotion", 10).front().url == "u2");
  CHECK(c.search("sunscreen", 10).empty());
  CHECK(c.search("rich cream night", 1).size() == 1);

  // Equal scores keep file order.
  const auto tie = c.search("cream", 10);
  REQUIRE(tie.size() == 2);
  CHECK(tie[0].url == "u1");
  CHECK(tie[1].url == "u3");
}

TEST_CASE("recorded searches replay identically") {
  auto local = LocalIndexClient::load("fixtures/corpus.jsonl");
  RecordingClient rec(local);
  const auto a = search("rich moisturiser", rec, 5);
  const auto b = search("gentle shampoo", rec, 3);
  search("gentle shampoo", rec, 2);
  CHECK(rec.query_count() == 2);
  const auto path = (fs::temp_directory_path() / "webrec_recorded.jsonl").string();
  rec.write(path);
  auto replay = ReplayClient::load(path);
  CHECK(search("rich moisturiser", replay, 5) == a);
  CHECK(search("gentle shampoo", replay, 3) == b);
  CHECK(search("  gentle shampoo ", replay, 10) == b);
}

TEST_CASE("strategy names round-trip") {
  std::set<std::string> names;
  for (auto s : all_strategies()) {
    CHECK(parse_strategy(strategy_name(s)) == s);
    names.insert(strategy_name(s));
  }
  CHECK(names.size() == 4);
  CHECK_THROWS_AS(parse_strategy("bing"), ConfigError);
}

TEST_CASE("template query dumps recent history words") {
  RecInstance inst;
  inst.history = {kPadTitle, kPadTitle, "Olay Rich Cream", "The Rich Night Mask 12"};
  CHECK(template_query(inst) == "rich night mask olay cream");
  inst.history = {kPadTitle};
  CHECK(template_query(inst).empty());
}

TEST_CASE("prepared prompts respect the strategy and the context window") {
  const auto& t = toy();
  auto search = t.search;
  const auto& inst = t.corpus.test.front();
  PromptPlan plan;
  plan.max_new_tokens = 6;

  plan.strategy = Strategy::kNone;
  const auto none = prepare_prompt(t.backbone, t.corpus.vocab, inst, plan, &search);
  CHECK(none.query.empty());
  CHECK(none.docs_used == 0);
  CHECK(none.rendered == assemble_prompt(render_rec_prompt(inst), {}).rendered);
  CHECK(none.candidates.size() == kCandidateCount);
  CHECK(none.target_index == inst.target_index);
  CHECK(t.corpus.vocab.decode(none.candidates[none.target_index]) ==
        t.corpus.vocab.decode(t.corpus.vocab.encode(inst.target)));

  plan.strategy = Strategy::kTemplateQuery;
  plan.top_n = 20;
  const auto tq = prepare_prompt(t.backbone, t.corpus.vocab, inst, plan, &search);
  CHECK(tq.query == template_query(inst));
  CHECK(tq.docs_retrieved > 0);
  CHECK(tq.docs_used <= tq.docs_retrieved);
  std::size_t longest = 0;
  for (const auto& c : tq.candidates) longest = std::max(longest, c.size());
  CHECK(tq.tokens.size() + longest <= t.backbone.config().max_seq_len);
  CHECK(tq.tokens.front() == Vocab::kBos);

  plan.strategy = Strategy::kWebRec;
  const auto wr = prepare_prompt(t.backbone, t.corpus.vocab, inst, plan, &search);
  const auto again = prepare_prompt(t.backbone, t.corpus.vocab, inst, plan, &search);
  CHECK(wr.query == again.query);
  CHECK(wr.tokens == again.tokens);

  // Without a client nothing is retrieved.
  const auto offline = prepare_prompt(t.backbone, t.corpus.vocab, inst, plan, nullptr);
  CHECK(offline.docs_used == 0);
}

TEST_CASE("training examples supervise exactly the target title") {
  const auto& t = toy();
  PromptPlan plan;
  plan.strategy = Strategy::kNone;
  const auto p = prepare_prompt(t.backbone, t.corpus.vocab, t.corpus.train.front(), plan, nullptr);
  const auto ex = make_rec_example(t.backbone, p, 1);
  const auto& title = p.candidates[p.target_index];
  REQUIRE(ex.labels.size() == title.size());
  for (std::size_t i = 0; i < title.size(); ++i) {
    CHECK(ex.labels[i] == title[i]);
    CHECK(ex.tokens[ex.rows[i] + 1] == title[i]);
  }
  CHECK(ex.rows.front() == p.tokens.size() - 1);
  REQUIRE(ex.hidden.has_value());
  CHECK(ex.hidden->rows() == ex.tokens.size());
  CHECK(ex.first_layer == 1);
}

TEST_CASE("single-axis sweeps enumerate their rows") {
  const auto& t = toy();
  SweepOptions so;
  so.base = toy_run();
  so.axes = {"hops"};
  const auto hops = ablation_sweep(t.backbone, t.corpus, so, nullptr);
  REQUIRE(hops.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(hops[i].axis == "hops");
    CHECK(hops[i].value == std::to_string(i + 1));
    CHECK(hops[i].report.n_instances == 6);
  }

  so.axes = {"baseline", "layer"};
  const auto rows = ablation_sweep(t.backbone, t.corpus, so, nullptr);
  REQUIRE(rows.size() == 1 + t.backbone.config().n_layers);
  CHECK(rows[0].label == "no MP-Head");
  CHECK(rows[0].final_gate == 0.0);
  CHECK(rows[1].label == "MP-Head at layer 0");
  CHECK(rows[2].label == "MP-Head at layer 1");

  so.axes = {"depth"};
  CHECK_THROWS_AS(ablation_sweep(t.backbone, t.corpus, so, nullptr), ConfigError);
}

TEST_CASE("retrieval and top-N/top-K axes are labeled and deterministic") {
  const auto& t = toy();
  auto search = t.search;
  SweepOptions so;
  so.base = toy_run();
  so.axes = {"strategy", "top_n", "top_k_rec"};
  const auto rows = ablation_sweep(t.backbone, t.corpus, so, &search);
  REQUIRE(rows.size() == 4 + 5 + 5);
  std::set<std::string> labels;
  for (std::size_t i = 0; i < 4; ++i) labels.insert(rows[i].label);
  CHECK(labels.size() == 4);
  CHECK(rows[0].mean_docs == 0.0);
  const std::vector<std::string> n{"1", "5", "10", "15", "20"};
  const std::vector<std::size_t> k{1, 3, 5, 10, 20};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(rows[4 + i].axis == "top_n");
    CHECK(rows[4 + i].value == n[i]);
    CHECK(rows[9 + i].axis == "top_k_rec");
    CHECK(rows[9 + i].metric_k == k[i]);
    CHECK(rows[9 + i].hr == rows[9 + i].report.hr_at.at(k[i]));
  }
  CHECK(rows[4].mean_docs <= 1.0);
  CHECK(rows[13].hr == 1.0);  // HR@20 over 20 candidates

  const auto again = ablation_sweep(t.backbone, t.corpus, so, &search);
  CHECK(sweep_csv(rows) == sweep_csv(again));
  CHECK(sweep_series(rows) == sweep_series(again));
  CHECK(sweep_series(rows)["series"]["top_n"]["x"].size() == 5);
  const auto csv = sweep_csv(rows);
  CHECK(csv.rfind("axis,value,label,metric_k,hr,ndcg,hr@1,hr@3,hr@5,hr@10,hr@20,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 15);
}

TEST_CASE("trained pieces evaluate the same as the training run") {
  const auto& t = toy();
  auto rc = toy_run();
  const auto res = run_rec(t.backbone, t.corpus, rc, nullptr);
  REQUIRE(res.mp.has_value());
  const auto again = evaluate_rec(t.backbone, t.corpus.vocab, t.corpus.test, rc, &*res.mp, res.adapter, nullptr);
  CHECK(again.report.hr_at == res.report.hr_at);
  CHECK(again.report.ndcg_at == res.report.ndcg_at);
  for (std::size_t i = 0; i < res.outcomes.size(); ++i) CHECK(again.outcomes[i].target_rank == res.outcomes[i].target_rank);
  CHECK(t.backbone.params().checksum() == toy().backbone.params().checksum());
}
