#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "webrec/checkpoint.hpp"
#include "webrec/config.hpp"
#include "webrec/error.hpp"

using namespace webrec;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 40;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_seq_len = 32;
  c.mp_head_layers = {1};
  c.mp_hops = 2;
  return c;
}

std::string temp_path(const std::string& name) { return (fs::temp_directory_path() / name).string(); }

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(double)) == 0;
}

std::string expect_config_error(const std::string& text) {
  try {
    parse_pipeline_config(nlohmann::json::parse(text), ".");
  } catch (const ConfigError& e) {
    return e.what();
  }
  FAIL("expected a ConfigError for " << text);
  return "";
}

}  // namespace

TEST_CASE("checkpoint round-trip is bit-identical") {
  const auto cfg = small_config();
  const auto model = Transformer::init(cfg, 5);
  Rng rng(9);
  auto mp = MPHeadParams::init(cfg, rng);
  mp.set_gate(0.37);
  auto adapter = TaskAdapter::init(cfg);
  adapter.logit_bias.mutable_value()(0, 3) = -1.25;

  const auto path = temp_path("webrec_ckpt_test.bin");
  save_checkpoint(path, model, &mp, &adapter);
  const auto ck = load_checkpoint(path);

  CHECK(ck.config.mp_hops == 2);
  CHECK(ck.config.mp_head_layers == std::vector<std::size_t>{1});
  CHECK(ck.backbone.checksum() == model.params().checksum());
  REQUIRE(ck.mp.has_value());
  const auto a = mp.all(), b = ck.mp->all();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_equal(a[i].value(), b[i].value()));
  REQUIRE(ck.adapter.has_value());
  CHECK(bit_equal(ck.adapter->logit_bias.value(), adapter.logit_bias.value()));

  const std::vector<TokenId> tokens{2, 7, 11, 5, 19, 3};
  const auto reloaded = ck.transformer();
  CHECK(bit_equal(model.logits(tokens, &mp), reloaded.logits(tokens, &*ck.mp)));
  CHECK(bit_equal(model.logits(tokens), reloaded.logits(tokens)));

  // Saving the reloaded model reproduces the file byte for byte.
  const auto again = temp_path("webrec_ckpt_test2.bin");
  save_checkpoint(again, reloaded, &*ck.mp, &*ck.adapter);
  std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  CHECK(s1.rfind("WRCKPT01", 0) == 0);
  fs::remove(path);
  fs::remove(again);
}

TEST_CASE("baseline checkpoint loads without an MP-Head") {
  const auto model = Transformer::init(small_config(), 1);
  const auto path = temp_path("webrec_ckpt_base.bin");
  save_checkpoint(path, model);
  const auto ck = load_checkpoint(path);
  CHECK_FALSE(ck.mp.has_value());
  CHECK_FALSE(ck.adapter.has_value());
  CHECK(ck.backbone.checksum() == model.params().checksum());
  fs::remove(path);
}

TEST_CASE("damaged checkpoints are rejected") {
  const auto model = Transformer::init(small_config(), 1);
  const auto path = temp_path("webrec_ckpt_bad.bin");
  save_checkpoint(path, model);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& s) {
    std::ofstream out(path, std::ios::binary);
    out << s;
  };
  write(bytes.substr(0, bytes.size() - 9));
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  write("XXCKPT01" + bytes.substr(8));
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  write(bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("webrec_no_such_ckpt.bin")), DataError);
  fs::remove(path);
}

TEST_CASE("empty config gives the defaults") {
  const auto c = parse_pipeline_config(nlohmann::json::object(), ".");
  CHECK(c.model.d_model == 64);
  CHECK(c.train.epochs == 5);
  CHECK(c.train.batch_size == 8);
  CHECK(c.retrieval.backend == "replay");
  CHECK(c.retrieval.top_n == 10);
  CHECK(c.scoring.window == 3);
}

TEST_CASE("config values are read") {
  const auto c = parse_pipeline_config(nlohmann::json::parse(R"({
    "seed": 42,
    "model": {"d_model": 32, "n_heads": 2, "mp_head_layers": [0, 2], "mp_hops": 3},
    "train": {"learning_rate": 0.01, "freeze_gate": true},
    "retrieval": {"top_n": 5},
    "scoring": {"k_q": 2},
    "paths": {"report_dir": "out"}
  })"), ".");
  CHECK(c.seed == 42);
  CHECK(c.train.seed == 42);
  CHECK(c.model.d_model == 32);
  CHECK(c.model.mp_head_layers == std::vector<std::size_t>{0, 2});
  CHECK(c.train.learning_rate == 0.01);
  CHECK(c.train.freeze_gate);
  CHECK(c.retrieval.top_n == 5);
  CHECK(c.scoring.k_q == 2);
  CHECK(c.paths.report_dir == "out");
}

TEST_CASE("unknown keys are fatal and named") {
  CHECK(expect_config_error(R"({"sede": 1})").find("config.sede") != std::string::npos);
  CHECK(expect_config_error(R"({"model": {"d_modle": 8}})").find("model.d_modle") != std::string::npos);
  CHECK(expect_config_error(R"({"train": {"lr": 0.1}})").find("train.lr") != std::string::npos);
  CHECK(expect_config_error(R"({"paths": {"data": "x"}})").find("paths.data") != std::string::npos);
}

TEST_CASE("bad values are config errors") {
  CHECK(expect_config_error(R"({"model": {"d_model": "big"}})").find("model.d_model") != std::string::npos);
  CHECK(expect_config_error(R"({"model": {"d_model": -4}})").find("model.d_model") != std::string::npos);
  expect_config_error(R"({"model": {"d_model": 30, "n_heads": 4}})");
  expect_config_error(R"({"model": {"mp_head_layers": [9]}})");
  expect_config_error(R"({"train": {"learning_rate": 0}})");
  expect_config_error(R"({"retrieval": {"backend": "bing"}})");
  expect_config_error(R"({"retrieval": {"fixtures": "missing.jsonl"}})");
  expect_config_error(R"({"paths": {"dataset": "missing.jsonl"}})");
  expect_config_error(R"([1, 2])");
}

TEST_CASE("config files resolve paths next to the file") {
  const auto dir = fs::temp_directory_path() / "webrec_cfg_test";
  fs::create_directories(dir);
  {
    std::ofstream(dir / "fx.jsonl") << "";
    std::ofstream(dir / "cfg.json") << R"({"retrieval": {"fixtures": "fx.jsonl"}})";
    std::ofstream(dir / "broken.json") << "{";
  }
  const auto c = load_pipeline_config((dir / "cfg.json").string());
  CHECK(c.retrieval.fixtures == (dir / "fx.jsonl").lexically_normal().string());
  CHECK_THROWS_AS(load_pipeline_config((dir / "broken.json").string()), ConfigError);
  CHECK_THROWS_AS(load_pipeline_config((dir / "absent.json").string()), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("config survives a JSON round trip") {
  auto c = parse_pipeline_config(nlohmann::json::parse(R"({"model": {"mp_hops": 2}})"), ".");
  const auto j = to_json(c);
  const auto back = parse_pipeline_config(j, ".");
  CHECK(to_json(back) == j);
}
