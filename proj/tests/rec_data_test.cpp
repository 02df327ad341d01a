#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "webrec/error.hpp"
#include "webrec/numeric.hpp"
#include "webrec/rec_data.hpp"

using namespace webrec;

namespace {

std::string line(const std::string& u, const std::string& i, double r, long long ts,
                 const std::string& title) {
  std::ostringstream s;
  s << R"({"user_id":")" << u << R"(","item_id":")" << i << R"(","rating":)" << r
    << R"(,"timestamp":)" << ts << R"(,"item_title":")" << title << R"("})";
  return s.str();
}

Interaction ix(const std::string& u, const std::string& i, std::int64_t ts = 1) {
  return {u, i, 5.0, ts, "title " + i};
}

// Removes one offending user or item at a time, rescanning from scratch after
// every removal. Slow but obviously correct.
std::set<std::pair<std::string, std::string>> brute_core(const std::vector<Interaction>& in,
                                                        std::size_t k) {
  std::set<std::pair<std::string, std::string>> edges;
  for (const auto& it : in) edges.insert({it.user_id, it.item_id});
  for (;;) {
    std::map<std::string, std::size_t> du, di;
    for (const auto& [u, i] : edges) {
      ++du[u];
      ++di[i];
    }
    std::string bad_user, bad_item;
    for (const auto& [u, c] : du)
      if (c < k) {
        bad_user = u;
        break;
      }
    if (bad_user.empty()) {
      for (const auto& [i, c] : di)
        if (c < k) {
          bad_item = i;
          break;
        }
    }
    if (bad_user.empty() && bad_item.empty()) return edges;
    std::erase_if(edges, [&](const auto& e) { return e.first == bad_user || e.second == bad_item; });
  }
}

std::vector<Interaction> random_graph(Rng& rng, std::size_t users, std::size_t items, double p) {
  std::vector<Interaction> out;
  for (std::size_t u = 0; u < users; ++u)
    for (std::size_t i = 0; i < items; ++i)
      if (rng.uniform() < p) out.push_back(ix("u" + std::to_string(u), "i" + std::to_string(i)));
  return out;
}

std::vector<Interaction> catalog_for(const std::string& user, std::size_t n_user_items,
                                     std::size_t catalog) {
  std::vector<Interaction> out;
  for (std::size_t i = 0; i < n_user_items; ++i)
    out.push_back({user, "i" + std::to_string(i), 4.0, static_cast<std::int64_t>(100 + i),
                   "Item " + std::to_string(i)});
  // One-purchase users make the rest of the catalog exist.
  for (std::size_t i = n_user_items; i < catalog; ++i)
    out.push_back({"o" + std::to_string(i), "i" + std::to_string(i), 4.0, static_cast<std::int64_t>(100 + i),
                   "Item " + std::to_string(i)});
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("ingest of an empty file") {
  IngestReport rep;
  CHECK(ingest_text("", &rep).empty());
  CHECK(rep.lines == 0);
  CHECK(rep.malformed == 0);
}

TEST_CASE("ingest sorts each user's interactions by time") {
  const std::string text = line("u1", "b", 4, 300, "B") + "\n" + line("u1", "a", 5, 100, "A") +
                           "\n" + line("u1", "c", 3, 200, "C") + "\n";
  IngestReport rep;
  const auto out = ingest_text(text, &rep);
  REQUIRE(out.size() == 3);
  CHECK(out[0].item_id == "a");
  CHECK(out[1].item_id == "c");
  CHECK(out[2].item_id == "b");
  CHECK(out[2].item_title == "B");
  CHECK(rep.parsed == 3);
}

TEST_CASE("malformed lines are counted and skipped up to 10%") {
  std::string text;
  for (int i = 0; i < 19; ++i) text += line("u", "i" + std::to_string(i), 5, 10 + i, "T") + "\n";
  text += R"({"user_id":"u","item_id":"x","rating":9,"timestamp":5,"item_title":"T"})" "\n";
  IngestReport rep;
  CHECK(ingest_text(text, &rep).size() == 19);
  CHECK(rep.malformed == 1);
  CHECK(rep.malformed_lines == std::vector<std::size_t>{20});

  std::string bad = line("u", "a", 5, 1, "T") + "\n" + "not json\n" +
                    R"({"user_id":"u","item_id":"b","rating":3,"timestamp":0,"item_title":"T"})" "\n";
  CHECK_THROWS_AS(ingest_text(bad), DataError);
  CHECK_THROWS_AS(ingest("/nonexistent/interactions.jsonl"), DataError);
}

TEST_CASE("field validation") {
  const char* bad[] = {
      R"({"user_id":"","item_id":"a","rating":3,"timestamp":1,"item_title":"T"})",
      R"({"user_id":"u","item_id":"a","rating":0.5,"timestamp":1,"item_title":"T"})",
      R"({"user_id":"u","item_id":"a","rating":3,"timestamp":1.5,"item_title":"T"})",
      R"({"user_id":"u","item_id":"a","rating":3,"timestamp":-4,"item_title":"T"})",
      R"({"user_id":"u","item_id":"a","rating":"3","timestamp":1,"item_title":"T"})",
      R"({"user_id":"u","item_id":"a","rating":3,"timestamp":1})",
      R"([1,2,3])",
  };
  for (const char* b : bad) {
    IngestReport rep;
    std::string text = b + std::string("\n");
    for (int i = 0; i < 20; ++i) text += line("v", "i" + std::to_string(i), 2, 1 + i, "T") + "\n";
    ingest_text(text, &rep);
    CHECK_MESSAGE(rep.malformed == 1, b);
  }
}

TEST_CASE("five-core filter keeps a complete core unchanged") {
  std::vector<Interaction> in;
  for (int u = 0; u < 5; ++u)
    for (int i = 0; i < 5; ++i) in.push_back(ix("u" + std::to_string(u), "i" + std::to_string(i)));
  CHECK(five_core_filter(in) == in);
}

TEST_CASE("five-core filter drops a sparse user") {
  CHECK(five_core_filter({ix("u", "a"), ix("u", "b"), ix("u", "c")}).empty());
}

TEST_CASE("five-core filter cascades") {
  // A 5x5 core, plus user x with 5 items where item "z" has exactly 5
  // buyers including x. Dropping w (4 items) drops z below 5, which then
  // drops x below 5.
  std::vector<Interaction> in;
  for (int u = 0; u < 5; ++u)
    for (int i = 0; i < 5; ++i) in.push_back(ix("u" + std::to_string(u), "i" + std::to_string(i)));
  for (int u = 0; u < 3; ++u) in.push_back(ix("u" + std::to_string(u), "z"));
  in.push_back(ix("w", "z"));
  for (int i = 0; i < 3; ++i) in.push_back(ix("w", "i" + std::to_string(i)));
  in.push_back(ix("x", "z"));
  for (int i = 0; i < 4; ++i) in.push_back(ix("x", "i" + std::to_string(i)));

  const auto out = five_core_filter(in);
  std::set<std::string> users, items;
  for (const auto& it : out) {
    users.insert(it.user_id);
    items.insert(it.item_id);
  }
  CHECK(users == std::set<std::string>{"u0", "u1", "u2", "u3", "u4"});
  CHECK(items == std::set<std::string>{"i0", "i1", "i2", "i3", "i4"});
  CHECK(out.size() == 25);
}

TEST_CASE("five-core filter matches the brute-force fixpoint on random graphs") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = random_graph(rng, 8 + rng.below(10), 8 + rng.below(10), 0.3 + 0.4 * rng.uniform());
    const auto out = five_core_filter(in);
    std::set<std::pair<std::string, std::string>> got;
    for (const auto& it : out) got.insert({it.user_id, it.item_id});
    CHECK(got == brute_core(in, 5));
    CHECK(five_core_filter(out) == out);
  }
}

TEST_CASE("short histories are left-padded") {
  auto in = catalog_for("u", 4, 30);
  const auto all = build_instances(in, 1);
  std::vector<RecInstance> mine;
  for (const auto& r : all)
    if (r.user_id == "u") mine.push_back(r);
  REQUIRE(mine.size() == 3);
  const auto& last = mine.back();
  CHECK(last.target == "Item 3");
  REQUIRE(last.history.size() == kHistoryLength);
  for (std::size_t i = 0; i < 7; ++i) CHECK(last.history[i] == kPadTitle);
  CHECK(last.history[7] == "Item 0");
  CHECK(last.history[9] == "Item 2");
  CHECK(last.history_ids[6] == "");
}

TEST_CASE("long histories keep the ten most recent items") {
  auto in = catalog_for("u", 14, 40);
  const auto all = build_instances(in, 1);
  const auto& last = *std::find_if(all.rbegin(), all.rend(), [](const auto& r) { return r.user_id == "u"; });
  CHECK(last.target == "Item 13");
  CHECK(last.history.front() == "Item 3");
  CHECK(last.history.back() == "Item 12");
}

TEST_CASE("instances are deterministic for a fixed seed") {
  const auto in = five_core_filter(synthetic_interactions({}));
  CHECK(build_instances(in, 11) == build_instances(in, 11));
  const auto a = build_instances(in, 11);
  const auto b = build_instances(in, 12);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs |= a[i].candidate_ids != b[i].candidate_ids;
  CHECK(differs);
}

TEST_CASE("candidate sets hold one positive and only unseen negatives") {
  Rng rng(5);
  std::vector<Interaction> in;
  for (int u = 0; u < 100; ++u) {
    const auto n = 2 + rng.below(12);
    for (std::size_t k = 0; k < n; ++k) {
      in.push_back({"u" + std::to_string(u), "i" + std::to_string(rng.below(60)), 3.0,
                    static_cast<std::int64_t>(1 + k), ""});
    }
  }
  for (auto& it : in) it.item_title = "title of " + it.item_id;
  const auto inst = build_instances(in, 99);

  std::map<std::string, std::set<std::string>> seen;
  for (const auto& it : in) seen[it.user_id].insert(it.item_id);
  std::set<std::string> catalog;
  for (const auto& it : in) catalog.insert(it.item_id);

  for (const auto& r : inst) {
    REQUIRE(r.candidates.size() == kCandidateCount);
    CHECK(r.candidate_ids[r.target_index] == r.target_id);
    CHECK(std::count(r.candidate_ids.begin(), r.candidate_ids.end(), r.target_id) == 1);
    std::set<std::string> unseen;
    std::set_difference(catalog.begin(), catalog.end(), seen[r.user_id].begin(),
                        seen[r.user_id].end(), std::inserter(unseen, unseen.end()));
    std::set<std::string> negatives;
    for (std::size_t k = 0; k < kCandidateCount; ++k)
      if (k != r.target_index) {
        CHECK(unseen.count(r.candidate_ids[k]) == 1);
        negatives.insert(r.candidate_ids[k]);
      }
    CHECK(negatives.size() == kCandidateCount - 1);
  }
}

TEST_CASE("split is chronological per user with an 8:1:1 shape") {
  const auto in = five_core_filter(synthetic_interactions({}));
  const auto inst = build_instances(in, 3);
  std::map<std::string, std::vector<const RecInstance*>> by_user;
  for (const auto& r : inst) by_user[r.user_id].push_back(&r);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& [user, rs] : by_user) {
    std::int64_t last_train = 0, first_valid = INT64_MAX, last_valid = 0, first_test = INT64_MAX;
    for (const auto* r : rs) {
      ++counts[static_cast<int>(r->split)];
      switch (r->split) {
        case Split::kTrain: last_train = std::max(last_train, r->target_timestamp); break;
        case Split::kValid:
          first_valid = std::min(first_valid, r->target_timestamp);
          last_valid = std::max(last_valid, r->target_timestamp);
          break;
        case Split::kTest: first_test = std::min(first_test, r->target_timestamp); break;
      }
    }
    CHECK(last_train <= first_valid);
    CHECK(last_train <= first_test);
    CHECK(last_valid <= first_test);
  }
  CHECK(counts[0] > 4 * counts[2]);
  CHECK(counts[1] == counts[2]);

  SUBCASE("counts for a ten-instance user") {
    auto one = catalog_for("u", 11, 40);
    std::size_t c[3] = {0, 0, 0};
    for (const auto& r : build_instances(one, 1))
      if (r.user_id == "u") ++c[static_cast<int>(r.split)];
    CHECK(c[0] == 8);
    CHECK(c[1] == 1);
    CHECK(c[2] == 1);
  }
}

TEST_CASE("catalog too small for twenty candidates") {
  CHECK_THROWS_AS(build_instances(catalog_for("u", 5, 19), 1), DataError);
  CHECK_THROWS_AS(build_instances(catalog_for("u", 5, 23), 1), DataError);
  CHECK_NOTHROW(build_instances(catalog_for("u", 5, 24), 1));
}

TEST_CASE("quoted lists") {
  CHECK(quoted_list({}) == "");
  CHECK(quoted_list({"a"}) == "\"a\"");
  CHECK(quoted_list({"a", "b"}) == "\"a\", and \"b\"");
  CHECK(quoted_list({"a", "b", "c"}) == "\"a\", \"b\", and \"c\"");
}

TEST_CASE("two-item history prompt matches the golden file") {
  RecInstance r;
  r.history.assign(8, kPadTitle);
  r.history_ids.assign(8, "");
  r.history.push_back("Gentle Foaming Cleanser");
  r.history.push_back("Vitamin C Serum");
  r.history_ids.push_back("x1");
  r.history_ids.push_back("x2");
  for (int i = 1; i <= 20; ++i) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "c%02d", i);
    r.candidates.push_back(buf);
  }
  CHECK(render_rec_prompt(r) == slurp("tests/golden/rec_prompt_two_items.txt"));
}

TEST_CASE("prompt with four titles and twenty candidates") {
  auto in = catalog_for("u", 5, 40);
  const auto inst = build_instances(in, 8);
  const auto& r = *std::find_if(inst.rbegin(), inst.rend(), [](const auto& x) { return x.user_id == "u"; });
  const auto p = render_rec_prompt(r);
  CHECK(p.rfind("A user has bought \"Item 0\", \"Item 1\", \"Item 2\", and \"Item 3\" in the previous.", 0) == 0);
  CHECK(p.ends_with(". The recommendation is"));
  CHECK(std::count(p.begin(), p.end(), '"') == 2 * (4 + 20));
  // Candidates appear in stored order.
  std::size_t pos = 0;
  for (const auto& c : r.candidates) {
    const auto at = p.find("\"" + c + "\"", pos);
    REQUIRE(at != std::string::npos);
    pos = at + 1;
  }

  RecInstance empty = r;
  empty.history.assign(kHistoryLength, kPadTitle);
  empty.history_ids.assign(kHistoryLength, "");
  CHECK(render_rec_prompt(empty).rfind("A user has bought nothing in the previous.", 0) == 0);
}

TEST_CASE("instance files round-trip") {
  const auto in = five_core_filter(synthetic_interactions({}));
  const auto inst = build_instances(in, 3);
  const auto path = (std::filesystem::temp_directory_path() / "webrec_instances_test.jsonl").string();
  write_instances(path, inst);
  CHECK(read_instances(path) == inst);
  std::filesystem::remove(path);

  const auto ipath = (std::filesystem::temp_directory_path() / "webrec_interactions_test.jsonl").string();
  write_interactions(ipath, in);
  CHECK(ingest(ipath) == ingest_text(slurp(ipath)));
  CHECK(ingest(ipath).size() == in.size());
  std::filesystem::remove(ipath);
}

TEST_CASE("synthetic catalog survives five-core filtering") {
  const auto raw = synthetic_interactions({});
  const auto core = five_core_filter(raw);
  CHECK(core.size() > raw.size() / 2);
  std::set<std::string> items;
  for (const auto& it : core) items.insert(it.item_id);
  CHECK(items.size() >= kCandidateCount);
}
