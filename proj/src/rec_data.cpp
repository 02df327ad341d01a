#include "webrec/rec_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "webrec/error.hpp"
#include "webrec/numeric.hpp"

namespace webrec {

using nlohmann::json;

namespace {

bool parse_interaction(const std::string& line, Interaction& out) {
  json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (!j.is_object()) return false;
  auto str = [&](const char* key, std::string& dst) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) return false;
    dst = it->get<std::string>();
    return !dst.empty();
  };
  if (!str("user_id", out.user_id) || !str("item_id", out.item_id) ||
      !str("item_title", out.item_title)) {
    return false;
  }
  auto r = j.find("rating");
  if (r == j.end() || !r->is_number()) return false;
  out.rating = r->get<double>();
  if (!(out.rating >= 1.0 && out.rating <= 5.0)) return false;
  auto t = j.find("timestamp");
  if (t == j.end() || !t->is_number_integer()) return false;
  out.timestamp = t->get<std::int64_t>();
  return out.timestamp > 0;
}

std::uint64_t instance_seed(std::uint64_t seed, const std::string& user, std::size_t index) {
  return mix64(mix64(seed ^ fnv1a64(user)) + index);
}

json instance_json(const RecInstance& r) {
  return json{{"user_id", r.user_id},
              {"history", r.history},
              {"history_ids", r.history_ids},
              {"target", r.target},
              {"target_id", r.target_id},
              {"candidates", r.candidates},
              {"candidate_ids", r.candidate_ids},
              {"target_index", r.target_index},
              {"target_timestamp", r.target_timestamp},
              {"split", split_name(r.split)}};
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw DataError("instance file: unknown split '" + s + "'");
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

std::vector<Interaction> ingest_text(const std::string& text, IngestReport* report) {
  IngestReport rep;
  std::vector<Interaction> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++rep.lines;
    Interaction it;
    if (parse_interaction(line, it)) {
      out.push_back(std::move(it));
      ++rep.parsed;
    } else {
      ++rep.malformed;
      if (rep.malformed_lines.size() < 10) rep.malformed_lines.push_back(lineno);
    }
  }
  if (rep.malformed > 0) {
    spdlog::warn("ingest: skipped {} malformed line(s) of {}", rep.malformed, rep.lines);
  }
  if (report) *report = rep;
  if (rep.malformed * 10 > rep.lines) {
    throw DataError("ingest: " + std::to_string(rep.malformed) + " of " + std::to_string(rep.lines) +
                    " lines malformed (limit 10%), first at line " +
                    std::to_string(rep.malformed_lines.front()));
  }
  std::stable_sort(out.begin(), out.end(), [](const Interaction& a, const Interaction& b) {
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.timestamp < b.timestamp;
  });
  return out;
}

std::vector<Interaction> ingest(const std::string& path, IngestReport* report) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("ingest: cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ingest_text(ss.str(), report);
}

std::vector<Interaction> five_core_filter(const std::vector<Interaction>& in, std::size_t min_core) {
  std::vector<char> alive(in.size(), 1);
  for (bool changed = true; changed;) {
    changed = false;
    std::unordered_map<std::string, std::size_t> users, items;
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!alive[i]) continue;
      ++users[in[i].user_id];
      ++items[in[i].item_id];
    }
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (alive[i] && (users[in[i].user_id] < min_core || items[in[i].item_id] < min_core)) {
        alive[i] = 0;
        changed = true;
      }
    }
  }
  std::vector<Interaction> out;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (alive[i]) out.push_back(in[i]);
  return out;
}

std::vector<RecInstance> build_instances(const std::vector<Interaction>& interactions,
                                         std::uint64_t seed) {
  std::map<std::string, std::string> title_of;  // item id -> first title seen
  std::map<std::string, std::vector<const Interaction*>> by_user;
  for (const auto& it : interactions) {
    title_of.emplace(it.item_id, it.item_title);
    by_user[it.user_id].push_back(&it);
  }
  if (title_of.size() < kCandidateCount) {
    throw DataError("build_instances: catalog has " + std::to_string(title_of.size()) +
                    " items, need at least " + std::to_string(kCandidateCount));
  }
  std::vector<std::string> catalog;
  for (const auto& [id, title] : title_of) catalog.push_back(id);

  std::vector<RecInstance> out;
  for (auto& [user, seq] : by_user) {
    std::stable_sort(seq.begin(), seq.end(),
                     [](const Interaction* a, const Interaction* b) { return a->timestamp < b->timestamp; });
    std::unordered_set<std::string> seen;
    for (const auto* it : seq) seen.insert(it->item_id);
    std::vector<std::string> pool;
    for (const auto& id : catalog)
      if (!seen.count(id)) pool.push_back(id);
    if (pool.size() < kCandidateCount - 1) {
      throw DataError("build_instances: user " + user + " leaves only " + std::to_string(pool.size()) +
                      " non-interacted items for 19 negatives");
    }

    const std::size_t m = seq.size() > 0 ? seq.size() - 1 : 0;
    std::size_t n_test = 0, n_valid = 0;
    if (m >= 3) {
      n_test = n_valid = std::max<std::size_t>(1, (m + 5) / 10);
    } else {
      n_test = std::min<std::size_t>(m, 1);
      n_valid = m - n_test;
    }

    for (std::size_t t = 1; t < seq.size(); ++t) {
      const std::size_t idx = t - 1;
      RecInstance r;
      r.user_id = user;
      const std::size_t have = std::min(t, kHistoryLength);
      for (std::size_t p = 0; p < kHistoryLength - have; ++p) {
        r.history.push_back(kPadTitle);
        r.history_ids.push_back("");
      }
      for (std::size_t h = t - have; h < t; ++h) {
        r.history.push_back(title_of.at(seq[h]->item_id));
        r.history_ids.push_back(seq[h]->item_id);
      }
      r.target_id = seq[t]->item_id;
      r.target = title_of.at(r.target_id);
      r.target_timestamp = seq[t]->timestamp;

      Rng rng(instance_seed(seed, user, idx));
      auto draw = pool;
      for (std::size_t k = 0; k < kCandidateCount - 1; ++k) {
        const auto j = k + rng.below(draw.size() - k);
        std::swap(draw[k], draw[j]);
      }
      draw.resize(kCandidateCount - 1);
      draw.push_back(r.target_id);
      for (std::size_t k = draw.size() - 1; k > 0; --k) std::swap(draw[k], draw[rng.below(k + 1)]);
      for (std::size_t k = 0; k < draw.size(); ++k) {
        r.candidate_ids.push_back(draw[k]);
        r.candidates.push_back(title_of.at(draw[k]));
        if (draw[k] == r.target_id) r.target_index = k;
      }

      if (idx >= m - n_test) {
        r.split = Split::kTest;
      } else if (idx >= m - n_test - n_valid) {
        r.split = Split::kValid;
      } else {
        r.split = Split::kTrain;
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::string quoted_list(const std::vector<std::string>& titles) {
  std::string out;
  for (std::size_t i = 0; i < titles.size(); ++i) {
    if (i > 0) out += ", ";
    if (i > 0 && i + 1 == titles.size()) out += "and ";
    out += "\"" + titles[i] + "\"";
  }
  return out;
}

std::string render_rec_prompt(const RecInstance& inst) {
  std::vector<std::string> bought;
  for (std::size_t i = 0; i < inst.history.size(); ++i) {
    const bool pad = i < inst.history_ids.size() ? inst.history_ids[i].empty()
                                                 : inst.history[i] == kPadTitle;
    if (!pad) bought.push_back(inst.history[i]);
  }
  const std::string history = bought.empty() ? "nothing" : quoted_list(bought);
  return "A user has bought " + history +
         " in the previous. Please recommend the next item for this user to buy from the "
         "following item title set: " +
         quoted_list(inst.candidates) + ". The recommendation is";
}

void write_instances(const std::string& path, const std::vector<RecInstance>& instances) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write instance file " + path);
  for (const auto& r : instances) out << instance_json(r).dump() << '\n';
}

std::vector<RecInstance> read_instances(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read instance file " + path);
  std::vector<RecInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      RecInstance r;
      j.at("user_id").get_to(r.user_id);
      j.at("history").get_to(r.history);
      j.at("history_ids").get_to(r.history_ids);
      j.at("target").get_to(r.target);
      j.at("target_id").get_to(r.target_id);
      j.at("candidates").get_to(r.candidates);
      j.at("candidate_ids").get_to(r.candidate_ids);
      j.at("target_index").get_to(r.target_index);
      j.at("target_timestamp").get_to(r.target_timestamp);
      r.split = parse_split(j.at("split").get<std::string>());
      if (r.history.size() != kHistoryLength || r.candidates.size() != kCandidateCount ||
          r.target_index >= kCandidateCount || r.candidates[r.target_index] != r.target) {
        throw DataError("malformed instance");
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<Interaction> synthetic_interactions(const SyntheticCatalogConfig& cfg) {
  static const char* kFamilies[] = {"Moisturizing Cream", "Face Serum",   "Gentle Shampoo",
                                    "Matte Lipstick",     "Sunscreen SPF 50", "Foaming Cleanser",
                                    "Hydrating Mask",     "Body Lotion"};
  static const char* kBrands[] = {"Aveeno", "Vichy", "Olay", "CeraVe", "Korres",
                                  "Glytone", "Mustela", "Bioderma", "Ahava", "Eucerin"};
  static const char* kTraits[] = {"Fragrance-Free", "Soothing", "Rich", "Light", "Daily",
                                  "Sensitive Skin", "Vegan", "Repair"};
  constexpr std::size_t n_families = std::size(kFamilies);
  if (cfg.n_items < kCandidateCount || cfg.min_per_user < 2 || cfg.max_per_user < cfg.min_per_user) {
    throw ConfigError("synthetic catalog: need >= 20 items and 2 <= min_per_user <= max_per_user");
  }
  Rng rng(cfg.seed);
  std::vector<std::string> titles;
  std::vector<std::vector<std::size_t>> family_items(n_families);
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    const std::size_t f = i % n_families;
    titles.push_back(std::string(kBrands[rng.below(std::size(kBrands))]) + " " +
                     kTraits[rng.below(std::size(kTraits))] + " " + kFamilies[f] + " " +
                     std::to_string(i));
    family_items[f].push_back(i);
  }

  std::vector<Interaction> out;
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    const std::size_t fa = rng.below(n_families);
    const std::size_t fb = (fa + 1 + rng.below(n_families - 1)) % n_families;
    const std::size_t len = cfg.min_per_user + rng.below(cfg.max_per_user - cfg.min_per_user + 1);
    std::set<std::size_t> bought;
    std::int64_t ts = 1'500'000'000 + static_cast<std::int64_t>(rng.below(1'000'000));
    for (std::size_t step = 0; bought.size() < len && step < 20 * len; ++step) {
      const double p = rng.uniform();
      std::size_t item;
      if (p < 0.85) {
        const auto& fam = family_items[p < 0.55 ? fa : fb];
        item = fam[rng.below(fam.size())];
      } else {
        item = rng.below(cfg.n_items);
      }
      if (!bought.insert(item).second) continue;
      ts += 3600 + static_cast<std::int64_t>(rng.below(86'400 * 30));
      const double rating = static_cast<double>(1 + rng.below(5));
      out.push_back({"U" + std::to_string(1000 + u), "I" + std::to_string(1000 + item), rating, ts,
                     titles[item]});
    }
  }
  return out;
}

void write_interactions(const std::string& path, const std::vector<Interaction>& interactions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write interactions to " + path);
  for (const auto& it : interactions) {
    out << json{{"user_id", it.user_id},
                {"item_id", it.item_id},
                {"rating", it.rating},
                {"timestamp", it.timestamp},
                {"item_title", it.item_title}}
               .dump()
        << '\n';
  }
}

}  // namespace webrec
