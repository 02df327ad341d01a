#include "webrec/web.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include <spdlog/spdlog.h>

#include "webrec/numeric.hpp"

namespace webrec {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string excerpt(const std::string& body) {
  return body.size() <= 120 ? body : body.substr(0, 120) + "...";
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

// Reads a string member, accepting a missing or null value as empty.
std::string text_field(const json& obj, const char* key) {
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return "";
  if (!it->is_string()) throw std::runtime_error(std::string("field '") + key + "' is not a string");
  return it->get<std::string>();
}

std::vector<WebDocument> parse_results(const std::string& body, const json* results,
                                       const char* snippet_key, const std::string& client) {
  if (!results || !results->is_array()) {
    throw ResponseParseError(client + ": response has no result array: " + excerpt(body), body);
  }
  std::vector<WebDocument> docs;
  try {
    for (const auto& r : *results) {
      if (!r.is_object()) throw std::runtime_error("result entry is not an object");
      docs.push_back({text_field(r, "title"), text_field(r, snippet_key), text_field(r, "url"),
                      docs.size() + 1});
    }
  } catch (const std::exception& e) {
    throw ResponseParseError(client + ": " + e.what() + ": " + excerpt(body), body);
  }
  return docs;
}

// Lower-cased runs of letters and digits; bytes >= 0x80 stay in words.
std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::unique_ptr<httplib::Client> connect(const HttpClientOptions& o) {
  auto cli = std::make_unique<httplib::Client>(o.endpoint);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(o.retry.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(o.retry.timeout - secs);
  cli->set_connection_timeout(secs.count(), usecs.count());
  cli->set_read_timeout(secs.count(), usecs.count());
  cli->set_write_timeout(secs.count(), usecs.count());
  return cli;
}

}  // namespace

std::string query_hash(const std::string& query) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(trim(query))));
  return buf;
}

ReplayClient ReplayClient::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("replay: cannot open fixture file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

ReplayClient ReplayClient::parse(const std::string& text, const std::string& origin) {
  ReplayClient c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("replay: " + where + ": " + e.what());
    }
    for (const char* key : {"query_hash", "rank", "title", "snippet", "url"}) {
      if (!rec.contains(key)) throw DataError("replay: " + where + ": missing field '" + key + "'");
    }
    if (rec.size() != 5) throw DataError("replay: " + where + ": unexpected extra fields");
    if (!rec["rank"].is_number_unsigned() || rec["rank"].get<std::size_t>() == 0) {
      throw DataError("replay: " + where + ": rank must be a positive integer");
    }
    WebDocument d{rec["title"].get<std::string>(), rec["snippet"].get<std::string>(),
                  rec["url"].get<std::string>(), rec["rank"].get<std::size_t>()};
    c.by_hash_[rec["query_hash"].get<std::string>()].push_back(std::move(d));
  }
  for (auto& [hash, docs] : c.by_hash_) {
    std::sort(docs.begin(), docs.end(), [](const auto& a, const auto& b) { return a.rank < b.rank; });
    for (std::size_t i = 0; i < docs.size(); ++i) {
      if (docs[i].rank != i + 1) {
        throw DataError("replay: ranks for query " + hash + " are not 1.." + std::to_string(docs.size()));
      }
    }
  }
  return c;
}

std::vector<WebDocument> ReplayClient::search(const std::string& query, std::size_t top_n) {
  const auto it = by_hash_.find(query_hash(query));
  if (it == by_hash_.end()) return {};
  const auto n = std::min(top_n, it->second.size());
  return {it->second.begin(), it->second.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<WebDocument> RecordingClient::search(const std::string& query, std::size_t top_n) {
  auto docs = inner_.search(query, top_n);
  auto& kept = by_hash_[query_hash(query)];
  if (docs.size() > kept.size()) {
    kept = docs;
    for (std::size_t i = 0; i < kept.size(); ++i) kept[i].rank = i + 1;
  }
  return docs;
}

void RecordingClient::write(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("replay: cannot write " + path);
  for (const auto& [hash, docs] : by_hash_) {
    for (const auto& d : docs) {
      const json rec{{"query_hash", hash}, {"rank", d.rank}, {"title", d.title}, {"snippet", d.snippet},
                     {"url", d.url}};
      out << rec.dump() << '\n';
    }
  }
}

LocalIndexClient LocalIndexClient::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("local index: cannot open " + path);
  LocalIndexClient c;
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> df;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    WebDocument d;
    try {
      const auto j = json::parse(line);
      j.at("title").get_to(d.title);
      j.at("snippet").get_to(d.snippet);
      j.at("url").get_to(d.url);
    } catch (const json::exception& e) {
      throw DataError("local index: " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    auto terms = words_of(d.title + " " + d.snippet);
    for (const auto& t : terms) ++df[t];
    c.docs_.push_back(std::move(d));
    c.terms_.push_back(std::move(terms));
  }
  const double n = static_cast<double>(c.docs_.size());
  for (const auto& [t, k] : df) c.idf_[t] = std::log((n + 1.0) / (static_cast<double>(k) + 0.5));
  return c;
}

std::vector<WebDocument> LocalIndexClient::search(const std::string& query, std::size_t top_n) {
  const auto q = words_of(query);
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    double s = 0.0;
    for (const auto& t : q)
      if (std::binary_search(terms_[i].begin(), terms_[i].end(), t)) s += idf_.at(t);
    if (s > 0.0) scored.emplace_back(s, i);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<WebDocument> out;
  for (std::size_t r = 0; r < scored.size() && r < top_n; ++r) {
    auto d = docs_[scored[r].second];
    d.rank = r + 1;
    out.push_back(std::move(d));
  }
  return out;
}

HttpSearchClient::HttpSearchClient(HttpClientOptions opts)
    : opts_(std::move(opts)), slots_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(opts_.max_in_flight, 1, 64))) {
  if (opts_.endpoint.empty()) throw ConfigError("search client: endpoint is empty");
  if (opts_.retry.attempts < 1) throw ConfigError("search client: attempts must be >= 1");
  if (!opts_.sleep) opts_.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::vector<WebDocument> HttpSearchClient::search(const std::string& query, std::size_t top_n) {
  slots_.acquire();
  struct Release {
    std::counting_semaphore<64>& s;
    ~Release() { s.release(); }
  } release{slots_};

  std::string last_error;
  for (int attempt = 1; attempt <= opts_.retry.attempts; ++attempt) {
    last_attempts_ = attempt;
    const auto resp = exchange(query, top_n);
    if (resp.status == 200) {
      auto docs = parse_body(resp.body);
      if (docs.size() > top_n) docs.resize(top_n);
      return docs;
    }
    const bool retryable = resp.status == 0 || resp.status == 429 || resp.status >= 500;
    last_error = resp.status == 0 ? "transport failure" : "HTTP " + std::to_string(resp.status);
    if (!retryable) break;
    if (attempt < opts_.retry.attempts) {
      const auto& b = opts_.retry.backoff;
      const auto wait = b.empty() ? std::chrono::milliseconds(0)
                                  : b[std::min<std::size_t>(attempt - 1, b.size() - 1)];
      spdlog::warn("{}: attempt {} failed ({}), retrying in {} ms", name(), attempt, last_error,
                   wait.count());
      opts_.sleep(wait);
    }
  }
  throw NetworkError(name() + ": retrieval unavailable after " + std::to_string(last_attempts_) +
                     " attempt(s): " + last_error);
}

TavilyLikeClient::TavilyLikeClient(HttpClientOptions opts) : HttpSearchClient(std::move(opts)) {}

HttpSearchClient::Response TavilyLikeClient::exchange(const std::string& query, std::size_t top_n) {
  auto cli = connect(options());
  httplib::Headers headers{{"Authorization", "Bearer " + options().api_key}};
  const json body{{"query", query}, {"max_results", top_n}};
  const auto res = cli->Post(options().path, headers, body.dump(), "application/json");
  if (!res) return {0, ""};
  return {res->status, res->body};
}

std::vector<WebDocument> TavilyLikeClient::parse_body(const std::string& body) const {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error&) {
    throw ResponseParseError("tavily-like: response is not JSON: " + excerpt(body), body);
  }
  const json* results = j.is_object() && j.contains("results") ? &j["results"] : nullptr;
  return parse_results(body, results, "content", name());
}

BraveLikeClient::BraveLikeClient(HttpClientOptions opts) : HttpSearchClient(std::move(opts)) {}

HttpSearchClient::Response BraveLikeClient::exchange(const std::string& query, std::size_t top_n) {
  auto cli = connect(options());
  httplib::Headers headers{{"X-Subscription-Token", options().api_key}, {"Accept", "application/json"}};
  httplib::Params params{{"q", query}, {"count", std::to_string(top_n)}};
  const auto res = cli->Get(options().path, params, headers);
  if (!res) return {0, ""};
  return {res->status, res->body};
}

std::vector<WebDocument> BraveLikeClient::parse_body(const std::string& body) const {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error&) {
    throw ResponseParseError("brave-like: response is not JSON: " + excerpt(body), body);
  }
  const json* results = nullptr;
  if (j.is_object() && j.contains("web") && j["web"].is_object() && j["web"].contains("results")) {
    results = &j["web"]["results"];
  }
  return parse_results(body, results, "description", name());
}

std::unique_ptr<SearchClient> make_client(const std::string& backend, const std::string& fixtures,
                                          std::size_t max_in_flight) {
  if (backend == "replay") {
    if (fixtures.empty()) throw ConfigError("replay backend needs a fixtures path");
    return std::make_unique<ReplayClient>(ReplayClient::load(fixtures));
  }
  if (backend == "local") {
    if (fixtures.empty()) throw ConfigError("local backend needs a document file");
    return std::make_unique<LocalIndexClient>(LocalIndexClient::load(fixtures));
  }
  HttpClientOptions o;
  o.max_in_flight = max_in_flight;
  if (backend == "tavily-like") {
    o.endpoint = env_or("WEBREC_TAVILY_URL", "https://api.tavily.com");
    o.path = "/search";
    o.api_key = env_or("WEBREC_TAVILY_KEY", "");
    return std::make_unique<TavilyLikeClient>(std::move(o));
  }
  if (backend == "brave-like") {
    o.endpoint = env_or("WEBREC_BRAVE_URL", "https://api.search.brave.com");
    o.path = "/res/v1/web/search";
    o.api_key = env_or("WEBREC_BRAVE_KEY", "");
    return std::make_unique<BraveLikeClient>(std::move(o));
  }
  throw ConfigError("unknown search backend '" + backend + "'");
}

std::vector<WebDocument> search(const std::string& query, SearchClient& client, std::size_t top_n) {
  if (trim(query).empty()) throw DataError("search: empty query");
  if (top_n == 0) throw ConfigError("search: top_n must be >= 1");
  auto docs = client.search(query, top_n);
  if (docs.size() > top_n) docs.resize(top_n);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (docs[i].title.empty() || docs[i].url.empty()) {
      throw DataError(client.name() + ": result " + std::to_string(i + 1) + " lacks a title or url");
    }
    docs[i].rank = i + 1;
  }
  return docs;
}

std::vector<WebDocument> search_or_empty(const std::string& query, SearchClient& client,
                                         std::size_t top_n) {
  try {
    return search(query, client, top_n);
  } catch (const NetworkError& e) {
    spdlog::warn("{}; continuing without web documents", e.what());
    return {};
  }
}

std::string truncate_utf8(const std::string& s, std::size_t limit) {
  if (s.size() <= limit) return s;
  std::size_t cut = limit;
  // Back off continuation bytes so the cut lands on a sequence boundary.
  while (cut > 0 && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) --cut;
  return s.substr(0, cut);
}

std::string PromptBundle::render() const {
  std::string out = instruction + "\n\n" + recommendation_prompt + "\n";
  if (websites.empty()) return out;
  out += "\n";
  for (std::size_t i = 0; i < websites.size(); ++i) {
    const auto& d = websites[i];
    out += "[" + std::to_string(d.rank) + "] Title: " + d.title + ". Content: " + d.snippet;
    out += i + 1 == websites.size() ? ".\n" : ";\n";
  }
  return out;
}

PromptBundle assemble_prompt(const std::string& rec_prompt, const std::vector<WebDocument>& docs) {
  PromptBundle b;
  b.instruction = docs.empty() ? kPlainInstruction : kRagInstruction;
  b.recommendation_prompt = rec_prompt;
  for (const auto& d : docs) {
    auto copy = d;
    copy.snippet = truncate_utf8(d.snippet, kSnippetLimit);
    b.websites.push_back(std::move(copy));
  }
  b.rendered = b.render();
  return b;
}

}  // namespace webrec
