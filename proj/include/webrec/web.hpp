#pragma once

// Web search clients and the web-augmented prompt.
//
// Every client returns rank-ordered title/snippet/url triples. The replay
// client reads recorded results keyed by a hash of the query text; the two
// live clients speak a Tavily-like POST-JSON protocol and a Brave-like
// GET-with-header protocol. Live clients retry transport failures with
// exponential backoff and cap the number of requests in flight.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <semaphore>
#include <string>
#include <vector>

#include "webrec/error.hpp"

namespace webrec {

struct WebDocument {
  std::string title;
  std::string snippet;
  std::string url;
  std::size_t rank = 0;  // 1-based

  bool operator==(const WebDocument&) const = default;
};

/// Malformed search response. `payload` keeps the raw body for diagnosis.
class ResponseParseError : public DataError {
 public:
  ResponseParseError(const std::string& what, std::string payload)
      : DataError(what), payload_(std::move(payload)) {}
  const std::string& payload() const noexcept { return payload_; }

 private:
  std::string payload_;
};

class SearchClient {
 public:
  virtual ~SearchClient() = default;
  /// At most `top_n` documents in the order the service returned them.
  virtual std::vector<WebDocument> search(const std::string& query, std::size_t top_n) = 0;
  virtual std::string name() const = 0;
};

/// Hex FNV-1a of the query text with surrounding whitespace removed.
std::string query_hash(const std::string& query);

/// Recorded results, one JSON object per line:
///   {"query_hash": "...", "rank": 1, "title": "...", "snippet": "...", "url": "..."}
class ReplayClient : public SearchClient {
 public:
  static ReplayClient load(const std::string& path);
  static ReplayClient parse(const std::string& text, const std::string& origin = "<memory>");

  std::vector<WebDocument> search(const std::string& query, std::size_t top_n) override;
  std::string name() const override { return "replay"; }
  std::size_t query_count() const { return by_hash_.size(); }

 private:
  std::map<std::string, std::vector<WebDocument>> by_hash_;
};

/// Passes searches through to another client and keeps what came back, so a
/// session can be saved as a replay fixture. For a repeated query the longest
/// result list is kept.
class RecordingClient : public SearchClient {
 public:
  explicit RecordingClient(SearchClient& inner) : inner_(inner) {}

  std::vector<WebDocument> search(const std::string& query, std::size_t top_n) override;
  std::string name() const override { return inner_.name(); }
  /// Replay format, ordered by query hash then rank.
  void write(const std::string& path) const;
  std::size_t query_count() const { return by_hash_.size(); }

 private:
  SearchClient& inner_;
  std::map<std::string, std::vector<WebDocument>> by_hash_;
};

/// Offline search over a local document file (JSON lines with title,
/// snippet and url). A document scores the summed inverse document
/// frequency of the distinct query words it contains; documents sharing no
/// word are never returned, ties keep file order.
class LocalIndexClient : public SearchClient {
 public:
  static LocalIndexClient load(const std::string& path);

  std::vector<WebDocument> search(const std::string& query, std::size_t top_n) override;
  std::string name() const override { return "local"; }
  std::size_t size() const { return docs_.size(); }

 private:
  std::vector<WebDocument> docs_;
  std::vector<std::vector<std::string>> terms_;  // distinct words per document
  std::map<std::string, double> idf_;
};

struct RetryPolicy {
  int attempts = 3;
  std::vector<std::chrono::milliseconds> backoff{std::chrono::milliseconds(500),
                                                 std::chrono::milliseconds(1000),
                                                 std::chrono::milliseconds(2000)};
  std::chrono::milliseconds timeout{10000};
};

struct HttpClientOptions {
  /// scheme://host[:port], e.g. "https://api.tavily.com".
  std::string endpoint;
  std::string path;
  std::string api_key;
  RetryPolicy retry;
  std::size_t max_in_flight = 4;
  /// Replaced in tests to avoid real waiting.
  std::function<void(std::chrono::milliseconds)> sleep;
};

/// Shared transport for the live clients: retries, backoff, in-flight cap.
class HttpSearchClient : public SearchClient {
 public:
  explicit HttpSearchClient(HttpClientOptions opts);

  std::vector<WebDocument> search(const std::string& query, std::size_t top_n) override;
  /// Attempts made by the most recent search.
  int last_attempts() const { return last_attempts_; }

 protected:
  struct Response {
    int status = 0;
    std::string body;
  };
  /// One HTTP exchange; a status of 0 means the transport failed.
  virtual Response exchange(const std::string& query, std::size_t top_n) = 0;
  virtual std::vector<WebDocument> parse_body(const std::string& body) const = 0;

  const HttpClientOptions& options() const { return opts_; }

 private:
  HttpClientOptions opts_;
  std::counting_semaphore<64> slots_;
  std::atomic<int> last_attempts_{0};
};

/// POST {path} with JSON {"query", "max_results"} and a bearer token;
/// reads results[].{title, content, url}.
class TavilyLikeClient : public HttpSearchClient {
 public:
  explicit TavilyLikeClient(HttpClientOptions opts);
  std::string name() const override { return "tavily-like"; }

 protected:
  Response exchange(const std::string& query, std::size_t top_n) override;
  std::vector<WebDocument> parse_body(const std::string& body) const override;
};

/// GET {path}?q=...&count=N with an X-Subscription-Token header;
/// reads web.results[].{title, description, url}.
class BraveLikeClient : public HttpSearchClient {
 public:
  explicit BraveLikeClient(HttpClientOptions opts);
  std::string name() const override { return "brave-like"; }

 protected:
  Response exchange(const std::string& query, std::size_t top_n) override;
  std::vector<WebDocument> parse_body(const std::string& body) const override;
};

/// Builds a client from a backend name ("replay", "local", "tavily-like",
/// "brave-like"); the first two read `fixtures`. Live clients read their key from WEBREC_TAVILY_KEY or
/// WEBREC_BRAVE_KEY and their endpoint from WEBREC_TAVILY_URL or
/// WEBREC_BRAVE_URL when set.
std::unique_ptr<SearchClient> make_client(const std::string& backend, const std::string& fixtures,
                                          std::size_t max_in_flight = 4);

/// Validated top-N search: non-empty query, top_n >= 1, ranks renumbered
/// 1..N, empty titles or urls rejected.
std::vector<WebDocument> search(const std::string& query, SearchClient& client, std::size_t top_n);

/// Like search, but a NetworkError degrades to zero documents.
std::vector<WebDocument> search_or_empty(const std::string& query, SearchClient& client,
                                         std::size_t top_n);

inline constexpr std::size_t kSnippetLimit = 512;

/// Cuts at `limit` bytes without splitting a UTF-8 sequence.
std::string truncate_utf8(const std::string& s, std::size_t limit);

struct PromptBundle {
  std::string instruction;
  std::string recommendation_prompt;
  std::vector<WebDocument> websites;
  std::string rendered;

  /// Rendering from the other three fields.
  std::string render() const;
};

inline constexpr const char* kRagInstruction =
    "Below is an instruction that describes a task, paired with webpages that provide further "
    "context. Write a response that appropriately completes the request.";
inline constexpr const char* kPlainInstruction =
    "Below is an instruction that describes a task. Please write a response that appropriately "
    "completes the request.";

/// Web-augmented prompt; with no documents, the plain instruction form.
/// Snippets are truncated to kSnippetLimit bytes.
PromptBundle assemble_prompt(const std::string& rec_prompt, const std::vector<WebDocument>& docs);

}  // namespace webrec
