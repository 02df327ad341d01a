#pragma once

// Amazon-style interaction logs turned into sequential-recommendation
// instances: ingest, five-core filtering, sliding-target instances with 20
// candidates, a per-user chronological 8:1:1 split, and the prompt text.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace webrec {

struct Interaction {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::int64_t timestamp = 0;
  std::string item_title;

  bool operator==(const Interaction&) const = default;
};

struct IngestReport {
  std::size_t lines = 0;  // non-blank lines seen
  std::size_t parsed = 0;
  std::size_t malformed = 0;
  /// 1-based line numbers of the first few malformed lines.
  std::vector<std::size_t> malformed_lines;
};

/// One JSON object per line with user_id, item_id, rating, timestamp and
/// item_title. Malformed lines are skipped and counted; more than 10%
/// malformed is a DataError. Output is grouped by user (ascending id) and
/// timestamp-sorted within each user, ties kept in file order.
std::vector<Interaction> ingest(const std::string& path, IngestReport* report = nullptr);
std::vector<Interaction> ingest_text(const std::string& text, IngestReport* report = nullptr);

/// Repeatedly drops users and items with fewer than `min_core`
/// interactions until nothing changes. Order of survivors is preserved.
std::vector<Interaction> five_core_filter(const std::vector<Interaction>& in,
                                          std::size_t min_core = 5);

enum class Split { kTrain, kValid, kTest };
const char* split_name(Split s);

inline constexpr std::size_t kHistoryLength = 10;
inline constexpr std::size_t kCandidateCount = 20;
/// Reserved title used for left padding in short histories.
inline constexpr const char* kPadTitle = "<pad>";

struct RecInstance {
  std::string user_id;
  std::vector<std::string> history;       // exactly kHistoryLength, pads first
  std::vector<std::string> history_ids;   // same layout, "" for pads
  std::string target;
  std::string target_id;
  std::vector<std::string> candidates;    // exactly kCandidateCount titles
  std::vector<std::string> candidate_ids;
  std::size_t target_index = 0;           // position of the target in candidates
  std::int64_t target_timestamp = 0;
  Split split = Split::kTrain;

  bool operator==(const RecInstance&) const = default;
};

/// Every interaction after a user's first becomes a target whose history is
/// the up-to-10 preceding items. Each instance gets 19 negatives drawn
/// uniformly without replacement from items the user never interacted with,
/// seeded from (seed, user_id, instance index), and the target is shuffled
/// in. A user's instances are split chronologically: the last
/// max(1, round(m/10)) go to test, the same count before them to valid, the
/// rest to train (fewer than 3 instances fill test, then valid, first).
/// Throws DataError when the catalog has fewer than 20 items or a user has
/// interacted with so many items that 19 negatives cannot be drawn.
std::vector<RecInstance> build_instances(const std::vector<Interaction>& interactions,
                                         std::uint64_t seed);

/// `"a"`, `"a", and "b"`, `"a", "b", and "c"`: quoted, comma-separated, with
/// "and" before the final element.
std::string quoted_list(const std::vector<std::string>& titles);

/// The recommendation prompt. Pads are left out of the history; a history
/// made only of pads renders as "nothing".
std::string render_rec_prompt(const RecInstance& inst);

/// Line-delimited instance file, one JSON object per instance.
void write_instances(const std::string& path, const std::vector<RecInstance>& instances);
std::vector<RecInstance> read_instances(const std::string& path);

struct SyntheticCatalogConfig {
  std::size_t n_users = 60;
  std::size_t n_items = 80;
  std::size_t min_per_user = 6;
  std::size_t max_per_user = 14;
  std::uint64_t seed = 7;
};

/// Small beauty-flavoured interaction log with category structure: each
/// user mostly buys from one or two product families, so history carries
/// signal about the target.
std::vector<Interaction> synthetic_interactions(const SyntheticCatalogConfig& cfg);

/// Writes interactions in the ingest format.
void write_interactions(const std::string& path, const std::vector<Interaction>& interactions);

}  // namespace webrec
