#pragma once

// Interaction logs, per-user domain/mixed sequences, dataset splits,
// evaluation instances and the data-side experiment utilities (noise
// injection, interval-variance buckets, interval ratio analytics).

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tcdsr {

enum class Domain : std::uint8_t { kA = 0, kB = 1 };

/// The three sequence views a user is modeled under.
enum class View : std::uint8_t { kA = 0, kB = 1, kMixed = 2 };

inline constexpr std::array<Domain, 2> kDomains{Domain::kA, Domain::kB};
inline constexpr std::array<View, 3> kViews{View::kA, View::kB, View::kMixed};

std::string_view domain_name(Domain d);
std::string_view view_name(View v);
/// Accepts "A" or "B"; throws std::invalid_argument otherwise.
Domain parse_domain(std::string_view s);
inline View view_of(Domain d) { return d == Domain::kA ? View::kA : View::kB; }
inline std::size_t index_of(Domain d) { return static_cast<std::size_t>(d); }
inline std::size_t index_of(View v) { return static_cast<std::size_t>(v); }

}  // namespace tcdsr

namespace tcdsr::ingest {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  [[nodiscard]] std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct Interaction {
  std::string user_id;
  std::string item_id;
  Domain domain = Domain::kA;
  std::int64_t timestamp = 0;
  std::optional<std::string> title;
};

/// Global interaction log sorted by (user_id, timestamp, domain, item_id)
/// with dense 1-based item indices per domain (index 0 is padding).
class InteractionLog {
 public:
  InteractionLog() = default;
  /// Validates, sorts and indexes. Throws std::invalid_argument on negative
  /// timestamps or duplicate (user, item, timestamp) triples.
  static InteractionLog from_interactions(std::vector<Interaction> interactions);

  [[nodiscard]] const std::vector<Interaction>& interactions() const { return interactions_; }
  [[nodiscard]] std::size_t size() const { return interactions_.size(); }
  [[nodiscard]] bool empty() const { return interactions_.empty(); }

  [[nodiscard]] int item_count(Domain d) const { return static_cast<int>(item_ids_[index_of(d)].size()); }
  /// 1-based index of an item; throws std::out_of_range if unknown.
  [[nodiscard]] int item_index(Domain d, const std::string& item_id) const;
  [[nodiscard]] const std::string& item_id(Domain d, int index) const;
  /// Title of an item, or nullopt when the log carried none.
  [[nodiscard]] std::optional<std::string> title(Domain d, int index) const;

 private:
  std::vector<Interaction> interactions_;
  std::array<std::vector<std::string>, 2> item_ids_;
  std::array<std::unordered_map<std::string, int>, 2> item_index_;
  std::array<std::vector<std::optional<std::string>>, 2> titles_;
};

/// JSON-lines: {"user_id", "item_id", "domain": "A"|"B", "timestamp", "title"?}.
/// Blank lines are skipped. Throws ParseError naming the 1-based line.
InteractionLog parse_interactions(std::istream& in);
InteractionLog parse_interactions(const std::filesystem::path& path);
void write_interactions(const InteractionLog& log, std::ostream& out);

struct Event {
  int item = 0;
  std::int64_t timestamp = 0;
  Domain domain = Domain::kA;

  friend bool operator==(const Event&, const Event&) = default;
};

/// Chronological per-user sequences. Gap vectors are aligned with their
/// sequence: gaps[0] == -1 (sequence start) and gaps[k] = t_k - t_{k-1}.
struct UserSequences {
  std::string user_id;
  std::vector<Event> seq_a, seq_b, seq_m;
  std::vector<std::int64_t> gaps_a, gaps_b, gaps_m;

  [[nodiscard]] const std::vector<Event>& events(View v) const;
  [[nodiscard]] const std::vector<std::int64_t>& gaps(View v) const;
  /// Number of events of domain `d` in seq_m[0..=position].
  [[nodiscard]] int count_through(Domain d, int position) const;

  friend bool operator==(const UserSequences&, const UserSequences&) = default;
};

/// Builds views A/B from an already chronological mixed event list.
UserSequences make_user_sequences(std::string user_id, std::vector<Event> mixed);
std::vector<std::int64_t> compute_gaps(const std::vector<Event>& events);

/// Per-user sequences, sorted by user_id. The mixed sequence keeps the most
/// recent max_len events; the domain views are derived from that window.
/// Users with fewer than 3 mixed events are dropped.
std::vector<UserSequences> build_user_sequences(const InteractionLog& log, int max_len);

struct SplitSpec {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;
};

struct DatasetSplit {
  std::vector<UserSequences> train, valid, test;
};

/// User-level disjoint partition with rounded fraction sizes.
DatasetSplit split_dataset(const std::vector<UserSequences>& users, const SplitSpec& spec);

/// k distinct items of a domain with indices in [1, item_count], excluding
/// `target`. Throws std::invalid_argument when fewer than k candidates exist.
std::vector<int> sample_negatives(int target, int item_count, int k, std::uint64_t seed);

struct EvalInstance {
  UserSequences history;
  Domain target_domain = Domain::kA;
  int target_item = 0;
  std::vector<int> negatives;
};

/// Leave-last-out per domain: the last event of each domain is the target and
/// all earlier mixed events form the history. A domain contributes an
/// instance only when the history holds at least one event of that domain.
/// Negatives are drawn per (user, domain) from `seed`.
std::vector<EvalInstance> build_eval_instances(const std::vector<UserSequences>& users,
                                               const std::array<int, 2>& item_counts, int negatives,
                                               std::uint64_t seed);

/// Inserts round(ratio * |log|) random events: random user of the log, random
/// domain, random item, timestamp uniform within that user's observed span.
InteractionLog inject_noise(const InteractionLog& log, double ratio, std::uint64_t seed);

/// Population variance of the mixed-sequence gaps (sentinel excluded).
std::optional<double> gap_variance(const UserSequences& s);

/// Sorts sequences by gap variance (ties by user_id) and cuts them into
/// n_buckets equal-size groups, bucket 0 the most uniform. Sequences with
/// fewer than two gaps go to bucket 0.
std::map<std::string, int> bucket_by_interval_variance(const std::vector<UserSequences>& users, int n_buckets = 3);

/// Proportions of adjacent same-domain gaps in {<= 1 day, (1 day, 1 week], > 1 week}.
struct IntervalRatios {
  std::array<std::optional<std::array<double, 3>>, 2> ratios;
  std::array<std::size_t, 2> gap_counts{0, 0};
};

IntervalRatios analyze_intervals(const InteractionLog& log);

}  // namespace tcdsr::ingest
