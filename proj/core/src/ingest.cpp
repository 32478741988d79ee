#include "tcdsr/ingest.hpp"

#include "tcdsr/random.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <tuple>

namespace tcdsr {

std::string_view domain_name(Domain d) { return d == Domain::kA ? "A" : "B"; }

std::string_view view_name(View v) {
  switch (v) {
    case View::kA:
      return "A";
    case View::kB:
      return "B";
    case View::kMixed:
      return "M";
  }
  return "?";
}

Domain parse_domain(std::string_view s) {
  if (s == "A") return Domain::kA;
  if (s == "B") return Domain::kB;
  throw std::invalid_argument("unknown domain \"" + std::string(s) + "\" (expected \"A\" or \"B\")");
}

}  // namespace tcdsr

namespace tcdsr::ingest {

using nlohmann::json;

// ---------------------------------------------------------------------------
// InteractionLog

InteractionLog InteractionLog::from_interactions(std::vector<Interaction> interactions) {
  InteractionLog log;
  std::set<std::tuple<std::string_view, std::string_view, std::int64_t>> seen;
  for (const auto& it : interactions) {
    if (it.timestamp < 0) throw std::invalid_argument("negative timestamp for user " + it.user_id);
  }
  std::sort(interactions.begin(), interactions.end(), [](const Interaction& a, const Interaction& b) {
    return std::tie(a.user_id, a.timestamp, a.domain, a.item_id) <
           std::tie(b.user_id, b.timestamp, b.domain, b.item_id);
  });
  for (const auto& it : interactions) {
    if (!seen.emplace(it.user_id, it.item_id, it.timestamp).second) {
      throw std::invalid_argument("duplicate interaction (" + it.user_id + ", " + it.item_id + ", " +
                                  std::to_string(it.timestamp) + ")");
    }
  }
  for (Domain d : kDomains) {
    std::set<std::string> ids;
    for (const auto& it : interactions) {
      if (it.domain == d) ids.insert(it.item_id);
    }
    auto& names = log.item_ids_[index_of(d)];
    names.assign(ids.begin(), ids.end());
    auto& index = log.item_index_[index_of(d)];
    for (std::size_t i = 0; i < names.size(); ++i) index.emplace(names[i], static_cast<int>(i) + 1);
    log.titles_[index_of(d)].assign(names.size(), std::nullopt);
  }
  for (const auto& it : interactions) {
    auto& slot = log.titles_[index_of(it.domain)][static_cast<std::size_t>(log.item_index(it.domain, it.item_id) - 1)];
    if (!slot && it.title) slot = it.title;
  }
  log.interactions_ = std::move(interactions);
  return log;
}

int InteractionLog::item_index(Domain d, const std::string& item_id) const {
  const auto& index = item_index_[index_of(d)];
  auto it = index.find(item_id);
  if (it == index.end()) {
    throw std::out_of_range("unknown item " + item_id + " in domain " + std::string(domain_name(d)));
  }
  return it->second;
}

const std::string& InteractionLog::item_id(Domain d, int index) const {
  const auto& names = item_ids_[index_of(d)];
  if (index < 1 || index > static_cast<int>(names.size())) {
    throw std::out_of_range("item index " + std::to_string(index) + " out of range");
  }
  return names[static_cast<std::size_t>(index - 1)];
}

std::optional<std::string> InteractionLog::title(Domain d, int index) const {
  (void)item_id(d, index);  // range check
  return titles_[index_of(d)][static_cast<std::size_t>(index - 1)];
}

// ---------------------------------------------------------------------------
// JSON-lines I/O

InteractionLog parse_interactions(std::istream& in) {
  std::vector<Interaction> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(lineno, "expected a JSON object");
    Interaction row;
    try {
      row.user_id = obj.at("user_id").get<std::string>();
      row.item_id = obj.at("item_id").get<std::string>();
      row.timestamp = obj.at("timestamp").get<std::int64_t>();
      const auto domain = obj.at("domain").get<std::string>();
      try {
        row.domain = parse_domain(domain);
      } catch (const std::invalid_argument& e) {
        throw ParseError(lineno, e.what());
      }
      if (auto t = obj.find("title"); t != obj.end() && !t->is_null()) row.title = t->get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError(lineno, std::string("bad field: ") + e.what());
    }
    if (row.timestamp < 0) throw ParseError(lineno, "timestamp must be >= 0");
    rows.push_back(std::move(row));
  }
  return InteractionLog::from_interactions(std::move(rows));
}

InteractionLog parse_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open interaction file " + path.string());
  return parse_interactions(in);
}

void write_interactions(const InteractionLog& log, std::ostream& out) {
  for (const auto& it : log.interactions()) {
    json obj{{"user_id", it.user_id},
             {"item_id", it.item_id},
             {"domain", std::string(domain_name(it.domain))},
             {"timestamp", it.timestamp}};
    if (it.title) obj["title"] = *it.title;
    out << obj.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Sequences

const std::vector<Event>& UserSequences::events(View v) const {
  switch (v) {
    case View::kA:
      return seq_a;
    case View::kB:
      return seq_b;
    default:
      return seq_m;
  }
}

const std::vector<std::int64_t>& UserSequences::gaps(View v) const {
  switch (v) {
    case View::kA:
      return gaps_a;
    case View::kB:
      return gaps_b;
    default:
      return gaps_m;
  }
}

int UserSequences::count_through(Domain d, int position) const {
  int n = 0;
  for (int i = 0; i <= position && i < static_cast<int>(seq_m.size()); ++i) {
    if (seq_m[static_cast<std::size_t>(i)].domain == d) ++n;
  }
  return n;
}

std::vector<std::int64_t> compute_gaps(const std::vector<Event>& events) {
  std::vector<std::int64_t> gaps;
  gaps.reserve(events.size());
  for (std::size_t k = 0; k < events.size(); ++k) {
    gaps.push_back(k == 0 ? -1 : events[k].timestamp - events[k - 1].timestamp);
  }
  return gaps;
}

UserSequences make_user_sequences(std::string user_id, std::vector<Event> mixed) {
  UserSequences s;
  s.user_id = std::move(user_id);
  s.seq_m = std::move(mixed);
  for (const Event& e : s.seq_m) (e.domain == Domain::kA ? s.seq_a : s.seq_b).push_back(e);
  s.gaps_a = compute_gaps(s.seq_a);
  s.gaps_b = compute_gaps(s.seq_b);
  s.gaps_m = compute_gaps(s.seq_m);
  return s;
}

std::vector<UserSequences> build_user_sequences(const InteractionLog& log, int max_len) {
  if (max_len < 2) throw std::invalid_argument("max_len must be >= 2");
  std::vector<UserSequences> out;
  const auto& rows = log.interactions();
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    std::vector<Event> events;
    while (j < rows.size() && rows[j].user_id == rows[i].user_id) {
      events.push_back({log.item_index(rows[j].domain, rows[j].item_id), rows[j].timestamp, rows[j].domain});
      ++j;
    }
    if (events.size() < 3) {
      ++dropped;
    } else {
      if (static_cast<int>(events.size()) > max_len) {
        events.erase(events.begin(), events.end() - max_len);
      }
      out.push_back(make_user_sequences(rows[i].user_id, std::move(events)));
    }
    i = j;
  }
  if (dropped > 0) spdlog::info("dropped {} users with fewer than 3 interactions", dropped);
  return out;
}

// ---------------------------------------------------------------------------
// Splits and evaluation instances

DatasetSplit split_dataset(const std::vector<UserSequences>& users, const SplitSpec& spec) {
  const double total = spec.train + spec.valid + spec.test;
  if (std::abs(total - 1.0) > 1e-9 || spec.train < 0 || spec.valid < 0 || spec.test < 0) {
    throw std::invalid_argument("split fractions must be nonnegative and sum to 1");
  }
  const auto n = static_cast<long>(users.size());
  const long n_valid = std::lround(spec.valid * static_cast<double>(n));
  const long n_test = std::lround(spec.test * static_cast<double>(n));
  const long n_train = n - n_valid - n_test;
  if (n < 3 || n_train <= 0 || (spec.valid > 0 && n_valid == 0) || (spec.test > 0 && n_test == 0)) {
    throw std::invalid_argument("too few users (" + std::to_string(n) + ") to fill every partition");
  }
  std::vector<std::size_t> order(users.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return users[a].user_id < users[b].user_id; });
  Rng rng(spec.seed);
  shuffle_in_place(order, rng);
  DatasetSplit split;
  for (long i = 0; i < n; ++i) {
    const auto& u = users[order[static_cast<std::size_t>(i)]];
    if (i < n_train) {
      split.train.push_back(u);
    } else if (i < n_train + n_valid) {
      split.valid.push_back(u);
    } else {
      split.test.push_back(u);
    }
  }
  auto by_id = [](const UserSequences& a, const UserSequences& b) { return a.user_id < b.user_id; };
  std::sort(split.train.begin(), split.train.end(), by_id);
  std::sort(split.valid.begin(), split.valid.end(), by_id);
  std::sort(split.test.begin(), split.test.end(), by_id);
  return split;
}

std::vector<int> sample_negatives(int target, int item_count, int k, std::uint64_t seed) {
  const bool target_in_range = target >= 1 && target <= item_count;
  const int available = item_count - (target_in_range ? 1 : 0);
  if (k < 0 || available < k) {
    throw std::invalid_argument("cannot sample " + std::to_string(k) + " negatives from " +
                                std::to_string(available) +
                                " candidate items; lower the negative count (eval.negatives)");
  }
  std::vector<int> pool;
  pool.reserve(static_cast<std::size_t>(available));
  for (int i = 1; i <= item_count; ++i) {
    if (i != target) pool.push_back(i);
  }
  Rng rng(seed);
  for (int i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(i) + uniform_index(rng, pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(k));
  return pool;
}

std::vector<EvalInstance> build_eval_instances(const std::vector<UserSequences>& users,
                                               const std::array<int, 2>& item_counts, int negatives,
                                               std::uint64_t seed) {
  std::vector<EvalInstance> out;
  std::size_t skipped = 0;
  for (const auto& u : users) {
    for (Domain d : kDomains) {
      int last = -1;
      for (int i = static_cast<int>(u.seq_m.size()) - 1; i >= 0; --i) {
        if (u.seq_m[static_cast<std::size_t>(i)].domain == d) {
          last = i;
          break;
        }
      }
      if (last <= 0 || u.count_through(d, last - 1) == 0) {
        ++skipped;
        continue;
      }
      EvalInstance inst;
      inst.history = make_user_sequences(u.user_id, {u.seq_m.begin(), u.seq_m.begin() + last});
      inst.target_domain = d;
      inst.target_item = u.seq_m[static_cast<std::size_t>(last)].item;
      inst.negatives = sample_negatives(inst.target_item, item_counts[index_of(d)], negatives,
                                        derive_seed(seed, u.user_id + "/" + std::string(domain_name(d))));
      out.push_back(std::move(inst));
    }
  }
  if (skipped > 0) spdlog::debug("{} (user, domain) pairs had no in-domain history and were skipped", skipped);
  return out;
}

// ---------------------------------------------------------------------------
// Noise, buckets, interval analytics

InteractionLog inject_noise(const InteractionLog& log, double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("noise ratio must lie in [0, 1]");
  const long count = std::lround(ratio * static_cast<double>(log.size()));
  if (count == 0) return log;
  struct Span {
    std::string user;
    std::int64_t first, last;
  };
  std::vector<Span> spans;
  for (const auto& it : log.interactions()) {
    if (spans.empty() || spans.back().user != it.user_id) {
      spans.push_back({it.user_id, it.timestamp, it.timestamp});
    } else {
      spans.back().first = std::min(spans.back().first, it.timestamp);
      spans.back().last = std::max(spans.back().last, it.timestamp);
    }
  }
  std::set<std::tuple<std::string, std::string, std::int64_t>> seen;
  for (const auto& it : log.interactions()) seen.emplace(it.user_id, it.item_id, it.timestamp);

  std::vector<Interaction> rows = log.interactions();
  Rng rng(seed);
  for (long n = 0; n < count;) {
    const Span& span = spans[uniform_index(rng, spans.size())];
    Domain d = uniform_index(rng, 2) == 0 ? Domain::kA : Domain::kB;
    if (log.item_count(d) == 0) d = d == Domain::kA ? Domain::kB : Domain::kA;
    const int item = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(log.item_count(d))));
    const std::int64_t ts =
        span.first + static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(span.last - span.first + 1)));
    Interaction row{span.user, log.item_id(d, item), d, ts, log.title(d, item)};
    if (!seen.emplace(row.user_id, row.item_id, row.timestamp).second) continue;
    rows.push_back(std::move(row));
    ++n;
  }
  return InteractionLog::from_interactions(std::move(rows));
}

std::optional<double> gap_variance(const UserSequences& s) {
  if (s.gaps_m.size() < 3) return std::nullopt;
  double mean = 0.0;
  const auto n = static_cast<double>(s.gaps_m.size() - 1);
  for (std::size_t k = 1; k < s.gaps_m.size(); ++k) mean += static_cast<double>(s.gaps_m[k]);
  mean /= n;
  double var = 0.0;
  for (std::size_t k = 1; k < s.gaps_m.size(); ++k) {
    const double dlt = static_cast<double>(s.gaps_m[k]) - mean;
    var += dlt * dlt;
  }
  return var / n;
}

std::map<std::string, int> bucket_by_interval_variance(const std::vector<UserSequences>& users, int n_buckets) {
  if (n_buckets < 1) throw std::invalid_argument("n_buckets must be >= 1");
  std::map<std::string, int> out;
  std::vector<std::pair<double, std::string>> ranked;
  for (const auto& u : users) {
    if (auto v = gap_variance(u)) {
      ranked.emplace_back(*v, u.user_id);
    } else {
      spdlog::warn("sequence of user {} has fewer than 2 gaps; assigned to bucket 0", u.user_id);
      out[u.user_id] = 0;
    }
  }
  std::sort(ranked.begin(), ranked.end());
  const std::size_t n = ranked.size();
  for (std::size_t i = 0; i < n; ++i) {
    out[ranked[i].second] = static_cast<int>(i * static_cast<std::size_t>(n_buckets) / n);
  }
  return out;
}

IntervalRatios analyze_intervals(const InteractionLog& log) {
  if (log.empty()) throw std::invalid_argument("analyze_intervals: empty log");
  constexpr std::int64_t kDay = 86400;
  constexpr std::int64_t kWeek = 7 * kDay;
  IntervalRatios out;
  std::array<std::array<std::size_t, 3>, 2> counts{};
  const auto& rows = log.interactions();
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    std::array<std::optional<std::int64_t>, 2> prev;
    while (j < rows.size() && rows[j].user_id == rows[i].user_id) {
      auto& p = prev[index_of(rows[j].domain)];
      if (p) {
        const std::int64_t gap = rows[j].timestamp - *p;
        const int bin = gap <= kDay ? 0 : (gap <= kWeek ? 1 : 2);
        ++counts[index_of(rows[j].domain)][static_cast<std::size_t>(bin)];
      }
      p = rows[j].timestamp;
      ++j;
    }
    i = j;
  }
  for (Domain d : kDomains) {
    const auto& c = counts[index_of(d)];
    const std::size_t total = c[0] + c[1] + c[2];
    out.gap_counts[index_of(d)] = total;
    if (total == 0) {
      spdlog::warn("domain {} has no adjacent same-domain gaps; omitted from interval ratios", domain_name(d));
      continue;
    }
    out.ratios[index_of(d)] = std::array<double, 3>{static_cast<double>(c[0]) / static_cast<double>(total),
                                                    static_cast<double>(c[1]) / static_cast<double>(total),
                                                    static_cast<double>(c[2]) / static_cast<double>(total)};
  }
  return out;
}

}  // namespace tcdsr::ingest
