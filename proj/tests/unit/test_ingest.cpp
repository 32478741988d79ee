#include "support.hpp"
#include "tcdsr/ingest.hpp"
#include "tcdsr/synthetic.hpp"

#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

using namespace tcdsr;
using namespace tcdsr::ingest;
using tcdsr::testing::interaction;

namespace {

InteractionLog parse(const std::string& text) {
  std::istringstream in(text);
  return parse_interactions(in);
}

InteractionLog three_events() {
  return InteractionLog::from_interactions({interaction("u", "i1", Domain::kA, 10),
                                            interaction("u", "i2", Domain::kB, 20),
                                            interaction("u", "i3", Domain::kA, 35)});
}

std::vector<std::int64_t> timestamps(const std::vector<Event>& events) {
  std::vector<std::int64_t> out;
  for (const auto& e : events) out.push_back(e.timestamp);
  return out;
}

std::vector<UserSequences> many_users(int n) {
  std::vector<Interaction> rows;
  for (int u = 0; u < n; ++u) {
    for (int k = 0; k < 3; ++k) {
      rows.push_back(interaction("user" + std::to_string(u), "i" + std::to_string(k), k == 1 ? Domain::kB : Domain::kA,
                                 100 * (k + 1)));
    }
  }
  return build_user_sequences(InteractionLog::from_interactions(std::move(rows)), 50);
}

UserSequences with_gaps(const std::string& id, const std::vector<std::int64_t>& gaps) {
  std::vector<Event> events;
  std::int64_t t = 0;
  events.push_back({1, t, Domain::kA});
  for (auto g : gaps) {
    t += g;
    events.push_back({1, t, Domain::kA});
  }
  return make_user_sequences(id, std::move(events));
}

}  // namespace

TEST_CASE("parse: three lines of one user") {
  const auto log = parse(
      R"({"user_id":"u1","item_id":"a1","domain":"A","timestamp":5,"title":"First"})"
      "\n"
      R"({"user_id":"u1","item_id":"a2","domain":"A","timestamp":9})"
      "\n"
      R"({"user_id":"u1","item_id":"b1","domain":"B","timestamp":12})"
      "\n");
  CHECK(log.size() == 3);
  CHECK(log.item_count(Domain::kA) == 2);
  CHECK(log.item_count(Domain::kB) == 1);
  CHECK(log.title(Domain::kA, log.item_index(Domain::kA, "a1")) == std::optional<std::string>("First"));
  CHECK_FALSE(log.title(Domain::kA, log.item_index(Domain::kA, "a2")).has_value());
}

TEST_CASE("parse: empty input gives an empty log") {
  const auto log = parse("");
  CHECK(log.empty());
  CHECK(log.item_count(Domain::kA) == 0);
  CHECK(log.item_count(Domain::kB) == 0);
}

TEST_CASE("parse: unknown domain names the line") {
  const std::string text =
      R"({"user_id":"u1","item_id":"a1","domain":"A","timestamp":5})"
      "\n"
      R"({"user_id":"u1","item_id":"c1","domain":"C","timestamp":6})"
      "\n";
  try {
    (void)parse(text);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("parse: malformed json and missing keys") {
  CHECK_THROWS_AS((void)parse("{not json\n"), ParseError);
  CHECK_THROWS_AS((void)parse(R"({"user_id":"u","domain":"A","timestamp":1})"), ParseError);
}

TEST_CASE("write then parse round-trips") {
  const auto log = tcdsr::testing::random_log(4, 6, 5, 9);
  std::stringstream buf;
  write_interactions(log, buf);
  const auto back = parse_interactions(buf);
  REQUIRE(back.size() == log.size());
  CHECK(build_user_sequences(back, 50) == build_user_sequences(log, 50));
}

TEST_CASE("sequences: mixed gaps and the domain view") {
  const auto users = build_user_sequences(three_events(), 50);
  REQUIRE(users.size() == 1);
  const auto& u = users[0];
  CHECK(u.gaps_m == std::vector<std::int64_t>{-1, 10, 15});
  CHECK(timestamps(u.seq_a) == std::vector<std::int64_t>{10, 35});
  CHECK(u.gaps_a == std::vector<std::int64_t>{-1, 25});
  CHECK(u.seq_a[0].item == three_events().item_index(Domain::kA, "i1"));
  CHECK(u.seq_a[1].item == three_events().item_index(Domain::kA, "i3"));
  CHECK(u.gaps_b == std::vector<std::int64_t>{-1});
}

TEST_CASE("sequences: truncation keeps the most recent events") {
  std::vector<Interaction> rows;
  for (int k = 0; k < 60; ++k) {
    rows.push_back(interaction("u", "i" + std::to_string(k), k % 3 == 0 ? Domain::kB : Domain::kA, 100 + 10 * k));
  }
  const auto users = build_user_sequences(InteractionLog::from_interactions(std::move(rows)), 50);
  REQUIRE(users.size() == 1);
  const auto& u = users[0];
  REQUIRE(u.seq_m.size() == 50);
  CHECK(u.seq_m.front().timestamp == 100 + 10 * 10);
  CHECK(u.seq_m.back().timestamp == 100 + 10 * 59);
  CHECK(u.gaps_m[0] == -1);
  CHECK(u.seq_a.size() + u.seq_b.size() == 50);
}

TEST_CASE("sequences: users with fewer than three events are dropped") {
  const auto log = InteractionLog::from_interactions(
      {interaction("short", "i1", Domain::kA, 1), interaction("short", "i2", Domain::kB, 2),
       interaction("ok", "i1", Domain::kA, 1), interaction("ok", "i2", Domain::kA, 2),
       interaction("ok", "i3", Domain::kB, 3)});
  const auto users = build_user_sequences(log, 50);
  REQUIRE(users.size() == 1);
  CHECK(users[0].user_id == "ok");
}

TEST_CASE("log validation") {
  CHECK_THROWS_AS((void)InteractionLog::from_interactions({interaction("u", "i", Domain::kA, -5)}),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)InteractionLog::from_interactions(
                      {interaction("u", "i", Domain::kA, 5), interaction("u", "i", Domain::kA, 5)}),
                  std::invalid_argument);
}

TEST_CASE("invariant: ingestion ignores input order") {
  const auto log = tcdsr::testing::random_log(12, 9, 7, 4);
  auto rows = log.interactions();
  Rng rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    shuffle_in_place(rows, rng);
    CHECK(build_user_sequences(InteractionLog::from_interactions(rows), 50) == build_user_sequences(log, 50));
  }
}

TEST_CASE("invariant: merge consistency and gap shape") {
  const auto log = tcdsr::testing::random_log(30, 12, 9, 5);
  for (const auto& u : build_user_sequences(log, 8)) {
    for (Domain d : kDomains) {
      std::vector<Event> restricted;
      for (const auto& e : u.seq_m) {
        if (e.domain == d) restricted.push_back(e);
      }
      CHECK(restricted == u.events(view_of(d)));
    }
    for (View v : kViews) {
      const auto& gaps = u.gaps(v);
      const auto& events = u.events(v);
      REQUIRE(gaps.size() == events.size());
      if (gaps.empty()) continue;
      CHECK(gaps[0] == -1);
      for (std::size_t k = 1; k < gaps.size(); ++k) {
        CHECK(gaps[k] >= 0);
        CHECK(gaps[k] == events[k].timestamp - events[k - 1].timestamp);
      }
    }
  }
}

TEST_CASE("split: sizes, disjointness and determinism") {
  const auto users = many_users(10);
  const auto s = split_dataset(users, {0.8, 0.1, 0.1, 3});
  CHECK(s.train.size() == 8);
  CHECK(s.valid.size() == 1);
  CHECK(s.test.size() == 1);
  std::set<std::string> ids;
  for (const auto* part : {&s.train, &s.valid, &s.test}) {
    for (const auto& u : *part) ids.insert(u.user_id);
  }
  CHECK(ids.size() == 10);

  const auto again = split_dataset(users, {0.8, 0.1, 0.1, 3});
  CHECK(again.train == s.train);
  CHECK(again.valid == s.valid);
  CHECK(again.test == s.test);
}

TEST_CASE("split: different seeds give different partitions") {
  const auto users = many_users(100);
  const auto a = split_dataset(users, {0.8, 0.1, 0.1, 1});
  const auto b = split_dataset(users, {0.8, 0.1, 0.1, 2});
  CHECK(a.test != b.test);
}

TEST_CASE("split: too few users") {
  CHECK_THROWS_AS((void)split_dataset(many_users(2), {0.8, 0.1, 0.1, 0}), std::invalid_argument);
}

TEST_CASE("negatives: full pool, small pool, determinism") {
  auto neg = sample_negatives(17, 1000, 999, 5);
  CHECK(neg.size() == 999);
  CHECK(std::set<int>(neg.begin(), neg.end()).size() == 999);
  CHECK(std::find(neg.begin(), neg.end(), 17) == neg.end());

  auto few = sample_negatives(4, 10, 5, 5);
  CHECK(few.size() == 5);
  CHECK(std::set<int>(few.begin(), few.end()).size() == 5);
  CHECK(std::find(few.begin(), few.end(), 4) == few.end());
  for (int x : few) CHECK((x >= 1 && x <= 10));

  CHECK(sample_negatives(4, 10, 5, 5) == few);
  CHECK_THROWS_AS((void)sample_negatives(4, 10, 10, 5), std::invalid_argument);
}

TEST_CASE("eval instances: last event of each domain is the target") {
  const auto log = InteractionLog::from_interactions(
      {interaction("u", "a1", Domain::kA, 10), interaction("u", "b1", Domain::kB, 20),
       interaction("u", "a2", Domain::kA, 30), interaction("u", "b2", Domain::kB, 40),
       interaction("u", "a3", Domain::kA, 50)});
  const auto users = build_user_sequences(log, 50);
  const auto inst = build_eval_instances(users, {log.item_count(Domain::kA), log.item_count(Domain::kB)}, 1, 8);
  REQUIRE(inst.size() == 2);
  for (const auto& x : inst) {
    CHECK(x.negatives.size() == 1);
    CHECK(x.negatives[0] != x.target_item);
    if (x.target_domain == Domain::kA) {
      CHECK(x.target_item == log.item_index(Domain::kA, "a3"));
      CHECK(x.history.seq_m.size() == 4);
    } else {
      CHECK(x.target_item == log.item_index(Domain::kB, "b2"));
      CHECK(x.history.seq_m.size() == 3);
    }
  }
}

TEST_CASE("synthetic: domain A is more frequent than domain B") {
  synth::SynthConfig cfg;
  cfg.users = 340;
  const auto log = synth::generate_synthetic(cfg, 3);
  REQUIRE(log.size() >= 10000);
  std::array<std::vector<std::int64_t>, 2> gaps;
  for (const auto& u : build_user_sequences(log, 1000)) {
    for (Domain d : kDomains) {
      const auto& g = u.gaps(view_of(d));
      for (std::size_t k = 1; k < g.size(); ++k) gaps[index_of(d)].push_back(g[k]);
    }
  }
  auto median = [](std::vector<std::int64_t> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
    return v[v.size() / 2];
  };
  CHECK(median(gaps[0]) < median(gaps[1]));
}

TEST_CASE("synthetic: frozen latent keeps the top item fixed") {
  synth::SynthConfig cfg;
  cfg.users = 20;
  cfg.drift_rate = 0.0;
  synth::SynthTrace trace;
  (void)synth::generate_synthetic(cfg, 5, &trace);
  REQUIRE_FALSE(trace.entries.empty());
  std::map<std::pair<std::string, Domain>, int> top;
  for (const auto& e : trace.entries) {
    auto [it, inserted] = top.emplace(std::make_pair(e.user_id, e.domain), e.top_affinity_item);
    if (!inserted) CHECK(it->second == e.top_affinity_item);
  }

  cfg.drift_rate = 0.3;
  synth::SynthTrace drifting;
  (void)synth::generate_synthetic(cfg, 5, &drifting);
  std::map<std::pair<std::string, Domain>, std::set<int>> seen;
  for (const auto& e : drifting.entries) seen[{e.user_id, e.domain}].insert(e.top_affinity_item);
  bool moved = false;
  for (const auto& [k, s] : seen) moved = moved || s.size() > 1;
  CHECK(moved);
}

namespace {

/// Items whose interactions over 8 time bins depart from the pooled time
/// profile at p < 0.001 (chi-square, 7 degrees of freedom).
double concentrated_fraction(const InteractionLog& log, std::int64_t start, double span) {
  constexpr int kBins = 8;
  constexpr double kCritical = 24.322;
  std::map<std::pair<Domain, std::string>, std::array<double, kBins>> counts;
  std::array<double, kBins> pooled{};
  for (const auto& x : log.interactions()) {
    const int b = std::clamp(static_cast<int>(kBins * static_cast<double>(x.timestamp - start) / span), 0, kBins - 1);
    counts[{x.domain, x.item_id}][b] += 1;
    pooled[b] += 1;
  }
  const double total = static_cast<double>(log.size());
  int tested = 0, rejected = 0;
  for (const auto& [item, c] : counts) {
    double n = 0;
    for (double v : c) n += v;
    if (n < 40) continue;
    double chi = 0;
    for (int b = 0; b < kBins; ++b) {
      const double expected = n * pooled[b] / total;
      chi += (c[b] - expected) * (c[b] - expected) / expected;
    }
    ++tested;
    rejected += chi > kCritical ? 1 : 0;
  }
  REQUIRE(tested > 20);
  return static_cast<double>(rejected) / tested;
}

}  // namespace

TEST_CASE("synthetic: no seasonal items means no time-concentrated items") {
  synth::SynthConfig cfg;
  cfg.users = 400;
  cfg.items_a = 60;
  cfg.items_b = 60;
  cfg.drift_rate = 0.0;
  cfg.seasonal_frac = 0.0;
  // every user stays active over the whole span
  cfg.mean_gap_days_a = 48.0;
  cfg.mean_gap_days_b = 48.0;
  const double span = cfg.span_days * 86400.0;
  const double flat = concentrated_fraction(synth::generate_synthetic(cfg, 8), cfg.start_timestamp, span);
  CHECK(flat <= 0.05);

  cfg.seasonal_frac = 0.2;
  const double seasonal = concentrated_fraction(synth::generate_synthetic(cfg, 8), cfg.start_timestamp, span);
  CHECK(seasonal > flat);
}

TEST_CASE("synthetic: determinism and validation") {
  synth::SynthConfig cfg;
  cfg.users = 15;
  std::stringstream a, b;
  write_interactions(synth::generate_synthetic(cfg, 4), a);
  write_interactions(synth::generate_synthetic(cfg, 4), b);
  CHECK(a.str() == b.str());
  std::stringstream c;
  write_interactions(synth::generate_synthetic(cfg, 5), c);
  CHECK(a.str() != c.str());

  cfg.items_a = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("synthetic: titles and config files") {
  synth::SynthConfig cfg;
  cfg.users = 5;
  const auto log = synth::generate_synthetic(cfg, 2);
  const auto& x = log.interactions().front();
  REQUIRE(x.title.has_value());
  CHECK(x.title->rfind(std::string(domain_name(x.domain)) + "/", 0) == 0);
  CHECK(std::count(x.title->begin(), x.title->end(), '/') == 2);

  std::stringstream buf;
  cfg.drift_rate = 0.125;
  synth::write_synth_config(cfg, buf);
  const auto back = synth::parse_synth_config(buf);
  CHECK(back.drift_rate == 0.125);
  CHECK(back.users == 5);

  std::istringstream bad("users = 10\nbogus = 1\n");
  CHECK_THROWS((void)synth::parse_synth_config(bad));
}

TEST_CASE("noise: counts, identity and determinism") {
  const auto log = tcdsr::testing::random_log(50, 20, 30, 6);
  REQUIRE(log.size() == 1000);
  const auto same = inject_noise(log, 0.0, 1);
  CHECK(same.interactions().size() == 1000);
  CHECK(build_user_sequences(same, 1000) == build_user_sequences(log, 1000));

  const auto noisy = inject_noise(log, 0.1, 1);
  CHECK(noisy.size() == 1100);

  std::stringstream a, b;
  write_interactions(inject_noise(log, 0.2, 9), a);
  write_interactions(inject_noise(log, 0.2, 9), b);
  CHECK(a.str() == b.str());
  CHECK_THROWS_AS((void)inject_noise(log, 1.5, 1), std::invalid_argument);
}

TEST_CASE("noise: inserted events stay inside each user's span") {
  const auto log = tcdsr::testing::random_log(10, 10, 8, 2);
  std::map<std::string, std::pair<std::int64_t, std::int64_t>> span;
  for (const auto& x : log.interactions()) {
    auto [it, inserted] = span.emplace(x.user_id, std::make_pair(x.timestamp, x.timestamp));
    it->second.first = std::min(it->second.first, x.timestamp);
    it->second.second = std::max(it->second.second, x.timestamp);
  }
  const auto noisy = inject_noise(log, 0.5, 3);
  CHECK(noisy.size() == 150);
  for (const auto& x : noisy.interactions()) {
    REQUIRE(span.contains(x.user_id));
    CHECK(x.timestamp >= span[x.user_id].first);
    CHECK(x.timestamp <= span[x.user_id].second);
  }
}

TEST_CASE("buckets: equal groups ordered by variance") {
  std::vector<UserSequences> users;
  for (int k = 0; k < 9; ++k) users.push_back(with_gaps("u" + std::to_string(k), {10, 10 + 3 * (8 - k), 10}));
  const auto b = bucket_by_interval_variance(users, 3);
  std::array<int, 3> sizes{};
  for (const auto& [id, bucket] : b) ++sizes[static_cast<std::size_t>(bucket)];
  CHECK(sizes == std::array<int, 3>{3, 3, 3});
  CHECK(b.at("u8") == 0);
  CHECK(b.at("u0") == 2);
}

TEST_CASE("buckets: zero variance and the two-gap example") {
  const auto flat = with_gaps("flat", {10, 10});
  const auto spread = with_gaps("spread", {0, 20});
  CHECK(gap_variance(flat) == doctest::Approx(0.0));
  CHECK(gap_variance(spread) == doctest::Approx(100.0));
  const auto b = bucket_by_interval_variance({spread, flat}, 2);
  CHECK(b.at("flat") == 0);
  CHECK(b.at("spread") == 1);

  const auto tiny = make_user_sequences("tiny", {{1, 0, Domain::kA}, {2, 5, Domain::kA}});
  CHECK_FALSE(gap_variance(tiny).has_value());
  CHECK(bucket_by_interval_variance({tiny, spread, flat}, 3).at("tiny") == 0);
}

TEST_CASE("intervals: ratio bins") {
  std::vector<Interaction> rows;
  for (int k = 0; k < 4; ++k) rows.push_back(interaction("u", "a" + std::to_string(k), Domain::kA, 3600 * k));
  const std::int64_t day = 86400;
  const std::int64_t b0 = 1000000;
  for (std::int64_t t : {b0, b0 + day / 2, b0 + day / 2 + 3 * day, b0 + day / 2 + 13 * day}) {
    rows.push_back(interaction("v", "b" + std::to_string(t), Domain::kB, t));
  }
  const auto r = analyze_intervals(InteractionLog::from_interactions(std::move(rows)));
  REQUIRE(r.ratios[0].has_value());
  REQUIRE(r.ratios[1].has_value());
  CHECK((*r.ratios[0])[0] == doctest::Approx(1.0));
  for (double p : *r.ratios[1]) CHECK(p == doctest::Approx(1.0 / 3.0));
  CHECK(r.gap_counts[1] == 3);
}

TEST_CASE("intervals: proportions sum to one") {
  const auto r = analyze_intervals(tcdsr::testing::random_log(20, 15, 10, 8));
  for (const auto& ratios : r.ratios) {
    REQUIRE(ratios.has_value());
    CHECK(std::abs((*ratios)[0] + (*ratios)[1] + (*ratios)[2] - 1.0) <= 1e-9);
  }
  const auto lonely = analyze_intervals(InteractionLog::from_interactions(
      {interaction("u", "a", Domain::kA, 1), interaction("u", "b", Domain::kA, 2), interaction("u", "c", Domain::kB, 3)}));
  CHECK_FALSE(lonely.ratios[1].has_value());
}
