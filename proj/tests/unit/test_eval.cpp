#include "tcdsr/eval.hpp"
#include "tcdsr/trainer.hpp"

#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace tcdsr;
using namespace tcdsr::eval;

namespace {

/// Training options without the candidate-count check.
train::TrainOptions unchecked() {
  train::TrainOptions o;
  o.expected_candidates = std::nullopt;
  return o;
}

/// Rank by sorting: descending score, the positive after every tie.
int oracle_rank(const std::vector<double>& scores, std::size_t positive) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a != positive && b == positive;
  });
  return static_cast<int>(std::find(order.begin(), order.end(), positive) - order.begin()) + 1;
}

ingest::EvalInstance instance(const std::string& user, Domain d) {
  ingest::EvalInstance e;
  e.history = ingest::make_user_sequences(user, {{1, 1, d}});
  e.target_domain = d;
  e.target_item = 1;
  return e;
}

InstanceMetrics with_rank(int rank) {
  std::vector<double> s(20, 0.0);
  for (int i = 1; i < rank; ++i) s[static_cast<std::size_t>(i)] = 2.0;
  s[0] = 1.0;
  return rank_metrics(s, 0, std::nullopt);
}

model::ModelConfig tiny(model::Variant v) {
  model::ModelConfig c;
  c.dim = 8;
  c.heads = 2;
  c.max_len = 8;
  c.batch_size = 8;
  c.epochs = 2;
  c.learning_rate = 0.01;
  c.d_mid = 6;
  c.time_buckets = 8;
  c.gap_buckets = 16;
  c.top_k = 2;
  c.variant = v;
  return c;
}

struct Trained {
  ingest::InteractionLog log = testing::random_log(16, 8, 12, 23);
  std::vector<ingest::UserSequences> users = ingest::build_user_sequences(log, 8);
  std::array<int, 2> counts{log.item_count(Domain::kA), log.item_count(Domain::kB)};
  semantic::StubEncoder stub{12};
  model::ModelConfig cfg;
  train::SemanticSource src;
  model::Model model;
  std::vector<ingest::EvalInstance> instances;

  explicit Trained(model::ModelConfig c)
      : cfg(c),
        src(stub, log, c.prompt_style()),
        model(c, model::FeatureSpace::fit(users, counts, c), stub.dim()),
        instances(ingest::build_eval_instances(users, counts, 9, 4)) {
    (void)train::train(model, users, {}, &src, unchecked());
  }
};

}  // namespace

TEST_CASE("rank metrics: examples") {
  const std::vector<double> s{0.9, 0.5, 0.95};
  const auto m = rank_metrics(s, 0, std::nullopt);
  CHECK(m.rank == 2);
  CHECK(m.mrr == doctest::Approx(0.5));
  CHECK(m.ndcg5 == doctest::Approx(1.0 / std::log2(3.0)));
  CHECK(m.hr1 == 0.0);
  CHECK(m.hr5 == 1.0);

  const auto top = rank_metrics(s, 2, std::nullopt);
  CHECK(top.rank == 1);
  CHECK(top.ndcg10 == doctest::Approx(1.0));
  CHECK(top.hr1 == 1.0);

  const auto far = with_rank(11);
  CHECK(far.hr10 == 0.0);
  CHECK(far.ndcg10 == 0.0);
  CHECK(far.mrr == doctest::Approx(1.0 / 11));
  CHECK(with_rank(6).ndcg5 == 0.0);
  CHECK(with_rank(6).ndcg10 == doctest::Approx(1.0 / std::log2(7.0)));
}

TEST_CASE("rank metrics: ties rank the positive last") {
  const std::vector<double> s{1.0, 1.0, 1.0, 0.0};
  CHECK(rank_metrics(s, 0, std::nullopt).rank == 3);
  CHECK(rank_metrics(s, 3, std::nullopt).rank == 4);
}

TEST_CASE("rank metrics: candidate count and bad input") {
  const std::vector<double> s(1000, 0.0);
  CHECK(rank_metrics(s, 0).rank == 1000);
  const std::vector<double> short_list(999, 0.0);
  CHECK_THROWS_AS((void)rank_metrics(short_list, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)rank_metrics(short_list, 999, std::nullopt), std::invalid_argument);
  const std::vector<double> nan{std::nan(""), 1.0};
  CHECK_THROWS_AS((void)rank_metrics(nan, 0, std::nullopt), std::invalid_argument);
}

TEST_CASE("invariant: rank matches a sorting oracle on tied integer scores") {
  Rng rng(9);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 30);
    std::vector<double> s(n);
    for (auto& x : s) x = static_cast<double>(uniform_index(rng, 6));
    const std::size_t pos = uniform_index(rng, n);
    const auto m = rank_metrics(s, pos, std::nullopt);
    CHECK(m.rank == oracle_rank(s, pos));
    CHECK(m.mrr == doctest::Approx(1.0 / m.rank));
  }
}

TEST_CASE("invariant: raising the positive never hurts; affine maps and shuffles change nothing") {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(25);
    for (auto& x : s) x = standard_normal(rng);
    const auto base = rank_metrics(s, 0, std::nullopt);

    auto raised = s;
    raised[0] += std::abs(standard_normal(rng));
    CHECK(rank_metrics(raised, 0, std::nullopt).rank <= base.rank);

    auto mapped = s;
    for (auto& x : mapped) x = 3.0 * x + 7.0;
    CHECK(rank_metrics(mapped, 0, std::nullopt).rank == base.rank);

    std::vector<double> tail(s.begin() + 1, s.end());
    shuffle_in_place(tail, rng);
    std::copy(tail.begin(), tail.end(), s.begin() + 1);
    CHECK(rank_metrics(s, 0, std::nullopt).rank == base.rank);
  }
}

TEST_CASE("report: per-domain and overall means") {
  const std::vector<ingest::EvalInstance> inst{instance("a", Domain::kA), instance("b", Domain::kA),
                                               instance("c", Domain::kB)};
  const std::vector<InstanceMetrics> m{with_rank(1), with_rank(2), with_rank(4)};
  const auto r = build_report(inst, m, "abc");
  CHECK(r.mrr("A") == doctest::Approx(0.75));
  CHECK(r.mrr("B") == doctest::Approx(0.25));
  CHECK(r.mrr() == doctest::Approx((1.0 + 0.5 + 0.25) / 3));
  CHECK(r.domains.at("A").count == 2);
  CHECK(r.domains.at("overall").hr1 == doctest::Approx(1.0 / 3));
  CHECK_FALSE(r.buckets.has_value());

  const auto a_only = build_report({inst[0]}, {m[0]}, "abc");
  CHECK(a_only.domains.count("B") == 0);
  CHECK(a_only.domains.size() == 2);

  const auto j = r.to_json();
  CHECK(j.at("schema_version") == kReportSchemaVersion);
  CHECK(j.at("domains").at("A").at("MRR") == doctest::Approx(0.75));
  const auto back = MetricReport::from_json(j);
  CHECK(back.to_json() == j);
  auto wrong = j;
  wrong["schema_version"] = 99;
  CHECK_THROWS_AS((void)MetricReport::from_json(wrong), std::invalid_argument);

  CHECK_THROWS_AS((void)build_report({}, {}, "abc"), std::invalid_argument);
  CHECK_THROWS_AS((void)build_report(inst, {m[0]}, "abc"), std::invalid_argument);
}

TEST_CASE("report: interval-variance buckets") {
  const std::vector<ingest::EvalInstance> inst{instance("a", Domain::kA), instance("b", Domain::kB),
                                               instance("c", Domain::kA)};
  const std::vector<InstanceMetrics> m{with_rank(1), with_rank(2), with_rank(5)};
  const std::map<std::string, int> buckets{{"a", 0}, {"b", 0}, {"c", 2}};
  const auto r = build_report(inst, m, "h", &buckets);
  REQUIRE(r.buckets.has_value());
  CHECK(r.buckets->size() == 2);
  CHECK(r.buckets->at(0).at("overall").mrr == doctest::Approx(0.75));
  CHECK(r.buckets->at(0).at("B").mrr == doctest::Approx(0.5));
  CHECK(r.buckets->at(2).at("A").mrr == doctest::Approx(0.2));
  CHECK(r.buckets->at(2).count("B") == 0);
  CHECK(MetricReport::from_json(r.to_json()).to_json() == r.to_json());

  const std::map<std::string, int> partial{{"a", 0}};
  CHECK_THROWS_AS((void)build_report(inst, m, "h", &partial), std::invalid_argument);
}

TEST_CASE("evaluate: scores match the candidate lists and do not depend on batching") {
  Trained t(tiny(model::Variant::kFull));
  REQUIRE(!t.instances.empty());
  const auto scored = score_instances(t.model, &t.src, t.instances, 5);
  REQUIRE(scored.size() == t.instances.size());
  for (const auto& s : scored) CHECK(s.scores.size() == 10);

  EvaluateOptions o;
  o.expected_candidates = 10;
  o.config_hash = "h";
  o.batch_size = 1;
  const auto one = evaluate(t.model, &t.src, t.instances, o).to_json();
  o.batch_size = 64;
  CHECK(evaluate(t.model, &t.src, t.instances, o).to_json() == one);
  o.expected_candidates = 1000;
  CHECK_THROWS_AS((void)evaluate(t.model, &t.src, t.instances, o), std::invalid_argument);
  CHECK_THROWS_AS((void)score_instances(t.model, nullptr, t.instances, 4), std::invalid_argument);
  CHECK_THROWS_AS((void)semantic_only_evaluate(t.model, t.src, t.instances, o), std::invalid_argument);
}

TEST_CASE("fusion weights: sampled users, gate range and determinism") {
  Trained t(tiny(model::Variant::kV2));
  const auto f = export_fusion_weights(t.model, t.users, 5, 1);
  for (int d = 0; d < 2; ++d) {
    CHECK(f.users[d].size() <= 5);
    CHECK(f.weights[d].rows() == static_cast<Eigen::Index>(f.users[d].size()));
    CHECK(f.weights[d].cols() == 8);
    if (f.weights[d].size() > 0) {
      CHECK(f.weights[d].minCoeff() > 0.0);
      CHECK(f.weights[d].maxCoeff() < 1.0);
    }
  }
  CHECK(f.users[0].size() + f.users[1].size() > 0);
  CHECK(export_fusion_weights(t.model, t.users, 5, 1).to_json() == f.to_json());
  const auto all = export_fusion_weights(t.model, t.users, 1000, 1);
  CHECK(all.users[0].size() + all.users[1].size() >= f.users[0].size() + f.users[1].size());
  CHECK(f.to_json().at("A").at("weights").size() == f.users[0].size());
}

TEST_CASE("semantic-only models score from text alone") {
  auto c = tiny(model::Variant::kFull);
  c.semantic_only = model::SemanticOnly::kTitleTime;
  Trained t(c);
  CHECK_FALSE(t.model.config().behavioral());
  EvaluateOptions o;
  o.expected_candidates = 10;
  const auto r = semantic_only_evaluate(t.model, t.src, t.instances, o);
  CHECK(r.domains.at("overall").count == t.instances.size());
  CHECK(r.mrr() > 0.0);
  CHECK(r.mrr() <= 1.0);
}
