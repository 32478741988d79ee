#pragma once

// Ranking metrics over sampled candidates, batched scoring of evaluation
// instances and metric reports.

#include "tcdsr/ingest.hpp"
#include "tcdsr/model.hpp"
#include "tcdsr/semantic_source.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tcdsr::eval {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr std::size_t kDefaultCandidates = 1000;

struct InstanceMetrics {
  int rank = 0;
  double mrr = 0, ndcg5 = 0, ndcg10 = 0, hr1 = 0, hr5 = 0, hr10 = 0;
};

/// Rank of scores[positive] among all candidates; ties place the positive
/// last. Throws std::invalid_argument when `expected_size` is set and differs
/// from the vector length.
InstanceMetrics rank_metrics(std::span<const double> scores, std::size_t positive,
                             std::optional<std::size_t> expected_size = kDefaultCandidates);

struct DomainMetrics {
  double mrr = 0, ndcg5 = 0, ndcg10 = 0, hr1 = 0, hr5 = 0, hr10 = 0;
  std::size_t count = 0;

  static DomainMetrics mean_of(std::span<const InstanceMetrics> rows);
  [[nodiscard]] nlohmann::json to_json() const;
  static DomainMetrics from_json(const nlohmann::json& j);
};

struct MetricReport {
  std::string config_hash;
  std::map<std::string, DomainMetrics> domains;  // "A", "B" (when present), "overall"
  /// bucket -> domain -> metrics
  std::optional<std::map<int, std::map<std::string, DomainMetrics>>> buckets;

  [[nodiscard]] nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  [[nodiscard]] double mrr(const std::string& domain = "overall") const { return domains.at(domain).mrr; }
};

/// Scores of one instance's candidates: index 0 the target, then negatives.
struct ScoredInstance {
  std::vector<double> scores;
};

/// Model scores for every instance's candidate list, batched.
std::vector<ScoredInstance> score_instances(const model::Model& model, train::SemanticSource* semantic,
                                            const std::vector<ingest::EvalInstance>& instances, int batch_size);

/// Per-instance metrics from precomputed candidate scores.
std::vector<InstanceMetrics> metrics_of(const std::vector<ScoredInstance>& scored,
                                        std::optional<std::size_t> expected_size);

/// Aggregates per-instance metrics into a report. `buckets` maps user_id to a
/// bucket. Throws std::invalid_argument when there are no instances.
MetricReport build_report(const std::vector<ingest::EvalInstance>& instances,
                          const std::vector<InstanceMetrics>& metrics, const std::string& config_hash,
                          const std::map<std::string, int>* buckets = nullptr);

struct EvaluateOptions {
  std::optional<std::size_t> expected_candidates = kDefaultCandidates;
  int batch_size = 256;
  std::string config_hash;
  const std::map<std::string, int>* buckets = nullptr;
};

MetricReport evaluate(const model::Model& model, train::SemanticSource* semantic,
                      const std::vector<ingest::EvalInstance>& instances, const EvaluateOptions& options);

/// evaluate() for a model trained in a semantic-only mode; throws when the
/// model still uses behavioral signals.
MetricReport semantic_only_evaluate(const model::Model& model, train::SemanticSource& semantic,
                                    const std::vector<ingest::EvalInstance>& instances,
                                    const EvaluateOptions& options);

/// Fusion gates at each sampled user's final domain event (users x d per
/// domain), with the user ids kept per domain.
struct FusionWeights {
  std::array<std::vector<std::string>, 2> users;
  std::array<ag::Matrix, 2> weights;

  [[nodiscard]] nlohmann::json to_json() const;
};

FusionWeights export_fusion_weights(const model::Model& model, const std::vector<ingest::UserSequences>& users,
                                    std::size_t sample_size, std::uint64_t seed);

}  // namespace tcdsr::eval
