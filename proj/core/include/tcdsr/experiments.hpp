#pragma once

// Experiment suites: ablation variants, noise ratios, interval-variance
// buckets, semantic-only modes and interval-ratio analytics. Each suite runs
// its sub-runs through the pipeline and writes results.json plus an SVG
// chart under <out>/suites/<suite>-<hash>/.

#include "tcdsr/eval.hpp"
#include "tcdsr/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tcdsr::pipeline {

inline constexpr std::array<std::string_view, 5> kSuites{"ablation", "noise", "buckets", "semantic", "intervals"};
inline constexpr std::array<double, 3> kNoiseRatios{0.0, 0.1, 0.2};

struct SuiteOptions {
  /// Model seeds; each sub-run is repeated once per seed.
  std::vector<std::uint64_t> seeds{42};
};

struct SuiteRow {
  std::string label;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::optional<eval::MetricReport> report;
  std::string error;
};

struct SuiteResult {
  std::string suite;
  std::string base_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<SuiteRow> rows;
  nlohmann::json summary;
  std::filesystem::path dir;

  [[nodiscard]] nlohmann::json to_json() const;
  /// MRR of one sub-run, nullopt when it failed or is absent.
  [[nodiscard]] std::optional<double> mrr(const std::string& label, std::uint64_t seed,
                                          const std::string& domain = "overall") const;
  /// Mean MRR over the seeds that completed; throws when none did.
  [[nodiscard]] double mean_mrr(const std::string& label, const std::string& domain = "overall") const;
  [[nodiscard]] std::size_t failures() const;
};

/// Runs the named suite. Sub-run failures are recorded and the remaining
/// sub-runs still execute; results are written before a std::runtime_error
/// reports the failures.
SuiteResult run_experiment_suite(std::string_view name, const RunConfig& base, const Workspace& ws,
                                 const SuiteOptions& options);

}  // namespace tcdsr::pipeline
