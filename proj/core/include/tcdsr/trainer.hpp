#pragma once

// Training data assembly, the optimization loop with validation early
// stopping, and the checkpoint container.

#include "tcdsr/eval.hpp"
#include "tcdsr/ingest.hpp"
#include "tcdsr/model.hpp"
#include "tcdsr/semantic_source.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tcdsr::train {

/// One query per mixed position p >= 1 whose target domain already appears in
/// the first p events. `Query::user` is left 0; batches renumber it.
std::vector<model::Query> causal_queries(const ingest::UserSequences& user);

/// PCA over every training prefix encoding of every view.
semantic::PcaProjection fit_projection(const std::vector<ingest::UserSequences>& train, SemanticSource& semantic,
                                       int mid_dim);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;  // mean total over steps
  std::optional<double> valid_mrr;
  bool improved = false;
};

struct StepRecord {
  int epoch = 0;
  int step = 0;
  model::LossParts parts;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  int best_epoch = 0;
  std::optional<double> best_valid_mrr;
  std::string stop_reason;  // max_epochs | early_stop | diverged
  std::string divergence;   // diagnostic when diverged

  [[nodiscard]] bool diverged() const { return stop_reason == "diverged"; }
  [[nodiscard]] nlohmann::json to_json() const;
};

struct TrainOptions {
  /// Candidate count checked during validation scoring; nullopt disables.
  std::optional<std::size_t> expected_candidates = eval::kDefaultCandidates;
  int eval_batch = 256;
  /// Called after each improving epoch with the model at its new best.
  std::function<void(const model::Model&, const EpochRecord&)> on_improvement;
};

/// Adam over the training users (batches of `batch_size` users, every causal
/// position of each). Validation MRR picks the best epoch; training stops
/// after `patience` epochs without improvement. On return the model holds the
/// best parameters. A non-finite loss or parameter stops training with
/// stop_reason "diverged" and the last good parameters restored.
TrainHistory train(model::Model& model, const std::vector<ingest::UserSequences>& train_users,
                   const std::vector<ingest::EvalInstance>& valid, SemanticSource* semantic,
                   const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  model::Model model;
  nlohmann::json meta;
};

/// Binary container: magic, version, JSON header (model config, feature
/// space, encoder width, meta), named parameter matrices, SHA-256 trailer.
/// Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const model::Model& model, const nlohmann::json& meta = {});
/// Throws std::runtime_error on a damaged or incompatible file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tcdsr::train
