#pragma once

// Run configuration and the prepare -> train -> evaluate artifact pipeline.
//
// A run lives in <out>/<config hash>/. Each stage writes a marker once its
// artifacts are complete; a later invocation with the same config skips the
// stage unless forced.

#include "tcdsr/eval.hpp"
#include "tcdsr/ingest.hpp"
#include "tcdsr/model.hpp"
#include "tcdsr/synthetic.hpp"
#include "tcdsr/text_encoder.hpp"
#include "tcdsr/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tcdsr::pipeline {

struct EncoderConfig {
  std::string backend = "stub";  // stub | remote
  int dim = semantic::StubEncoder::kDefaultDim;
  std::uint64_t seed = 7;
  double memory = 0.85;
};

struct RunConfig {
  std::optional<synth::SynthConfig> synthetic = synth::SynthConfig{};
  std::optional<std::string> data_path;  // JSON-lines interaction log
  ingest::SplitSpec split{0.8, 0.1, 0.1, 0};
  int eval_negatives = 999;
  std::uint64_t eval_seed = 7;
  int eval_batch = 256;
  double noise = 0.0;
  std::uint64_t noise_seed = 11;
  model::ModelConfig model;
  EncoderConfig encoder;

  void validate() const;
  /// Fully resolved form; every default is written out.
  [[nodiscard]] nlohmann::json to_json() const;
  /// Missing keys keep defaults; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
  /// First 16 hex digits of SHA-256 over the canonical (key-sorted) dump.
  [[nodiscard]] std::string hash() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

/// Applies `dotted.key=value` overrides. Values parse as JSON when possible
/// and as plain strings otherwise. Throws std::invalid_argument when malformed.
RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides);

/// Raised when a stage runs before the stage it depends on.
class MissingPrerequisite : public std::runtime_error {
 public:
  MissingPrerequisite(const std::string& what, std::string command)
      : std::runtime_error(what), command_(std::move(command)) {}
  [[nodiscard]] const std::string& command() const { return command_; }

 private:
  std::string command_;
};

struct Workspace {
  std::filesystem::path out = "runs";
  /// Embedding-cache directory; TCDSR_CACHE_DIR, else <out>/cache.
  std::filesystem::path cache_dir;
  bool force = false;

  static Workspace resolve(std::filesystem::path out, bool force);
};

struct RunPaths {
  std::filesystem::path root;

  static RunPaths of(const Workspace& ws, const RunConfig& cfg) { return {ws.out / cfg.hash()}; }
  [[nodiscard]] std::filesystem::path config() const { return root / "config.json"; }
  [[nodiscard]] std::filesystem::path data() const { return root / "data"; }
  [[nodiscard]] std::filesystem::path prepared_marker() const { return data() / "prepared.json"; }
  [[nodiscard]] std::filesystem::path checkpoint() const { return root / "checkpoint.bin"; }
  [[nodiscard]] std::filesystem::path history() const { return root / "history.json"; }
  [[nodiscard]] std::filesystem::path trained_marker() const { return root / "trained.json"; }
  [[nodiscard]] std::filesystem::path report() const { return root / "report.json"; }
};

enum class StageStatus { kRan, kSkipped };

struct PreparedData {
  ingest::InteractionLog log;
  ingest::DatasetSplit split;
  std::vector<ingest::EvalInstance> valid, test;
  std::array<int, 2> item_counts{0, 0};
};

/// Text encoder for the configured backend.
std::unique_ptr<semantic::TextEncoder> make_encoder(const EncoderConfig& cfg);

/// Encoder plus its persistent cache, kept together for a stage.
class EncoderStack {
 public:
  EncoderStack(const EncoderConfig& cfg, const std::filesystem::path& cache_dir);
  semantic::TextEncoder& encoder() { return *cached_; }
  [[nodiscard]] const semantic::CachedEncoder& cached() const { return *cached_; }
  [[nodiscard]] const semantic::EmbeddingCache& cache() const { return *cache_; }

 private:
  std::unique_ptr<semantic::TextEncoder> inner_;
  std::unique_ptr<semantic::EmbeddingCache> cache_;
  std::unique_ptr<semantic::CachedEncoder> cached_;
};

/// Builds the dataset: interaction log (training users noised when
/// configured), split, evaluation instances, prompts, counterfactual prompts
/// and the embedding cache.
StageStatus prepare(const RunConfig& cfg, const Workspace& ws);
PreparedData load_prepared(const RunConfig& cfg, const Workspace& ws);

/// Trains and writes the checkpoint and history. Throws MissingPrerequisite
/// before prepare, and std::runtime_error after a divergence (the last good
/// checkpoint is kept on disk).
StageStatus train(const RunConfig& cfg, const Workspace& ws);

/// Test-split report; with `bucketed`, per interval-variance bucket tables
/// are included (3 buckets over the test users).
eval::MetricReport evaluate(const RunConfig& cfg, const Workspace& ws, bool bucketed = false,
                            StageStatus* status = nullptr);

/// prepare, train and evaluate in turn.
eval::MetricReport run_all(const RunConfig& cfg, const Workspace& ws);

eval::FusionWeights export_weights(const RunConfig& cfg, const Workspace& ws, std::size_t sample_size);

/// Writes `j` (pretty-printed, trailing newline) through a temporary file.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace tcdsr::pipeline
