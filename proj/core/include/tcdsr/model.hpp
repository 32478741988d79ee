#pragma once

// Model configuration, ablation variants and the joint forward pass:
// per-view behavioral evolution, semantic branch, transfer weights, domain
// prediction heads and the weighted training objective.

#include "tcdsr/autograd.hpp"
#include "tcdsr/encoder.hpp"
#include "tcdsr/evolution.hpp"
#include "tcdsr/ingest.hpp"
#include "tcdsr/semantic.hpp"
#include "tcdsr/temporal.hpp"
#include "tcdsr/transfer.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tcdsr::model {

using ag::Graph;
using ag::Var;

enum class Variant : std::uint8_t {
  kV1,    // single undecoupled state
  kV2,    // dual states + gate
  kV3,    // + semantic branch
  kV4,    // + counterfactual objective
  kV5,    // full model, exact durations in prompts
  kFull,  // + personalized transfer weights
};

inline constexpr std::array<Variant, 6> kVariants{Variant::kV1, Variant::kV2, Variant::kV3,
                                                   Variant::kV4, Variant::kV5, Variant::kFull};

std::string_view variant_name(Variant v);
/// Accepts V1..V5, exact_time (V5) and full; the error lists valid names.
Variant parse_variant(std::string_view s);

/// Semantic-only study: behavioral signals disabled, items scored from z_LLM.
enum class SemanticOnly : std::uint8_t { kOff, kTitleOnly, kTitleTime, kCfEnhance };

std::string_view semantic_only_name(SemanticOnly s);
SemanticOnly parse_semantic_only(std::string_view s);

struct ModelConfig {
  int dim = 256;
  int heads = 2;
  int ffn_mult = 4;
  int max_len = 50;
  int batch_size = 256;
  int epochs = 100;
  int patience = 10;
  double learning_rate = 5e-4;
  double lambda_ode = 0.01;
  double lambda_sem = 0.001;
  double tau_short = 0.2;
  double tau_cf = 0.2;
  int top_k = 5;
  double alpha_small = 0.3;
  double alpha_big = 0.3;
  int d_mid = 512;
  int time_buckets = 512;
  int gap_buckets = 64;
  double gap_scale = 2.0;
  /// Pattern encoder reads gap buckets from the relative-time table.
  bool share_gap_table = false;
  std::uint64_t seed = 42;
  Variant variant = Variant::kFull;
  SemanticOnly semantic_only = SemanticOnly::kOff;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& j);

  [[nodiscard]] bool behavioral() const { return semantic_only == SemanticOnly::kOff; }
  [[nodiscard]] bool dual_state() const { return behavioral() && variant != Variant::kV1; }
  [[nodiscard]] bool uses_semantic() const;
  [[nodiscard]] bool uses_counterfactual() const;
  [[nodiscard]] bool personalized_transfer() const;
  [[nodiscard]] semantic::GapStyle prompt_style() const;
};

/// Everything fitted on the training split that the forward pass depends on.
struct FeatureSpace {
  std::array<int, 2> item_counts{0, 0};
  temporal::GapBucketizer bucketizer;
  std::array<temporal::IntervalNormalizer, 3> normalizers;
  encoder::AbsoluteTimeMapper absolute;

  static FeatureSpace fit(const std::vector<ingest::UserSequences>& train, const std::array<int, 2>& item_counts,
                          const ModelConfig& cfg);
  [[nodiscard]] encoder::TimeFeatures time_features(View v) const {
    return {&bucketizer, &normalizers[index_of(v)], &absolute};
  }
  [[nodiscard]] nlohmann::json to_json() const;
  static FeatureSpace from_json(const nlohmann::json& j);
};

/// Predict domain-D item `target` of user `user` from the first `history`
/// mixed events.
struct Query {
  int user = 0;
  int history = 0;
  Domain domain = Domain::kA;
  int target = 0;
};

/// Raw text-encoder states of a user's full-sequence prompt and its two
/// counterfactuals for one view.
struct CounterfactualInput {
  int user = 0;
  View view = View::kMixed;
  ag::RowVector original, small, big;
};

struct BatchInput {
  std::vector<const ingest::UserSequences*> users;
  /// Per user and view: prefix encodings (row k = first k + 1 events). May
  /// hold more rows than the view; only the leading rows are read.
  std::vector<std::array<const ag::Matrix*, 3>> semantic;
  std::vector<Query> queries;
  std::vector<CounterfactualInput> counterfactuals;
  /// Skips the regularizers (L_ODE, L_sem); used when only scores are needed.
  bool scoring_only = false;
};

struct LossParts {
  double main = 0, main_a = 0, main_b = 0;
  std::array<double, 3> long_reg{0, 0, 0};
  std::array<double, 3> short_reg{0, 0, 0};
  std::array<double, 3> counterfactual{0, 0, 0};
  double ode = 0, sem = 0, total = 0;

  [[nodiscard]] nlohmann::json to_json() const;
};

struct ForwardResult {
  std::array<Var, 2> logits;                     // per domain: queries x items
  std::array<std::vector<int>, 2> query_ids;     // rows of logits -> BatchInput::queries
  std::array<Var, 2> transfer_weight;            // per domain: queries x 1
  Var main, ode, sem, total;
  LossParts parts;
};

/// L_main + λ1 L_ODE + λ2 L_sem; throws std::runtime_error naming the first
/// non-finite part.
double total_loss(double main, double ode, double sem, double lambda_ode, double lambda_sem);

/// softmax((w o + (1 - w) r) W) for one row; used by tests and tools.
ag::Matrix predict(const ag::Matrix& o, const ag::Matrix& r, double w, const ag::Matrix& head);

/// Mean cross-entropy per domain, summed over domains with targets.
/// Targets are 1-based item indices.
Var main_loss(Graph& g, const std::array<Var, 2>& logits, const std::array<std::vector<int>, 2>& targets,
              std::array<double, 2>* per_domain = nullptr);

class Model {
 public:
  /// `llm_dim` is the text-encoder width (ignored when the variant has no
  /// semantic branch).
  Model(ModelConfig cfg, FeatureSpace features, int llm_dim);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] const FeatureSpace& features() const { return features_; }
  ag::ParameterStore& store() { return store_; }
  [[nodiscard]] const ag::ParameterStore& store() const { return store_; }
  [[nodiscard]] int llm_dim() const { return llm_dim_; }
  [[nodiscard]] int mid_dim() const { return mid_dim_; }

  /// Installs the frozen PCA components (D_LLM x D_Mid).
  void set_projection(const semantic::PcaProjection& pca);
  /// Re-zeroes padding rows of embedding tables after an update.
  void after_update();

  ForwardResult forward(Graph& g, const BatchInput& in) const;

  /// Fusion gate at the last event of each user's domain view (rows with an
  /// empty view are absent; `present` lists the users kept).
  ag::Matrix final_fusion_gates(const std::vector<const ingest::UserSequences*>& users, Domain d,
                                std::vector<int>* present = nullptr) const;

 private:
  struct ViewOutputs {
    bool active = false;
    encoder::SequenceBatch batch;
    Var embedded, z, h_long, h_short, semantic, pattern;
  };

  ViewOutputs run_view(Graph& g, const BatchInput& in, View v) const;
  Var semantic_rows(Graph& g, const BatchInput& in, const encoder::SequenceBatch& batch, View v) const;
  Var project(Graph& g, const ag::Matrix& raw) const;

  ModelConfig cfg_;
  FeatureSpace features_;
  int llm_dim_ = 0;
  int mid_dim_ = 0;
  ag::ParameterStore store_;

  encoder::EmbeddingTables tables_;
  std::array<encoder::PreferenceEncoder, 3> encoders_;
  std::array<evolution::DualEvolution, 3> dual_;
  std::array<evolution::SingleEvolution, 3> single_;
  semantic::Adapter adapter_;
  ag::Parameter* pca_ = nullptr;
  transfer::PatternEncoder pattern_;
  transfer::TransferGate gate_;
  std::array<ag::Parameter*, 2> global_logit_{};
  std::array<ag::Parameter*, 2> heads_{};
};

}  // namespace tcdsr::model
