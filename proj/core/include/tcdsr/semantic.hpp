#pragma once

// Time-aware semantic preferences: prompts with domain and gap tokens,
// counterfactual gap-token perturbation, PCA + adapter projection of frozen
// text-encoder states, and the ranking-based counterfactual objective.

#include "tcdsr/autograd.hpp"
#include "tcdsr/ingest.hpp"
#include "tcdsr/layers.hpp"
#include "tcdsr/random.hpp"
#include "tcdsr/temporal.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace tcdsr::semantic {

inline constexpr std::string_view kPromptPrefix =
    "You will act as a time-aware preference interpreter. Please extract the time-aware semantic preferences "
    "from the following interaction sequence:";

/// How intervals between interactions appear in the prompt.
enum class GapStyle : std::uint8_t {
  kTokens,     // discrete gap tokens, e.g. "[1–3d]"
  kExactTime,  // raw durations, e.g. "5 days"
  kNone,       // titles only
};

std::string_view gap_style_name(GapStyle s);
GapStyle parse_gap_style(std::string_view s);

struct PromptItem {
  Domain domain = Domain::kA;
  std::string title;
};

/// Interactions plus the gaps between consecutive ones (gaps.size() ==
/// items.size() - 1). Gap seconds travel with the tokens so exact-time
/// prompts can render perturbed intervals.
struct Prompt {
  std::vector<PromptItem> items;
  std::vector<temporal::GapToken> gaps;
  std::vector<std::int64_t> gap_seconds;
  GapStyle style = GapStyle::kTokens;

  /// Prefix, a space, then "[A_Domain] Title [gap] [B_Domain] Title ...".
  [[nodiscard]] std::string render() const { return render_prefix(items.size()); }
  /// Rendering of the first n interactions.
  [[nodiscard]] std::string render_prefix(std::size_t n) const;
  /// Text standing for gap k between items k and k + 1.
  [[nodiscard]] std::string gap_text(std::size_t k) const;
};

std::string domain_token(Domain d);
/// "45 minutes", "1 hour", "5 days".
std::string exact_duration(std::int64_t seconds);

/// Builds from literal titles and the gaps between consecutive items.
/// Throws std::invalid_argument for an empty sequence or a size mismatch.
Prompt make_prompt(std::vector<PromptItem> items, const std::vector<std::int64_t>& gaps_between, GapStyle style);

/// Builds from a view's events; missing titles fall back to the item id.
Prompt build_prompt(const std::vector<ingest::Event>& events, const ingest::InteractionLog& log, GapStyle style);

enum class PerturbMode : std::uint8_t { kSmall, kBig };

struct PerturbStats {
  std::size_t eligible = 0;
  std::size_t replaced = 0;
};

/// Replaces each gap token independently with probability alpha: within its
/// duration group (small) or with a token of another group (big). Titles
/// and domains are untouched. Throws for prompts without gap tokens.
Prompt perturb(const Prompt& prompt, PerturbMode mode, double alpha, Rng& rng, PerturbStats* stats = nullptr);

struct CounterfactualPair {
  Prompt small, big;
};

/// Deterministic pair for one user and view, seeded from `seed` and a label.
CounterfactualPair make_counterfactuals(const Prompt& prompt, double alpha_small, double alpha_big,
                                        std::uint64_t seed, std::string_view label);

/// Principal directions of a corpus (rows are samples). Projection multiplies
/// by the component matrix without re-centering, so zero maps to zero.
struct PcaProjection {
  ag::Matrix components;           // D_LLM x D_Mid, orthonormal columns
  ag::Vector explained_variance;   // D_Mid, descending
  ag::Vector total_variance;       // 1-vector: trace of the covariance
  ag::RowVector mean;

  /// Throws std::invalid_argument when the corpus has fewer rows than
  /// `mid` or `mid` exceeds the input width.
  static PcaProjection fit(const ag::Matrix& corpus, int mid);
  [[nodiscard]] ag::Matrix apply(const ag::Matrix& x) const;
  [[nodiscard]] int input_dim() const { return static_cast<int>(components.rows()); }
  [[nodiscard]] int output_dim() const { return static_cast<int>(components.cols()); }
};

/// Trainable D_Mid -> d map applied after PCA.
struct Adapter {
  nn::Mlp2 mlp;

  Adapter() = default;
  Adapter(ag::ParameterStore& store, const std::string& name, int mid, int dim, Rng& rng)
      : mlp(store, name, mid, dim, dim, nn::Activation::kGelu, rng) {}
  ag::Var operator()(ag::Graph& g, ag::Var projected) const { return mlp(g, projected); }
};

/// L1 + L2 averaged over rows (users). K is lowered to n - 1 when the batch
/// is too small; with a single row L2 is 0.
ag::Var counterfactual_loss(ag::Graph& g, ag::Var z, ag::Var z_small, ag::Var z_big, double tau, int top_k);

}  // namespace tcdsr::semantic
