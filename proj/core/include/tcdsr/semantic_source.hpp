#pragma once

// Memoized prefix encodings and counterfactual encodings of user views.

#include "tcdsr/ingest.hpp"
#include "tcdsr/model.hpp"
#include "tcdsr/semantic.hpp"
#include "tcdsr/text_encoder.hpp"

#include <optional>
#include <string>
#include <unordered_map>

namespace tcdsr::train {

class SemanticSource {
 public:
  SemanticSource(semantic::TextEncoder& encoder, const ingest::InteractionLog& log, semantic::GapStyle style);

  /// Row k encodes the prompt of the view's first k + 1 events. Empty views
  /// give a 0-row matrix. The reference stays valid for the source's lifetime.
  const ag::Matrix& prefixes(const ingest::UserSequences& user, View v);

  /// Encodings of the view's full prompt and its two counterfactuals;
  /// nullopt when the view has fewer than two events (no gap to perturb).
  std::optional<model::CounterfactualInput> counterfactual(const ingest::UserSequences& user, View v,
                                                           double alpha_small, double alpha_big, std::uint64_t seed);

  [[nodiscard]] int dim() const { return encoder_.dim(); }
  [[nodiscard]] semantic::GapStyle style() const { return style_; }

 private:
  semantic::TextEncoder& encoder_;
  const ingest::InteractionLog& log_;
  semantic::GapStyle style_;
  std::unordered_map<std::string, ag::Matrix> memo_;
};

/// Identity of a view prefix: user, view, length and last event.
std::string prefix_key(const ingest::UserSequences& user, View v);

}  // namespace tcdsr::train
