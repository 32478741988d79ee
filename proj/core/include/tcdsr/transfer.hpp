#pragma once

// Time-preference guided transfer: domain-aware temporal patterns encoded by
// self-attention, cross-domain preference factors, and per-domain sigmoid
// transfer weights.

#include "tcdsr/autograd.hpp"
#include "tcdsr/ingest.hpp"
#include "tcdsr/layers.hpp"
#include "tcdsr/temporal.hpp"

#include <array>
#include <span>
#include <string>
#include <vector>

namespace tcdsr::transfer {

using ag::Graph;
using ag::Var;

struct PatternStep {
  Domain domain = Domain::kA;
  int bucket = 0;

  friend bool operator==(const PatternStep&, const PatternStep&) = default;
};

using TemporalPattern = std::vector<PatternStep>;

/// (domain flag, gap bucket) per event for the A, B and mixed views.
std::array<TemporalPattern, 3> build_temporal_pattern(const ingest::UserSequences& user,
                                                      const temporal::GapBucketizer& bucketizer);

/// Domain-flag table, gap-bucket table and positions, one residual causal
/// self-attention layer, then a mean over real positions.
struct PatternEncoder {
  ag::Parameter* domain_table = nullptr;    // 2 x d
  ag::Parameter* bucket_table = nullptr;    // |P| x d, or the shared relative-time table
  ag::Parameter* position_table = nullptr;  // max_len x d
  int bucket_offset = 0;                    // 1 when reading the relative-time table
  nn::MultiHeadSelfAttention attention;

  PatternEncoder() = default;
  /// With `shared_buckets` (the (|P| + 1) x d relative-time table) no
  /// dedicated bucket table is created.
  PatternEncoder(ag::ParameterStore& store, const std::string& name, int dim, int heads, int bucket_count,
                 int max_len, Rng& rng, ag::Parameter* shared_buckets = nullptr);

  /// Row (b, t) holds the pooled encoding of pattern b's first t + 1 steps;
  /// padding rows are zero. Empty patterns give zero rows.
  Var encode_prefixes(Graph& g, std::span<const TemporalPattern* const> patterns, int stride) const;
  /// Pooled encoding of a whole pattern (1 x d); zero for an empty pattern.
  Var encode(Graph& g, const TemporalPattern& pattern) const;

 private:
  Var attend(Graph& g, std::span<const TemporalPattern* const> patterns, const nn::StackedLayout& layout) const;
};

/// Row combinations for cumulative averages of the rows of a stacked
/// mixed sequence that belong to `domain` (empty pools give zero rows).
std::vector<ag::RowCombination> cumulative_domain_means(const nn::StackedLayout& layout,
                                                        const std::vector<Domain>& domains, Domain domain);

/// r_D = mean of the mixed-view rows whose event is in D, plus the mixed
/// semantic vector (pass an invalid Var to omit it). Z is N x d for one
/// sequence; the result is 1 x d.
std::array<Var, 2> preference_factors(Var z_mixed, const std::vector<Domain>& domains, Var z_llm_mixed);

/// w_D = σ(f_gate([W_t^D [u_D, u_M], W_r^D [r_D, r_other]])).
struct TransferGate {
  std::array<nn::Linear, 2> temporal;    // W_t^A, W_t^B: 2d -> d
  std::array<nn::Linear, 2> preference;  // W_r^A, W_r^B: 2d -> d
  nn::Mlp2 gate;                         // shared f_gate: 2d -> d -> 1

  TransferGate() = default;
  TransferGate(ag::ParameterStore& store, const std::string& name, int dim, Rng& rng);

  /// Row-wise weights (n x 1) for domain D. `r_other` is the factor of the
  /// other domain; u_other never enters.
  Var weight(Graph& g, Domain d, Var u_domain, Var u_mixed, Var r_domain, Var r_other) const;
};

}  // namespace tcdsr::transfer
