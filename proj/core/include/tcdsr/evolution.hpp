#pragma once

// Continuous-time preference evolution: long/short states advanced by one
// Euler step of a learned derivative between events, updated by a GRU at
// each event, and fused by a time-aware gate.

#include "tcdsr/autograd.hpp"
#include "tcdsr/layers.hpp"

#include <functional>
#include <string>
#include <vector>

namespace tcdsr::evolution {

using ag::Graph;
using ag::Var;

/// Maps [h, dt] (n x (d + 1)) to dh (n x d).
using Derivative = std::function<Var(Graph&, Var)>;

/// h + dt ⊙ f([h, dt]); `dt` is an n x 1 column of normalized intervals.
Var ode_evolve(Graph& g, Var h, Var dt, const Derivative& f);
Var ode_evolve(Graph& g, Var h, Var dt, const nn::Mlp2& f);

/// GRU update with the interaction embedding as input.
inline Var event_update(Graph& g, Var h_prime, Var e, const nn::GruCell& cell) { return cell(g, e, h_prime); }

/// g = σ(W [h_L, h_S, dt] + b).
struct FusionGate {
  nn::Linear linear;

  FusionGate() = default;
  FusionGate(ag::ParameterStore& store, const std::string& name, Eigen::Index dim, Rng& rng)
      : linear(store, name, 2 * dim + 1, dim, rng) {}
  Var operator()(Graph& g, Var h_long, Var h_short, Var dt) const;
};

/// g ⊙ h_S + (1 - g) ⊙ h_L.
Var fuse_states(Var gate, Var h_long, Var h_short);

struct DualEvolution {
  nn::Mlp2 f_long, f_short;
  nn::GruCell gru_long, gru_short;
  FusionGate gate;

  DualEvolution() = default;
  DualEvolution(ag::ParameterStore& store, const std::string& name, Eigen::Index dim, Rng& rng);
};

/// V1 ablation: one state, no decoupling and no gate.
struct SingleEvolution {
  nn::Mlp2 f;
  nn::GruCell gru;

  SingleEvolution() = default;
  SingleEvolution(ag::ParameterStore& store, const std::string& name, Eigen::Index dim, Rng& rng);
};

/// Stacked outputs aligned with the input layout; padding rows are zero.
/// `gate` is invalid for single-state rolls.
struct RollOutput {
  Var z, h_long, h_short, gate;
};

/// Runs every stacked sequence in chronological order. Step 0 starts from
/// h_L = h_S = e_0 (so z_0 = e_0); step t evolves both states over
/// normalized_gaps[t], applies the event update with e_t and fuses. Padding
/// steps carry the state unchanged. Zero-length sequences yield zero rows;
/// a batch with no real step throws std::invalid_argument.
RollOutput roll_sequence(Graph& g, Var embedded, const nn::StackedLayout& layout,
                         const std::vector<double>& normalized_gaps, const DualEvolution& params);
RollOutput roll_single(Graph& g, Var embedded, const nn::StackedLayout& layout,
                       const std::vector<double>& normalized_gaps, const SingleEvolution& params);

/// Σ_t (1 - dt_t) ||h_t - h_{t-1}||² per sequence, averaged over the
/// sequences with at least two real steps (0 when there are none).
Var long_term_reg(Graph& g, Var h_long, const nn::StackedLayout& layout, const std::vector<double>& normalized_gaps);

/// InfoNCE between h_S_t and e_t with cosine similarity at temperature tau;
/// negatives are every other real step of the batch. Mean over steps; 0 for
/// fewer than two real steps.
Var short_term_reg(Graph& g, Var h_short, Var embedded, const nn::StackedLayout& layout, double tau);

/// Row indices of the real steps of a layout, in stacked order.
std::vector<int> real_rows(const nn::StackedLayout& layout);

}  // namespace tcdsr::evolution
