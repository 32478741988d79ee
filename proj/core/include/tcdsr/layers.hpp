#pragma once

// Differentiable building blocks shared by the encoder, evolution and transfer
// modules. Each layer registers its parameters in a ParameterStore under a
// name prefix and keeps raw pointers into the store (map nodes are stable).

#include "tcdsr/autograd.hpp"
#include "tcdsr/random.hpp"

#include <string>
#include <vector>

namespace tcdsr::nn {

using ag::Graph;
using ag::Matrix;
using ag::ParameterStore;
using ag::Var;

Matrix xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng);
Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

enum class Activation { kTanh, kGelu };

struct Linear {
  ag::Parameter* weight = nullptr;  // in x out
  ag::Parameter* bias = nullptr;    // 1 x out, absent when built without bias

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
         bool with_bias = true);
  Var operator()(Graph& g, Var x) const;
};

/// Two affine maps with a hidden nonlinearity; the output layer is linear.
struct Mlp2 {
  Linear hidden;
  Linear output;
  Activation activation = Activation::kTanh;

  Mlp2() = default;
  Mlp2(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index width, Eigen::Index out,
       Activation act, Rng& rng);
  Var operator()(Graph& g, Var x) const;
};

/// GRU cell: u = σ(x W_u + h U_u), r = σ(x W_r + h U_r),
/// n = tanh(x W_n + r ⊙ (h U_n)), h_new = (1 - u) ⊙ h + u ⊙ n.
struct GruCell {
  ag::Parameter* w_input = nullptr;   // in x 3d, gate blocks [update | reset | candidate]
  ag::Parameter* w_hidden = nullptr;  // d x 3d
  ag::Parameter* b_input = nullptr;   // 1 x 3d
  ag::Parameter* b_hidden = nullptr;  // 1 x 3d
  Eigen::Index hidden_dim = 0;

  GruCell() = default;
  GruCell(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index hidden, Rng& rng);
  Var operator()(Graph& g, Var x, Var h) const;
};

struct LayerNorm {
  ag::Parameter* gain = nullptr;
  ag::Parameter* bias = nullptr;

  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, Eigen::Index dim);
  Var operator()(Graph& g, Var x) const;
};

/// Row layout of several sequences stacked into one matrix: sequence b
/// occupies rows [b * stride, b * stride + stride), of which the first
/// lengths[b] are real events and the remainder padding.
struct StackedLayout {
  int stride = 0;
  std::vector<int> lengths;

  [[nodiscard]] int batch() const { return static_cast<int>(lengths.size()); }
  [[nodiscard]] int rows() const { return stride * batch(); }
  /// rows() x 1 column with 1 on real rows, 0 on padding.
  [[nodiscard]] Matrix mask_column() const;
};

/// Additive attention mask for one sequence: position i may attend to j
/// when j <= i and j is real (padding rows may also attend to themselves so
/// every row stays normalizable).
Matrix causal_mask(int stride, int length);

struct MultiHeadSelfAttention {
  Linear query, key, value, out;
  int heads = 1;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads, Rng& rng);
  /// Causal self-attention applied independently to each stacked sequence.
  Var operator()(Graph& g, Var x, const StackedLayout& layout) const;
};

/// Pre-norm transformer encoder layer with causal self-attention and a GELU
/// feed-forward block. Padding rows of the output are exactly zero.
struct TransformerLayer {
  LayerNorm norm_attn, norm_ffn;
  MultiHeadSelfAttention attn;
  Mlp2 ffn;

  TransformerLayer() = default;
  TransformerLayer(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads, int ffn_mult,
                   Rng& rng);
  Var operator()(Graph& g, Var x, const StackedLayout& layout) const;
};

}  // namespace tcdsr::nn
