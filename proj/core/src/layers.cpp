#include "tcdsr/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace tcdsr::nn {

namespace {
constexpr double kMaskedLogit = -1e30;
}

Matrix xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix m(fan_in, fan_out);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = (2.0 * uniform01(rng) - 1.0) * a;
  }
  return m;
}

Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = stddev * standard_normal(rng);
  }
  return m;
}

Linear::Linear(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
               bool with_bias) {
  weight = &store.add(name + ".weight", xavier_uniform(in, out, rng));
  if (with_bias) bias = &store.add(name + ".bias", Matrix::Zero(1, out));
}

Var Linear::operator()(Graph& g, Var x) const {
  Var y = ag::matmul(x, g.param(*weight));
  return bias != nullptr ? ag::add_row(y, g.param(*bias)) : y;
}

Mlp2::Mlp2(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index width, Eigen::Index out,
           Activation act, Rng& rng)
    : hidden(store, name + ".hidden", in, width, rng), output(store, name + ".output", width, out, rng),
      activation(act) {}

Var Mlp2::operator()(Graph& g, Var x) const {
  Var h = hidden(g, x);
  h = activation == Activation::kTanh ? ag::tanh(h) : ag::gelu(h);
  return output(g, h);
}

GruCell::GruCell(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index hidden, Rng& rng)
    : hidden_dim(hidden) {
  w_input = &store.add(name + ".w_input", xavier_uniform(in, 3 * hidden, rng));
  w_hidden = &store.add(name + ".w_hidden", xavier_uniform(hidden, 3 * hidden, rng));
  b_input = &store.add(name + ".b_input", Matrix::Zero(1, 3 * hidden));
  b_hidden = &store.add(name + ".b_hidden", Matrix::Zero(1, 3 * hidden));
}

Var GruCell::operator()(Graph& g, Var x, Var h) const {
  const Eigen::Index d = hidden_dim;
  if (h.cols() != d) throw std::invalid_argument("GruCell: hidden width mismatch");
  Var xi = ag::add_row(ag::matmul(x, g.param(*w_input)), g.param(*b_input));
  Var hh = ag::add_row(ag::matmul(h, g.param(*w_hidden)), g.param(*b_hidden));
  const Eigen::Index n = x.rows();
  Var update = ag::sigmoid(ag::add(ag::slice(xi, 0, n, 0, d), ag::slice(hh, 0, n, 0, d)));
  Var reset = ag::sigmoid(ag::add(ag::slice(xi, 0, n, d, d), ag::slice(hh, 0, n, d, d)));
  Var candidate = ag::tanh(ag::add(ag::slice(xi, 0, n, 2 * d, d), ag::mul(reset, ag::slice(hh, 0, n, 2 * d, d))));
  return ag::add(h, ag::mul(update, ag::sub(candidate, h)));
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, Eigen::Index dim) {
  gain = &store.add(name + ".gain", Matrix::Ones(1, dim));
  bias = &store.add(name + ".bias", Matrix::Zero(1, dim));
}

Var LayerNorm::operator()(Graph& g, Var x) const {
  return ag::layer_norm_rows(x, g.param(*gain), g.param(*bias));
}

Matrix StackedLayout::mask_column() const {
  Matrix m = Matrix::Zero(rows(), 1);
  for (int b = 0; b < batch(); ++b) {
    for (int t = 0; t < lengths[static_cast<std::size_t>(b)]; ++t) m(b * stride + t, 0) = 1.0;
  }
  return m;
}

Matrix causal_mask(int stride, int length) {
  Matrix m = Matrix::Constant(stride, stride, kMaskedLogit);
  for (int i = 0; i < stride; ++i) {
    for (int j = 0; j <= i; ++j) {
      if (j < length || j == i) m(i, j) = 0.0;
    }
  }
  return m;
}

MultiHeadSelfAttention::MultiHeadSelfAttention(ParameterStore& store, const std::string& name, Eigen::Index dim,
                                               int heads_, Rng& rng)
    : query(store, name + ".query", dim, dim, rng), key(store, name + ".key", dim, dim, rng),
      value(store, name + ".value", dim, dim, rng), out(store, name + ".out", dim, dim, rng), heads(heads_) {
  if (heads <= 0 || dim % heads != 0) throw std::invalid_argument("attention: dim must be divisible by heads");
}

Var MultiHeadSelfAttention::operator()(Graph& g, Var x, const StackedLayout& layout) const {
  const Eigen::Index dim = x.cols();
  const Eigen::Index head_dim = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Var q = query(g, x);
  Var k = key(g, x);
  Var v = value(g, x);
  std::vector<Var> sequences;
  sequences.reserve(static_cast<std::size_t>(layout.batch()));
  for (int b = 0; b < layout.batch(); ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * layout.stride;
    const Matrix mask = causal_mask(layout.stride, layout.lengths[static_cast<std::size_t>(b)]);
    Var qb = ag::slice(q, r0, layout.stride, 0, dim);
    Var kb = ag::slice(k, r0, layout.stride, 0, dim);
    Var vb = ag::slice(v, r0, layout.stride, 0, dim);
    std::vector<Var> head_out;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * head_dim;
      Var qh = ag::slice(qb, 0, layout.stride, c0, head_dim);
      Var kh = ag::slice(kb, 0, layout.stride, c0, head_dim);
      Var vh = ag::slice(vb, 0, layout.stride, c0, head_dim);
      Var attn = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt), mask);
      head_out.push_back(ag::matmul(attn, vh));
    }
    sequences.push_back(heads == 1 ? head_out.front() : ag::concat_cols(head_out));
  }
  Var joined = sequences.size() == 1 ? sequences.front() : ag::concat_rows(sequences);
  return out(g, joined);
}

TransformerLayer::TransformerLayer(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads,
                                   int ffn_mult, Rng& rng)
    : norm_attn(store, name + ".norm_attn", dim), norm_ffn(store, name + ".norm_ffn", dim),
      attn(store, name + ".attn", dim, heads, rng),
      ffn(store, name + ".ffn", dim, dim * ffn_mult, dim, Activation::kGelu, rng) {}

Var TransformerLayer::operator()(Graph& g, Var x, const StackedLayout& layout) const {
  Var mask = g.constant(layout.mask_column());
  Var h = ag::add(x, attn(g, norm_attn(g, x), layout));
  h = ag::add(h, ffn(g, norm_ffn(g, h)));
  return ag::mul_col(h, mask);
}

}  // namespace tcdsr::nn
