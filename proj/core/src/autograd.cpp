#include "tcdsr/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace tcdsr::ag {

namespace {

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(Var a, Var b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), op,
          "shape mismatch " + shape(a.value()) + " vs " + shape(b.value()));
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::add(const std::string& name, Matrix init, bool trainable) {
  if (params_.contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
  Parameter p;
  p.name = name;
  p.grad = Matrix::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  p.trainable = trainable;
  return params_.emplace(name, std::move(p)).first->second;
}

bool ParameterStore::contains(std::string_view name) const { return params_.find(name) != params_.end(); }

Parameter& ParameterStore::at(std::string_view name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return it->second;
}

const Parameter& ParameterStore::at(std::string_view name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

std::size_t ParameterStore::scalar_count(bool all) const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) {
    if (all || p.trainable) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

// ---------------------------------------------------------------------------
// Var / Graph

const Matrix& Var::value() const { return graph_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::logic_error("Var::scalar on " + shape(v) + " node");
  return v(0, 0);
}

Var Graph::push(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
  return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::push(Matrix value, std::span<const Var> inputs, Backward fn) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.graph() != this) throw std::logic_error("Var from a different graph");
    needs = needs || nodes_[v.id()].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = p.trainable;
  if (p.trainable) {
    Parameter* target = &p;
    n.backward = [target](Graph&, const Matrix& g) { target->grad += g; };
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::gather(Parameter& table, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), table.value.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || r >= table.value.rows()) {
      throw std::out_of_range("gather: row " + std::to_string(r) + " out of range for " + table.name +
                              " (" + shape(table.value) + ")");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value.row(r);
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = table.trainable;
  if (table.trainable) {
    Parameter* target = &table;
    std::vector<int> idx(rows.begin(), rows.end());
    n.backward = [target, idx = std::move(idx)](Graph&, const Matrix& g) {
      for (std::size_t i = 0; i < idx.size(); ++i) target->grad.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    };
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Graph::accumulate(int id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

Matrix Graph::grad(int id) const {
  const Node& n = nodes_[id];
  if (n.has_grad) return n.grad;
  return Matrix::Zero(n.value.rows(), n.value.cols());
}

void Graph::backward(Var root) {
  if (root.graph() != this) throw std::logic_error("backward: root from a different graph");
  if (root.value().size() != 1) throw std::logic_error("backward: root must be scalar, got " + shape(root.value()));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.backward) continue;
    const Matrix g = n.grad;
    n.backward(*this, g);
  }
}

// ---------------------------------------------------------------------------
// Ops

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.graph()->push(a.value() + b.value(), {a, b}, [ia, ib](Graph& g, const Matrix& d) {
    g.accumulate(ia, d);
    g.accumulate(ib, d);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.graph()->push(a.value() - b.value(), {a, b}, [ia, ib](Graph& g, const Matrix& d) {
    g.accumulate(ia, d);
    g.accumulate(ib, -d);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return a.graph()->push(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Graph& g, const Matrix& d) {
    g.accumulate(ia, d.cwiseProduct(g.value(ib)));
    g.accumulate(ib, d.cwiseProduct(g.value(ia)));
  });
}

Var scale(Var a, double s) {
  const int ia = a.id();
  return a.graph()->push(a.value() * s, {a}, [ia, s](Graph& g, const Matrix& d) { g.accumulate(ia, d * s); });
}

Var add_scalar(Var a, double s) {
  const int ia = a.id();
  return a.graph()->push(a.value().array() + s, {a}, [ia](Graph& g, const Matrix& d) { g.accumulate(ia, d); });
}

Var one_minus(Var a) {
  const int ia = a.id();
  return a.graph()->push(1.0 - a.value().array(), {a}, [ia](Graph& g, const Matrix& d) { g.accumulate(ia, -d); });
}

Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row",
          "row " + shape(row.value()) + " vs matrix " + shape(a.value()));
  const int ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.graph()->push(std::move(out), {a, row}, [ia, ir](Graph& g, const Matrix& d) {
    g.accumulate(ia, d);
    g.accumulate(ir, d.colwise().sum());
  });
}

Var mul_col(Var a, Var col) {
  require(col.cols() == 1 && col.rows() == a.rows(), "mul_col",
          "column " + shape(col.value()) + " vs matrix " + shape(a.value()));
  const int ia = a.id(), ic = col.id();
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return a.graph()->push(std::move(out), {a, col}, [ia, ic](Graph& g, const Matrix& d) {
    const Matrix& av = g.value(ia);
    const Matrix& cv = g.value(ic);
    g.accumulate(ia, (d.array().colwise() * cv.col(0).array()).matrix());
    g.accumulate(ic, d.cwiseProduct(av).rowwise().sum());
  });
}

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul", shape(a.value()) + " * " + shape(b.value()));
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return a.graph()->push(std::move(out), {a, b}, [ia, ib](Graph& g, const Matrix& d) {
    if (g.requires_grad(ia)) g.accumulate(ia, d * g.value(ib).transpose());
    if (g.requires_grad(ib)) g.accumulate(ib, g.value(ia).transpose() * d);
  });
}

Var matmul_nt(Var a, Var b) {
  require(a.cols() == b.cols(), "matmul_nt", shape(a.value()) + " * T(" + shape(b.value()) + ")");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value().transpose();
  return a.graph()->push(std::move(out), {a, b}, [ia, ib](Graph& g, const Matrix& d) {
    if (g.requires_grad(ia)) g.accumulate(ia, d * g.value(ib));
    if (g.requires_grad(ib)) g.accumulate(ib, d.transpose() * g.value(ia));
  });
}

Var transpose(Var a) {
  const int ia = a.id();
  return a.graph()->push(a.value().transpose(), {a},
                         [ia](Graph& g, const Matrix& d) { g.accumulate(ia, d.transpose()); });
}

Var tanh(Var a) {
  const int ia = a.id();
  Matrix out = a.value().array().tanh();
  const int out_id = static_cast<int>(a.graph()->size());
  return a.graph()->push(std::move(out), {a}, [ia, out_id](Graph& g, const Matrix& d) {
    const Matrix& y = g.value(out_id);
    g.accumulate(ia, (d.array() * (1.0 - y.array().square())).matrix());
  });
}

Var sigmoid(Var a) {
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  const int out_id = static_cast<int>(a.graph()->size());
  return a.graph()->push(std::move(out), {a}, [ia, out_id](Graph& g, const Matrix& d) {
    const Matrix& y = g.value(out_id);
    g.accumulate(ia, (d.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return a.graph()->push(std::move(out), {a}, [ia](Graph& g, const Matrix& d) {
    Matrix dx = g.value(ia).unaryExpr([](double x) {
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    });
    g.accumulate(ia, d.cwiseProduct(dx));
  });
}

Var log_sigmoid(Var a) {
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); });
  return a.graph()->push(std::move(out), {a}, [ia](Graph& g, const Matrix& d) {
    Matrix s = g.value(ia).unaryExpr([](double x) {
      // sigmoid(-x)
      return x >= 0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
    });
    g.accumulate(ia, d.cwiseProduct(s));
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "concat_cols", "row mismatch " + shape(p.value()));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.id(), c);
    c += p.cols();
  }
  return parts.front().graph()->push(std::move(out), parts, [spans](Graph& g, const Matrix& d) {
    for (const auto& [id, offset] : spans) g.accumulate(id, d.middleCols(offset, g.value(id).cols()));
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, "concat_rows", "column mismatch " + shape(p.value()));
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id(), r);
    r += p.rows();
  }
  return parts.front().graph()->push(std::move(out), parts, [spans](Graph& g, const Matrix& d) {
    for (const auto& [id, offset] : spans) g.accumulate(id, d.middleRows(offset, g.value(id).rows()));
  });
}

Var slice(Var a, Eigen::Index row, Eigen::Index nrows, Eigen::Index col, Eigen::Index ncols) {
  require(row >= 0 && col >= 0 && row + nrows <= a.rows() && col + ncols <= a.cols(), "slice",
          "block out of range of " + shape(a.value()));
  const int ia = a.id();
  const Eigen::Index R = a.rows(), C = a.cols();
  Matrix out = a.value().block(row, col, nrows, ncols);
  return a.graph()->push(std::move(out), {a}, [ia, row, col, R, C](Graph& g, const Matrix& d) {
    Matrix full = Matrix::Zero(R, C);
    full.block(row, col, d.rows(), d.cols()) = d;
    g.accumulate(ia, full);
  });
}

Var gather_rows(Var a, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows", "row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const int ia = a.id();
  std::vector<int> idx(rows.begin(), rows.end());
  return a.graph()->push(std::move(out), {a}, [ia, idx = std::move(idx)](Graph& g, const Matrix& d) {
    Matrix full = Matrix::Zero(g.value(ia).rows(), g.value(ia).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += d.row(static_cast<Eigen::Index>(i));
    g.accumulate(ia, full);
  });
}

Var combine_rows(Var a, std::span<const RowCombination> combos, Eigen::Index out_rows) {
  const Eigen::Index n = out_rows < 0 ? static_cast<Eigen::Index>(combos.size()) : out_rows;
  require(static_cast<Eigen::Index>(combos.size()) == n, "combine_rows", "combination count mismatch");
  Matrix out = Matrix::Zero(n, a.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (const auto& [j, w] : combos[static_cast<std::size_t>(i)]) {
      require(j >= 0 && j < a.rows(), "combine_rows", "row index out of range");
      out.row(i) += w * a.value().row(j);
    }
  }
  const int ia = a.id();
  std::vector<RowCombination> cs(combos.begin(), combos.end());
  return a.graph()->push(std::move(out), {a}, [ia, cs = std::move(cs)](Graph& g, const Matrix& d) {
    Matrix full = Matrix::Zero(g.value(ia).rows(), g.value(ia).cols());
    for (std::size_t i = 0; i < cs.size(); ++i) {
      for (const auto& [j, w] : cs[i]) full.row(j) += w * d.row(static_cast<Eigen::Index>(i));
    }
    g.accumulate(ia, full);
  });
}

Var sum(Var a) {
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph()->push(std::move(out), {a}, [ia](Graph& g, const Matrix& d) {
    g.accumulate(ia, Matrix::Constant(g.value(ia).rows(), g.value(ia).cols(), d(0, 0)));
  });
}

Var mean(Var a) {
  require(a.value().size() > 0, "mean", "empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(Var a) {
  const int ia = a.id();
  Matrix out = a.value().rowwise().sum();
  return a.graph()->push(std::move(out), {a}, [ia](Graph& g, const Matrix& d) {
    g.accumulate(ia, d.col(0).replicate(1, g.value(ia).cols()));
  });
}

Var row_sqnorm(Var a) {
  const int ia = a.id();
  Matrix out = a.value().rowwise().squaredNorm();
  return a.graph()->push(std::move(out), {a}, [ia](Graph& g, const Matrix& d) {
    g.accumulate(ia, 2.0 * (g.value(ia).array().colwise() * d.col(0).array()).matrix());
  });
}

Var softmax_rows(Var a, const Matrix& additive_mask) {
  require(additive_mask.size() == 0 ||
              (additive_mask.rows() == a.rows() && additive_mask.cols() == a.cols()),
          "softmax_rows", "mask shape mismatch");
  Matrix x = additive_mask.size() == 0 ? a.value() : Matrix(a.value() + additive_mask);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    x.row(i) = (x.row(i).array() - m).exp();
    x.row(i) /= x.row(i).sum();
  }
  const int ia = a.id();
  const int out_id = static_cast<int>(a.graph()->size());
  return a.graph()->push(std::move(x), {a}, [ia, out_id](Graph& g, const Matrix& d) {
    const Matrix& y = g.value(out_id);
    Matrix inner = d.cwiseProduct(y).rowwise().sum();
    g.accumulate(ia, (y.array() * (d.array().colwise() - inner.col(0).array())).matrix());
  });
}

Var log_softmax_rows(Var a) {
  Matrix x = a.value();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    x.row(i).array() -= lse;
  }
  const int ia = a.id();
  const int out_id = static_cast<int>(a.graph()->size());
  return a.graph()->push(std::move(x), {a}, [ia, out_id](Graph& g, const Matrix& d) {
    const Matrix p = g.value(out_id).array().exp();
    Matrix total = d.rowwise().sum();
    g.accumulate(ia, d - (p.array().colwise() * total.col(0).array()).matrix());
  });
}

Var pick(Var a, std::span<const int> idx) {
  require(static_cast<Eigen::Index>(idx.size()) == a.rows(), "pick", "one index per row required");
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const int j = idx[static_cast<std::size_t>(i)];
    if (j < 0 || j >= a.cols()) throw std::out_of_range("pick: column " + std::to_string(j) + " out of range");
    out(i, 0) = a.value()(i, j);
  }
  const int ia = a.id();
  std::vector<int> cols(idx.begin(), idx.end());
  return a.graph()->push(std::move(out), {a}, [ia, cols = std::move(cols)](Graph& g, const Matrix& d) {
    Matrix full = Matrix::Zero(g.value(ia).rows(), g.value(ia).cols());
    for (std::size_t i = 0; i < cols.size(); ++i) full(static_cast<Eigen::Index>(i), cols[i]) = d(static_cast<Eigen::Index>(i), 0);
    g.accumulate(ia, full);
  });
}

Var normalize_rows(Var a, double eps) {
  const Eigen::VectorXd norms = (a.value().rowwise().squaredNorm().array() + eps).sqrt();
  Matrix out = a.value().array().colwise() / norms.array();
  const int ia = a.id();
  const int out_id = static_cast<int>(a.graph()->size());
  return a.graph()->push(std::move(out), {a}, [ia, out_id, norms](Graph& g, const Matrix& d) {
    const Matrix& y = g.value(out_id);
    Matrix inner = d.cwiseProduct(y).rowwise().sum();
    Matrix dx = (d.array() - y.array().colwise() * inner.col(0).array()).colwise() / norms.array();
    g.accumulate(ia, dx);
  });
}

Var layer_norm_rows(Var a, Var gain, Var bias, double eps) {
  require(gain.rows() == 1 && gain.cols() == a.cols() && bias.rows() == 1 && bias.cols() == a.cols(),
          "layer_norm_rows", "gain/bias must be 1x" + std::to_string(a.cols()));
  const Matrix& x = a.value();
  const Eigen::Index n = x.cols();
  Eigen::VectorXd mu = x.rowwise().mean();
  Matrix centered = x.colwise() - mu;
  Eigen::VectorXd inv_sigma =
      ((centered.rowwise().squaredNorm().array() / static_cast<double>(n)) + eps).sqrt().inverse();
  Matrix xhat = centered.array().colwise() * inv_sigma.array();
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const int ia = a.id(), ig = gain.id(), ib = bias.id();
  return a.graph()->push(std::move(out), {a, gain, bias},
                         [ia, ig, ib, xhat, inv_sigma, n](Graph& g, const Matrix& d) {
                           if (g.requires_grad(ig)) g.accumulate(ig, d.cwiseProduct(xhat).colwise().sum());
                           if (g.requires_grad(ib)) g.accumulate(ib, d.colwise().sum());
                           if (!g.requires_grad(ia)) return;
                           Matrix dxhat = d.array().rowwise() * g.value(ig).row(0).array();
                           Eigen::VectorXd m1 = dxhat.rowwise().mean();
                           Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                           Matrix dx = (dxhat.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix();
                           dx = dx.array().colwise() * inv_sigma.array();
                           (void)n;
                           g.accumulate(ia, dx);
                         });
}

Var cosine_rows(Var a, Var b) {
  require_same_shape(a, b, "cosine_rows");
  return row_sum(mul(normalize_rows(a), normalize_rows(b)));
}

Var cosine_matrix(Var a, Var b) {
  require(a.cols() == b.cols(), "cosine_matrix", "column mismatch");
  return matmul_nt(normalize_rows(a), normalize_rows(b));
}

}  // namespace tcdsr::ag
