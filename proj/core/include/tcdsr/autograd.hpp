#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Graph records every operation of one forward pass as a node holding its
// value and a closure that pushes the output gradient onto its inputs.
// Parameters live outside the graph (see ParameterStore); their gradients are
// accumulated into Parameter::grad when backward() runs.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tcdsr::ag {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;
};

/// Named, ordered parameter collection. Iteration order is lexicographic by
/// name so serialization and optimizer updates are deterministic.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix init, bool trainable = true);
  [[nodiscard]] bool contains(std::string_view name) const;
  Parameter& at(std::string_view name);
  [[nodiscard]] const Parameter& at(std::string_view name) const;

  void zero_grad();
  /// Number of scalar entries; only trainable parameters unless `all`.
  [[nodiscard]] std::size_t scalar_count(bool all = false) const;
  [[nodiscard]] std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  [[nodiscard]] auto begin() const { return params_.begin(); }
  [[nodiscard]] auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter, std::less<>> params_;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const;
  [[nodiscard]] Graph* graph() const { return graph_; }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, const Matrix&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var param(Parameter& p);
  /// Embedding lookup: rows of `table` in order; gradients scatter back.
  Var gather(Parameter& table, std::span<const int> rows);

  /// Seeds d(root)/d(root) = 1 and propagates. `root` must be 1x1.
  void backward(Var root);

  [[nodiscard]] const Matrix& value(int id) const { return nodes_[id].value; }
  /// Gradient of the last backward() root w.r.t. node `id` (zero if unreached).
  [[nodiscard]] Matrix grad(int id) const;
  [[nodiscard]] bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Adds a node. `fn` is kept only when some input requires a gradient.
  Var push(Matrix value, std::initializer_list<Var> inputs, Backward fn);
  Var push(Matrix value, std::span<const Var> inputs, Backward fn);
  void accumulate(int id, const Matrix& g);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
    bool has_grad = false;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and broadcasting arithmetic.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// 1 - a
Var one_minus(Var a);
/// a (n x c) + row (1 x c) broadcast over rows.
Var add_row(Var a, Var row);
/// a (n x c) scaled row-wise by col (n x 1).
Var mul_col(Var a, Var col);

// Linear algebra.
Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

// Nonlinearities.
Var tanh(Var a);
Var sigmoid(Var a);
Var gelu(Var a);
/// log(sigmoid(a)), numerically stable.
Var log_sigmoid(Var a);

// Structural.
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice(Var a, Eigen::Index row, Eigen::Index nrows, Eigen::Index col, Eigen::Index ncols);
Var gather_rows(Var a, std::span<const int> rows);
/// Output row i = sum_k w_ik * a.row(j_ik). Empty combinations give zero rows.
using RowCombination = std::vector<std::pair<int, double>>;
Var combine_rows(Var a, std::span<const RowCombination> combos, Eigen::Index out_rows = -1);

// Reductions.
Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);
Var row_sqnorm(Var a);

// Row-wise normalizations.
/// Softmax of each row of (a + additive_mask); mask entries are 0 or a large negative.
Var softmax_rows(Var a, const Matrix& additive_mask);
Var log_softmax_rows(Var a);
/// out(i) = a(i, idx[i]) as an n x 1 column.
Var pick(Var a, std::span<const int> idx);
Var normalize_rows(Var a, double eps = 1e-12);
Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-5);

/// Row-wise cosine similarity of two equally shaped matrices (n x 1).
Var cosine_rows(Var a, Var b);
/// Pairwise cosine similarity matrix (n x m).
Var cosine_matrix(Var a, Var b);

}  // namespace tcdsr::ag
