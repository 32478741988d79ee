#include "support.hpp"
#include "tcdsr/evolution.hpp"

#include <doctest.h>

#include <cmath>

using namespace tcdsr;
using namespace tcdsr::evolution;
using ag::Matrix;
using ag::RowVector;

namespace {

constexpr int kDim = 8;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * standard_normal(rng);
  return m;
}

/// Hand evaluation of the GRU equations.
RowVector gru_oracle(const nn::GruCell& cell, const RowVector& x, const RowVector& h) {
  const Eigen::Index d = cell.hidden_dim;
  const RowVector xi = x * cell.w_input->value + cell.b_input->value;
  const RowVector hh = h * cell.w_hidden->value + cell.b_hidden->value;
  RowVector out(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double u = sigmoid(xi(j) + hh(j));
    const double r = sigmoid(xi(d + j) + hh(d + j));
    const double n = std::tanh(xi(2 * d + j) + r * hh(2 * d + j));
    out(j) = (1 - u) * h(j) + u * n;
  }
  return out;
}

/// Euler integration of dh/ds = h A over [0, dt] with `steps` equal substeps.
Matrix euler(const Matrix& h0, const Matrix& a, double dt, int steps) {
  Matrix h = h0;
  for (int k = 0; k < steps; ++k) h = h + (dt / steps) * (h * a);
  return h;
}

struct Dual {
  ag::ParameterStore store;
  Rng rng{21};
  DualEvolution params{store, "evo", kDim, rng};
};

nn::StackedLayout layout_of(int stride, std::vector<int> lengths) { return {stride, std::move(lengths)}; }

}  // namespace

TEST_CASE("euler: zero interval leaves the state unchanged") {
  Dual f;
  Rng rng(1);
  ag::Graph g;
  const Matrix h = random_matrix(3, kDim, rng);
  Var out = ode_evolve(g, g.constant(h), g.constant(Matrix::Zero(3, 1)), f.params.f_long);
  CHECK((out.value() - h).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("euler: f = -h over half a unit") {
  ag::Graph g;
  const Derivative minus_h = [](ag::Graph&, Var x) { return ag::scale(ag::slice(x, 0, x.rows(), 0, kDim), -1.0); };
  Var out = ode_evolve(g, g.constant(Matrix::Ones(1, kDim)), g.constant(Matrix::Constant(1, 1, 0.5)), minus_h);
  CHECK((out.value().array() - 0.5).abs().maxCoeff() == 0.0);
}

TEST_CASE("euler: linear derivative matches the closed form exactly") {
  Rng rng(4);
  const Matrix a = random_matrix(kDim, kDim, rng, 0.3);
  const Matrix h0 = random_matrix(2, kDim, rng);
  const Derivative linear = [&a](ag::Graph& g, Var x) { return ag::matmul(ag::slice(x, 0, x.rows(), 0, kDim), g.constant(a)); };
  ag::Graph g;
  Matrix dt(2, 1);
  dt << 0.25, 0.8;
  const Matrix out = ode_evolve(g, g.constant(h0), g.constant(dt), linear).value();
  for (int r = 0; r < 2; ++r) {
    const RowVector expected = h0.row(r) + dt(r, 0) * (h0.row(r) * a);
    CHECK((out.row(r) - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("euler: one step error against 64 substeps shrinks quadratically") {
  Rng rng(9);
  const Matrix a = random_matrix(kDim, kDim, rng, 0.4);
  const Matrix h0 = random_matrix(1, kDim, rng);
  const Derivative linear = [&a](ag::Graph& g, Var x) { return ag::matmul(ag::slice(x, 0, x.rows(), 0, kDim), g.constant(a)); };
  auto error = [&](double dt) {
    ag::Graph g;
    const Matrix one = ode_evolve(g, g.constant(h0), g.constant(Matrix::Constant(1, 1, dt)), linear).value();
    return (one - euler(h0, a, dt, 64)).norm();
  };
  for (double dt : {0.5, 0.25, 0.125}) {
    const double ratio = error(dt) / error(dt / 2);
    CHECK(ratio >= 3.5);
    CHECK(ratio <= 4.5);
  }
}

TEST_CASE("euler: non-finite state is rejected") {
  Dual f;
  ag::Graph g;
  Matrix h = Matrix::Zero(1, kDim);
  h(0, 3) = std::nan("");
  CHECK_THROWS_AS((void)ode_evolve(g, g.constant(h), g.constant(Matrix::Zero(1, 1)), f.params.f_long),
                  std::invalid_argument);
}

TEST_CASE("gru: closed update gate keeps the evolved state") {
  Dual f;
  auto& cell = f.params.gru_long;
  cell.b_input->value.leftCols(kDim).setConstant(-1e3);
  Rng rng(2);
  ag::Graph g;
  const Matrix h = random_matrix(2, kDim, rng);
  const Matrix e = random_matrix(2, kDim, rng);
  const Matrix out = event_update(g, g.constant(h), g.constant(e), cell).value();
  CHECK((out - h).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gru: open update and reset gates give the candidate") {
  Dual f;
  auto& cell = f.params.gru_short;
  cell.b_input->value.leftCols(2 * kDim).setConstant(1e3);
  Rng rng(3);
  ag::Graph g;
  const Matrix h = random_matrix(1, kDim, rng);
  const Matrix e = random_matrix(1, kDim, rng);
  const Matrix out = event_update(g, g.constant(h), g.constant(e), cell).value();
  const Matrix candidate =
      ((e * cell.w_input->value.rightCols(kDim) + cell.b_input->value.rightCols(kDim)) +
       (h * cell.w_hidden->value.rightCols(kDim) + cell.b_hidden->value.rightCols(kDim)))
          .array()
          .tanh()
          .matrix();
  CHECK((out - candidate).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gru: matches hand-computed equations") {
  Dual f;
  Rng rng(8);
  auto& cell = f.params.gru_long;
  cell.b_input->value = random_matrix(1, 3 * kDim, rng, 0.2);
  cell.b_hidden->value = random_matrix(1, 3 * kDim, rng, 0.2);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix h = random_matrix(1, kDim, rng, 0.5);
    const Matrix e = random_matrix(1, kDim, rng, 0.5);
    ag::Graph g;
    const Matrix out = event_update(g, g.constant(h), g.constant(e), cell).value();
    CHECK((out.row(0) - gru_oracle(cell, e.row(0), h.row(0))).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("fusion: gate limits and the zero-weight midpoint") {
  Dual f;
  Rng rng(6);
  const Matrix hl = random_matrix(2, kDim, rng);
  const Matrix hs = random_matrix(2, kDim, rng);
  const Matrix dt = Matrix::Constant(2, 1, 0.3);
  auto fuse = [&] {
    ag::Graph g;
    Var gate = f.params.gate(g, g.constant(hl), g.constant(hs), g.constant(dt));
    return fuse_states(gate, g.constant(hl), g.constant(hs)).value();
  };
  f.params.gate.linear.weight->value.setZero();
  f.params.gate.linear.bias->value.setConstant(1e3);
  CHECK((fuse() - hs).cwiseAbs().maxCoeff() < 1e-12);
  f.params.gate.linear.bias->value.setConstant(-1e3);
  CHECK((fuse() - hl).cwiseAbs().maxCoeff() < 1e-12);
  f.params.gate.linear.bias->value.setZero();
  CHECK((fuse() - 0.5 * (hl + hs)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("roll: a single event starts both states at the embedding") {
  Dual f;
  Rng rng(5);
  const Matrix e = random_matrix(1, kDim, rng);
  ag::Graph g;
  const auto out = roll_sequence(g, g.constant(e), layout_of(1, {1}), {0.0}, f.params);
  CHECK((out.z.value() - e).cwiseAbs().maxCoeff() == 0.0);
  CHECK((out.h_long.value() - e).cwiseAbs().maxCoeff() == 0.0);
  CHECK((out.h_short.value() - e).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("roll: zero derivative and zero intervals leave only the GRU") {
  Dual f;
  for (auto* mlp : {&f.params.f_long, &f.params.f_short}) {
    mlp->output.weight->value.setZero();
    mlp->output.bias->value.setZero();
  }
  Rng rng(12);
  const Matrix e = random_matrix(4, kDim, rng, 0.5);
  ag::Graph g;
  const auto out = roll_sequence(g, g.constant(e), layout_of(4, {4}), {0.0, 0.0, 0.0, 0.0}, f.params);
  RowVector hl = e.row(0), hs = e.row(0);
  for (int t = 1; t < 4; ++t) {
    hl = gru_oracle(f.params.gru_long, e.row(t), hl);
    hs = gru_oracle(f.params.gru_short, e.row(t), hs);
    CHECK((out.h_long.value().row(t) - hl).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((out.h_short.value().row(t) - hs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("roll: trailing padding freezes the state") {
  Dual f;
  Rng rng(13);
  const Matrix e3 = random_matrix(3, kDim, rng);
  Matrix padded = Matrix::Zero(6, kDim);
  padded.topRows(3) = e3;
  const std::vector<double> gaps{0.0, 0.4, 0.7};
  std::vector<double> padded_gaps{0.0, 0.4, 0.7, 0.0, 0.0, 0.0};
  ag::Graph g;
  const auto tight = roll_sequence(g, g.constant(e3), layout_of(3, {3}), gaps, f.params);
  const auto loose = roll_sequence(g, g.constant(padded), layout_of(6, {3}), padded_gaps, f.params);
  CHECK((tight.z.value().row(2) - loose.z.value().row(2)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(loose.z.value().bottomRows(3).isZero(0));
}

TEST_CASE("roll: empty batch is an error, empty sequence is zero") {
  Dual f;
  ag::Graph g;
  CHECK_THROWS_AS((void)roll_sequence(g, g.constant(Matrix::Zero(2, kDim)), layout_of(2, {0}), {0.0, 0.0}, f.params),
                  std::invalid_argument);
  Rng rng(1);
  Matrix e = Matrix::Zero(4, kDim);
  e.topRows(2) = random_matrix(2, kDim, rng);
  const auto out = roll_sequence(g, g.constant(e), layout_of(2, {2, 0}), {0.0, 0.5, 0.0, 0.0}, f.params);
  CHECK(out.z.value().bottomRows(2).isZero(0));
}

TEST_CASE("invariant: fused state lies between the two states") {
  Dual f;
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int len = 1 + static_cast<int>(uniform_index(rng, 6));
    const Matrix e = random_matrix(len, kDim, rng, 2.0);
    std::vector<double> gaps(static_cast<std::size_t>(len));
    for (auto& x : gaps) x = uniform01(rng);
    ag::Graph g;
    const auto out = roll_sequence(g, g.constant(e), layout_of(len, {len}), gaps, f.params);
    const auto& z = out.z.value();
    const auto& hl = out.h_long.value();
    const auto& hs = out.h_short.value();
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      CHECK(z.data()[i] >= std::min(hl.data()[i], hs.data()[i]) - 1e-12);
      CHECK(z.data()[i] <= std::max(hl.data()[i], hs.data()[i]) + 1e-12);
    }
    CHECK((out.gate.value().array() > 0).all());
    CHECK((out.gate.value().array() < 1).all());
  }
}

TEST_CASE("invariant: roll is causal") {
  Dual f;
  Rng rng(17);
  const Matrix e = random_matrix(5, kDim, rng);
  Matrix changed = e;
  changed.bottomRows(2) = random_matrix(2, kDim, rng);
  const std::vector<double> gaps{0.0, 0.3, 0.6, 0.2, 0.9};
  std::vector<double> other = gaps;
  other[3] = 0.05;
  other[4] = 0.5;
  ag::Graph g;
  const auto a = roll_sequence(g, g.constant(e), layout_of(5, {5}), gaps, f.params);
  const auto b = roll_sequence(g, g.constant(changed), layout_of(5, {5}), other, f.params);
  CHECK((a.z.value().topRows(3) - b.z.value().topRows(3)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("long-term regularizer: examples") {
  ag::Graph g;
  const Matrix flat = Matrix::Ones(3, kDim);
  CHECK(long_term_reg(g, g.constant(flat), layout_of(3, {3}), {0.0, 0.2, 0.5}).scalar() == 0.0);

  Matrix step = Matrix::Zero(2, kDim);
  step(1, 0) = 1.0;
  CHECK(long_term_reg(g, g.constant(step), layout_of(2, {2}), {0.0, 0.0}).scalar() == doctest::Approx(1.0));
  CHECK(long_term_reg(g, g.constant(step), layout_of(2, {2}), {0.0, 1.0}).scalar() == doctest::Approx(0.0));
  CHECK(long_term_reg(g, g.constant(step), layout_of(2, {2}), {0.0, 0.25}).scalar() == doctest::Approx(0.75));
  CHECK(long_term_reg(g, g.constant(Matrix::Ones(1, kDim)), layout_of(1, {1}), {0.0}).scalar() == 0.0);
}

TEST_CASE("long-term regularizer: nonnegative, zero only without weighted change") {
  Rng rng(40);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix h = random_matrix(4, kDim, rng);
    std::vector<double> gaps{0.0, uniform01(rng), uniform01(rng), uniform01(rng)};
    ag::Graph g;
    CHECK(long_term_reg(g, g.constant(h), layout_of(4, {4}), gaps).scalar() > 0.0);
  }
}

TEST_CASE("short-term regularizer: examples") {
  ag::Graph g;
  Rng rng(3);
  const Matrix one = random_matrix(1, kDim, rng);
  CHECK(short_term_reg(g, g.constant(one), g.constant(one), layout_of(1, {1}), 0.2).scalar() == 0.0);

  const Matrix basis = Matrix::Identity(4, kDim);
  const double j = 3;
  const double expected = -std::log(std::exp(5.0) / (std::exp(5.0) + j * std::exp(0.0)));
  CHECK(short_term_reg(g, g.constant(basis), g.constant(basis), layout_of(2, {2, 2}), 0.2).scalar() ==
        doctest::Approx(expected).epsilon(1e-12));

  const Matrix hs = random_matrix(5, kDim, rng);
  const Matrix e = random_matrix(5, kDim, rng);
  const double base = short_term_reg(g, g.constant(hs), g.constant(e), layout_of(5, {5}), 0.2).scalar();
  const double scaled = short_term_reg(g, g.constant(3 * hs), g.constant(3 * e), layout_of(5, {5}), 0.2).scalar();
  CHECK(scaled == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("gradients: regularizers and the full roll") {
  ag::ParameterStore store;
  Rng rng(50);
  DualEvolution params(store, "evo", kDim, rng);
  auto& emb = store.add("emb", random_matrix(8, kDim, rng, 0.5));
  const Matrix weights = random_matrix(8, kDim, rng);
  const nn::StackedLayout layout{4, {4, 3}};
  const std::vector<double> gaps{0.0, 0.3, 0.8, 0.1, 0.0, 0.6, 0.4, 0.0};
  auto loss = [&](ag::Graph& g) {
    Var e = ag::mul_col(g.param(emb), g.constant(layout.mask_column()));
    const auto out = roll_sequence(g, e, layout, gaps, params);
    Var fit = ag::sum(ag::mul(out.z, g.constant(weights)));
    Var ll = long_term_reg(g, out.h_long, layout, gaps);
    Var ls = short_term_reg(g, out.h_short, e, layout, 0.2);
    return ag::add(fit, ag::add(ll, ls));
  };
  const auto r = tcdsr::testing::grad_check(store, loss, "", 8);
  INFO(r.worst);
  CHECK(r.checked > 50);
  CHECK(r.max_rel < 1e-4);

  auto only_ll = [&](ag::Graph& g) {
    return long_term_reg(g, g.param(emb), layout, gaps);
  };
  const auto rl = tcdsr::testing::grad_check(store, only_ll, "emb", 40);
  INFO(rl.worst);
  CHECK(rl.max_rel < 1e-4);

  auto only_ls = [&](ag::Graph& g) {
    Var e = g.param(emb);
    return short_term_reg(g, ag::tanh(e), e, layout, 0.2);
  };
  const auto rs = tcdsr::testing::grad_check(store, only_ls, "emb", 40);
  INFO(rs.worst);
  CHECK(rs.max_rel < 1e-4);
}

TEST_CASE("single-state roll") {
  ag::ParameterStore store;
  Rng rng(60);
  SingleEvolution params(store, "single", kDim, rng);
  const Matrix e = random_matrix(3, kDim, rng);
  ag::Graph g;
  const auto out = roll_single(g, g.constant(e), layout_of(3, {3}), {0.0, 0.5, 0.2}, params);
  CHECK((out.z.value().row(0) - e.row(0)).cwiseAbs().maxCoeff() == 0.0);
  CHECK_FALSE(out.gate.valid());
  CHECK(out.z.value().allFinite());
}
