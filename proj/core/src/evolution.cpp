#include "tcdsr/evolution.hpp"

#include <stdexcept>

namespace tcdsr::evolution {

Var ode_evolve(Graph& g, Var h, Var dt, const Derivative& f) {
  if (!h.value().allFinite()) throw std::invalid_argument("ode_evolve: non-finite state");
  if (dt.cols() != 1 || dt.rows() != h.rows()) throw std::invalid_argument("ode_evolve: dt must be an n x 1 column");
  const std::vector<Var> parts{h, dt};
  Var derivative = f(g, ag::concat_cols(parts));
  return ag::add(h, ag::mul_col(derivative, dt));
}

Var ode_evolve(Graph& g, Var h, Var dt, const nn::Mlp2& f) {
  return ode_evolve(g, h, dt, [&f](Graph& gr, Var x) { return f(gr, x); });
}

Var FusionGate::operator()(Graph& g, Var h_long, Var h_short, Var dt) const {
  const std::vector<Var> parts{h_long, h_short, dt};
  return ag::sigmoid(linear(g, ag::concat_cols(parts)));
}

Var fuse_states(Var gate, Var h_long, Var h_short) {
  return ag::add(h_long, ag::mul(gate, ag::sub(h_short, h_long)));
}

DualEvolution::DualEvolution(ag::ParameterStore& store, const std::string& name, Eigen::Index dim, Rng& rng)
    : f_long(store, name + ".f_long", dim + 1, dim, dim, nn::Activation::kTanh, rng),
      f_short(store, name + ".f_short", dim + 1, dim, dim, nn::Activation::kTanh, rng),
      gru_long(store, name + ".gru_long", dim, dim, rng),
      gru_short(store, name + ".gru_short", dim, dim, rng),
      gate(store, name + ".gate", dim, rng) {}

SingleEvolution::SingleEvolution(ag::ParameterStore& store, const std::string& name, Eigen::Index dim, Rng& rng)
    : f(store, name + ".f", dim + 1, dim, dim, nn::Activation::kTanh, rng), gru(store, name + ".gru", dim, dim, rng) {}

std::vector<int> real_rows(const nn::StackedLayout& layout) {
  std::vector<int> rows;
  for (int b = 0; b < layout.batch(); ++b) {
    for (int t = 0; t < layout.lengths[static_cast<std::size_t>(b)]; ++t) rows.push_back(b * layout.stride + t);
  }
  return rows;
}

namespace {

struct StepInputs {
  std::vector<int> rows;
  ag::Matrix dt;
  ag::Matrix mask;
};

StepInputs step_inputs(const nn::StackedLayout& layout, const std::vector<double>& gaps, int t) {
  StepInputs s;
  const int n = layout.batch();
  s.dt.resize(n, 1);
  s.mask.resize(n, 1);
  for (int b = 0; b < n; ++b) {
    const int r = b * layout.stride + t;
    s.rows.push_back(r);
    const bool real = t < layout.lengths[static_cast<std::size_t>(b)];
    s.dt(b, 0) = real ? gaps[static_cast<std::size_t>(r)] : 0.0;
    s.mask(b, 0) = real ? 1.0 : 0.0;
  }
  return s;
}

void check_roll_inputs(Var embedded, const nn::StackedLayout& layout, const std::vector<double>& gaps) {
  if (layout.batch() == 0 || layout.stride == 0) throw std::invalid_argument("roll: empty batch");
  if (embedded.rows() != layout.rows()) throw std::invalid_argument("roll: embedding rows do not match layout");
  if (static_cast<int>(gaps.size()) != layout.rows()) throw std::invalid_argument("roll: gap count does not match layout");
  bool any = false;
  for (int len : layout.lengths) any = any || len > 0;
  if (!any) throw std::invalid_argument("roll: no real step in batch");
}

// Step-major rows (t * batch + b) back to stacked order (b * stride + t).
std::vector<int> stacked_order(const nn::StackedLayout& layout) {
  std::vector<int> idx(static_cast<std::size_t>(layout.rows()));
  for (int b = 0; b < layout.batch(); ++b) {
    for (int t = 0; t < layout.stride; ++t) idx[static_cast<std::size_t>(b * layout.stride + t)] = t * layout.batch() + b;
  }
  return idx;
}

Var restack(const std::vector<Var>& steps, const nn::StackedLayout& layout) {
  Var joined = steps.size() == 1 ? steps.front() : ag::concat_rows(steps);
  const auto order = stacked_order(layout);
  return ag::gather_rows(joined, order);
}

// state + mask ⊙ (candidate - state)
Var freeze(Var state, Var candidate, Var mask) { return ag::add(state, ag::mul_col(ag::sub(candidate, state), mask)); }

}  // namespace

RollOutput roll_sequence(Graph& g, Var embedded, const nn::StackedLayout& layout,
                         const std::vector<double>& normalized_gaps, const DualEvolution& p) {
  check_roll_inputs(embedded, layout, normalized_gaps);
  std::vector<Var> zs, hls, hss, gates;
  Var h_long, h_short;
  for (int t = 0; t < layout.stride; ++t) {
    const StepInputs in = step_inputs(layout, normalized_gaps, t);
    Var e = ag::gather_rows(embedded, in.rows);
    Var dt = g.constant(in.dt);
    Var mask = g.constant(in.mask);
    if (t == 0) {
      h_long = e;
      h_short = e;
    } else {
      Var long_next = event_update(g, ode_evolve(g, h_long, dt, p.f_long), e, p.gru_long);
      Var short_next = event_update(g, ode_evolve(g, h_short, dt, p.f_short), e, p.gru_short);
      h_long = freeze(h_long, long_next, mask);
      h_short = freeze(h_short, short_next, mask);
    }
    Var gate = p.gate(g, h_long, h_short, dt);
    zs.push_back(ag::mul_col(fuse_states(gate, h_long, h_short), mask));
    hls.push_back(ag::mul_col(h_long, mask));
    hss.push_back(ag::mul_col(h_short, mask));
    gates.push_back(ag::mul_col(gate, mask));
  }
  return {restack(zs, layout), restack(hls, layout), restack(hss, layout), restack(gates, layout)};
}

RollOutput roll_single(Graph& g, Var embedded, const nn::StackedLayout& layout,
                       const std::vector<double>& normalized_gaps, const SingleEvolution& p) {
  check_roll_inputs(embedded, layout, normalized_gaps);
  std::vector<Var> hs;
  Var h;
  for (int t = 0; t < layout.stride; ++t) {
    const StepInputs in = step_inputs(layout, normalized_gaps, t);
    Var e = ag::gather_rows(embedded, in.rows);
    Var mask = g.constant(in.mask);
    if (t == 0) {
      h = e;
    } else {
      Var next = event_update(g, ode_evolve(g, h, g.constant(in.dt), p.f), e, p.gru);
      h = freeze(h, next, mask);
    }
    hs.push_back(ag::mul_col(h, mask));
  }
  Var z = restack(hs, layout);
  return {z, z, z, Var{}};
}

Var long_term_reg(Graph& g, Var h_long, const nn::StackedLayout& layout, const std::vector<double>& normalized_gaps) {
  std::vector<int> cur, prev;
  ag::Matrix weights;
  std::vector<double> w;
  int sequences = 0;
  for (int b = 0; b < layout.batch(); ++b) {
    const int len = layout.lengths[static_cast<std::size_t>(b)];
    if (len >= 2) ++sequences;
    for (int t = 1; t < len; ++t) {
      const int r = b * layout.stride + t;
      cur.push_back(r);
      prev.push_back(r - 1);
      w.push_back(1.0 - normalized_gaps[static_cast<std::size_t>(r)]);
    }
  }
  if (sequences == 0) return g.constant(ag::Matrix::Zero(1, 1));
  weights = Eigen::Map<const ag::Matrix>(w.data(), static_cast<Eigen::Index>(w.size()), 1);
  Var diff = ag::sub(ag::gather_rows(h_long, cur), ag::gather_rows(h_long, prev));
  Var weighted = ag::mul_col(ag::row_sqnorm(diff), g.constant(weights));
  return ag::scale(ag::sum(weighted), 1.0 / sequences);
}

Var short_term_reg(Graph& g, Var h_short, Var embedded, const nn::StackedLayout& layout, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("short_term_reg: tau must be positive");
  const auto rows = real_rows(layout);
  if (rows.size() < 2) return g.constant(ag::Matrix::Zero(1, 1));
  Var hs = ag::gather_rows(h_short, rows);
  Var e = ag::gather_rows(embedded, rows);
  Var logits = ag::scale(ag::cosine_matrix(hs, e), 1.0 / tau);
  std::vector<int> diag(rows.size());
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<int>(i);
  return ag::scale(ag::mean(ag::pick(ag::log_softmax_rows(logits), diag)), -1.0);
}

}  // namespace tcdsr::evolution
