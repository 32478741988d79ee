#include "tcdsr/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tcdsr {

void Adam::step(ag::ParameterStore& store) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    auto [it, inserted] = moments_.try_emplace(name);
    Moments& m = it->second;
    if (inserted) {
      m.first = ag::Matrix::Zero(p.value.rows(), p.value.cols());
      m.second = ag::Matrix::Zero(p.value.rows(), p.value.cols());
    }
    m.first = options_.beta1 * m.first + (1.0 - options_.beta1) * p.grad;
    m.second = options_.beta2 * m.second + (1.0 - options_.beta2) * p.grad.cwiseAbs2();
    if (options_.learning_rate == 0.0) continue;
    p.value.array() -= options_.learning_rate * (m.first.array() / bc1) /
                       ((m.second.array() / bc2).sqrt() + options_.epsilon);
  }
}

ParameterSnapshot snapshot(const ag::ParameterStore& store) {
  ParameterSnapshot snap;
  for (const auto& [name, p] : store) snap.emplace(name, p.value);
  return snap;
}

void restore(ag::ParameterStore& store, const ParameterSnapshot& snap) {
  for (auto& [name, p] : store) {
    auto it = snap.find(name);
    if (it == snap.end()) throw std::runtime_error("snapshot missing parameter " + name);
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw std::runtime_error("snapshot shape mismatch for " + name);
    }
    p.value = it->second;
  }
}

}  // namespace tcdsr
