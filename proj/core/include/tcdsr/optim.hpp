#pragma once

#include "tcdsr/autograd.hpp"

#include <map>
#include <string>

namespace tcdsr {

struct AdamOptions {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam over every trainable parameter of a store, using Parameter::grad.
class Adam {
 public:
  explicit Adam(AdamOptions options) : options_(options) {}

  void step(ag::ParameterStore& store);
  [[nodiscard]] long steps() const { return steps_; }
  [[nodiscard]] const AdamOptions& options() const { return options_; }

 private:
  struct Moments {
    ag::Matrix first;
    ag::Matrix second;
  };
  AdamOptions options_;
  long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

/// Plain copy of all parameter values, used for best-epoch snapshots.
using ParameterSnapshot = std::map<std::string, ag::Matrix>;
ParameterSnapshot snapshot(const ag::ParameterStore& store);
void restore(ag::ParameterStore& store, const ParameterSnapshot& snap);

}  // namespace tcdsr
