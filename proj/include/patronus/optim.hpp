#pragma once

#include <string>
#include <vector>

#include "patronus/param_tree.hpp"

namespace patronus {

// The attack zoo plus the two inner-loop optimizers. Hyperparameters are
// fixed: momentum/nesterov mu=0.9; adam (0.9, 0.999, 1e-8); rmsprop decay
// 0.99, eps=1e-8; adadelta rho=0.9, eps=1e-6.
enum class OptKind { sgd, momentum, nesterov, adam, adadelta, rmsprop };

const char* to_string(OptKind k);
OptKind opt_kind_from_string(const std::string& s);

class Optimizer {
 public:
  Optimizer(OptKind kind, double lr, const ParamTree& shape);

  // one update over the trainable entries; grads must be shape-compatible
  void step(ParamTree& params, const ParamTree& grads);

  OptKind kind() const { return kind_; }
  double lr() const { return lr_; }
  void set_lr(double lr);  // for schedules; must stay > 0

 private:
  OptKind kind_;
  double lr_;
  int64_t t_ = 0;
  std::vector<Tensor> s1_, s2_;  // per-entry state slots
};

}  // namespace patronus
