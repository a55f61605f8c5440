#include "patronus/optim.hpp"

#include <cmath>

#include "patronus/errors.hpp"

namespace patronus {

namespace {
constexpr double kMomentumMu = 0.9;
constexpr double kAdamB1 = 0.9, kAdamB2 = 0.999, kAdamEps = 1e-8;
constexpr double kRmsDecay = 0.99, kRmsEps = 1e-8;
constexpr double kAdadeltaRho = 0.9, kAdadeltaEps = 1e-6;
}  // namespace

const char* to_string(OptKind k) {
  switch (k) {
    case OptKind::sgd: return "sgd";
    case OptKind::momentum: return "momentum";
    case OptKind::nesterov: return "nesterov";
    case OptKind::adam: return "adam";
    case OptKind::adadelta: return "adadelta";
    case OptKind::rmsprop: return "rmsprop";
  }
  return "?";
}

OptKind opt_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "momentum" || s == "momentum_sgd") return OptKind::momentum;
  if (s == "nesterov") return OptKind::nesterov;
  if (s == "adam") return OptKind::adam;
  if (s == "adadelta") return OptKind::adadelta;
  if (s == "rmsprop") return OptKind::rmsprop;
  throw ConfigError("unknown optimizer kind: " + s);
}

Optimizer::Optimizer(OptKind kind, double lr, const ParamTree& shape) : kind_(kind), lr_(lr) {
  if (!(lr > 0.0)) throw ConfigError("optimizer lr must be > 0");
  for (const auto& e : shape.entries) {
    s1_.emplace_back(e.values.shape);
    s2_.emplace_back(e.values.shape);
  }
}

void Optimizer::set_lr(double lr) {
  if (!(lr > 0.0)) throw ConfigError("optimizer lr must be > 0");
  lr_ = lr;
}

void Optimizer::step(ParamTree& params, const ParamTree& grads) {
  if (params.entries.size() != s1_.size() || grads.entries.size() != s1_.size())
    throw ContractError("optimizer/parameter shape mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(kAdamB1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kAdamB2, static_cast<double>(t_));

  for (size_t e = 0; e < params.entries.size(); ++e) {
    auto& entry = params.entries[e];
    if (!entry.trainable) continue;
    auto& p = entry.values.v;
    const auto& g = grads.entries[e].values.v;
    auto& m1 = s1_[e].v;
    auto& m2 = s2_[e].v;
    switch (kind_) {
      case OptKind::sgd:
        for (size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * g[i];
        break;
      case OptKind::momentum:
        for (size_t i = 0; i < p.size(); ++i) {
          m1[i] = kMomentumMu * m1[i] + g[i];
          p[i] -= lr_ * m1[i];
        }
        break;
      case OptKind::nesterov:
        for (size_t i = 0; i < p.size(); ++i) {
          m1[i] = kMomentumMu * m1[i] + g[i];
          p[i] -= lr_ * (g[i] + kMomentumMu * m1[i]);
        }
        break;
      case OptKind::adam:
        for (size_t i = 0; i < p.size(); ++i) {
          m1[i] = kAdamB1 * m1[i] + (1.0 - kAdamB1) * g[i];
          m2[i] = kAdamB2 * m2[i] + (1.0 - kAdamB2) * g[i] * g[i];
          p[i] -= lr_ * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + kAdamEps);
        }
        break;
      case OptKind::rmsprop:
        for (size_t i = 0; i < p.size(); ++i) {
          m2[i] = kRmsDecay * m2[i] + (1.0 - kRmsDecay) * g[i] * g[i];
          p[i] -= lr_ * g[i] / (std::sqrt(m2[i]) + kRmsEps);
        }
        break;
      case OptKind::adadelta:
        for (size_t i = 0; i < p.size(); ++i) {
          m2[i] = kAdadeltaRho * m2[i] + (1.0 - kAdadeltaRho) * g[i] * g[i];
          const double dx = -std::sqrt(m1[i] + kAdadeltaEps) / std::sqrt(m2[i] + kAdadeltaEps) * g[i];
          m1[i] = kAdadeltaRho * m1[i] + (1.0 - kAdadeltaRho) * dx * dx;
          p[i] += lr_ * dx;
        }
        break;
    }
  }
}

}  // namespace patronus
