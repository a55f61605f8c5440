#pragma once

#include <cmath>
#include <vector>

#include "patronus/errors.hpp"

namespace patronus {

// Linear-beta DDPM schedule with cached cumulative products.
struct DiffusionSchedule {
  int T = 50;
  std::vector<double> betas;       // strictly increasing in (0,1)
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // cumulative product, strictly decreasing

  static DiffusionSchedule linear(int T = 50, double beta_start = 1e-4, double beta_end = 0.02) {
    if (T < 2) throw ConfigError("DiffusionSchedule: T must be >= 2");
    DiffusionSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
      s.betas[t] = beta_start + (beta_end - beta_start) * t / (T - 1);
      s.alphas[t] = 1.0 - s.betas[t];
      prod *= s.alphas[t];
      s.alpha_bars[t] = prod;
    }
    return s;
  }

  double signal_coeff(int t) const { return std::sqrt(alpha_bars[t]); }
  double noise_coeff(int t) const { return std::sqrt(1.0 - alpha_bars[t]); }
};

}  // namespace patronus
