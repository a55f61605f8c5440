#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

#include "patronus/rng.hpp"

namespace patronus {

// Dense row-major double tensor. All model math runs in double so the
// finite-difference gradient suite holds at 1e-4 relative error.
struct Tensor {
  std::vector<double> v;
  std::vector<int> shape;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) { v.assign(numel(shape), 0.0); }
  Tensor(std::vector<int> s, double fill) : shape(std::move(s)) { v.assign(numel(shape), fill); }

  static int64_t numel(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(v.size()); }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  // [B,C,H,W] accessor
  double& at4(int b, int c, int h, int w) {
    return v[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  double at4(int b, int c, int h, int w) const {
    return v[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  void add_(const Tensor& o) {
    assert(o.size() == size());
    for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
  }
  void scale_(double a) {
    for (auto& x : v) x *= a;
  }

  static Tensor randn(std::vector<int> s, Rng& rng, double std_dev = 1.0) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = rng.normal() * std_dev;
    return t;
  }
};

inline double mse(const Tensor& a, const Tensor& b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    double d = a.v[i] - b.v[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace patronus
