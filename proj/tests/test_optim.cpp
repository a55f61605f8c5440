#include <cmath>
#include <vector>

#include "doctest.h"
#include "patronus/errors.hpp"
#include "patronus/optim.hpp"
#include "patronus/rng.hpp"

using namespace patronus;

namespace {

// standalone update rules mirroring the documented fixed hyperparameters
struct Ref {
  OptKind kind;
  double lr;
  int64_t t = 0;
  std::vector<double> s1, s2;

  explicit Ref(OptKind k, double lr_, size_t n) : kind(k), lr(lr_), s1(n, 0.0), s2(n, 0.0) {}

  void step(std::vector<double>& w, const std::vector<double>& g) {
    ++t;
    for (size_t i = 0; i < w.size(); ++i) {
      switch (kind) {
        case OptKind::sgd: w[i] -= lr * g[i]; break;
        case OptKind::momentum:
          s1[i] = 0.9 * s1[i] + g[i];
          w[i] -= lr * s1[i];
          break;
        case OptKind::nesterov:
          s1[i] = 0.9 * s1[i] + g[i];
          w[i] -= lr * (g[i] + 0.9 * s1[i]);
          break;
        case OptKind::adam: {
          s1[i] = 0.9 * s1[i] + 0.1 * g[i];
          s2[i] = 0.999 * s2[i] + 0.001 * g[i] * g[i];
          const double mh = s1[i] / (1.0 - std::pow(0.9, static_cast<double>(t)));
          const double vh = s2[i] / (1.0 - std::pow(0.999, static_cast<double>(t)));
          w[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
          break;
        }
        case OptKind::rmsprop:
          s1[i] = 0.99 * s1[i] + 0.01 * g[i] * g[i];
          w[i] -= lr * g[i] / (std::sqrt(s1[i]) + 1e-8);
          break;
        case OptKind::adadelta: {
          s1[i] = 0.9 * s1[i] + 0.1 * g[i] * g[i];
          const double dx = std::sqrt(s2[i] + 1e-6) / std::sqrt(s1[i] + 1e-6) * g[i];
          s2[i] = 0.9 * s2[i] + 0.1 * dx * dx;
          w[i] -= lr * dx;
          break;
        }
      }
    }
  }
};

ParamTree make_params(const std::vector<double>& w) {
  ParamTree p;
  Tensor t({static_cast<int>(w.size())});
  t.v = w;
  p.add("w", t, true);
  return p;
}

}  // namespace

TEST_CASE("every optimizer matches an independent reference on a quadratic") {
  // minimize sum (w_i - c_i)^2; gradient 2(w - c)
  for (OptKind k : {OptKind::sgd, OptKind::momentum, OptKind::nesterov, OptKind::adam,
                    OptKind::adadelta, OptKind::rmsprop}) {
    CAPTURE(to_string(k));
    Rng rng(77);
    std::vector<double> w(5), c(5);
    for (auto& x : w) x = rng.normal();
    for (auto& x : c) x = rng.normal();
    ParamTree p = make_params(w);
    Optimizer opt(k, 0.05, p);
    Ref ref(k, 0.05, w.size());
    for (int it = 0; it < 10; ++it) {
      ParamTree g = p.zeros_like();
      std::vector<double> gr(5);
      for (size_t i = 0; i < w.size(); ++i) {
        gr[i] = 2.0 * (w[i] - c[i]);
        g[0][static_cast<int64_t>(i)] = 2.0 * (p[0][static_cast<int64_t>(i)] - c[i]);
      }
      opt.step(p, g);
      ref.step(w, gr);
      for (size_t i = 0; i < w.size(); ++i)
        CHECK(p[0][static_cast<int64_t>(i)] == doctest::Approx(w[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("sgd hand-computed step") {
  ParamTree p = make_params({0.0, 0.0});
  ParamTree g = p.zeros_like();
  g[0][0] = 1.0;
  g[0][1] = -2.0;
  Optimizer opt(OptKind::sgd, 0.1, p);
  opt.step(p, g);
  CHECK(p[0][0] == doctest::Approx(-0.1).epsilon(1e-15));
  CHECK(p[0][1] == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("adam first step has magnitude ~lr regardless of gradient scale") {
  for (double scale : {1e-4, 1.0, 1e4}) {
    ParamTree p = make_params({0.0});
    ParamTree g = p.zeros_like();
    g[0][0] = scale;
    Optimizer opt(OptKind::adam, 1e-3, p);
    opt.step(p, g);
    CHECK(std::abs(p[0][0] + 1e-3) < 1e-6);
  }
}

TEST_CASE("frozen entries are never updated") {
  ParamTree p;
  Tensor a({2}), b({2});
  a[0] = 1.0;
  b[0] = 5.0;
  p.add("train", a, true);
  p.add("frozen", b, false);
  ParamTree g = p.zeros_like();
  g[0][0] = 1.0;
  g[1][0] = 1.0;  // must be ignored
  for (OptKind k : {OptKind::sgd, OptKind::adam, OptKind::rmsprop}) {
    ParamTree q = p;
    Optimizer opt(k, 0.1, q);
    opt.step(q, g);
    CHECK(q[0][0] != p[0][0]);
    CHECK(q[1][0] == 5.0);
    CHECK(q[1][1] == 0.0);
  }
}

TEST_CASE("optimizer kind names roundtrip; unknown name is a config error") {
  for (OptKind k : {OptKind::sgd, OptKind::momentum, OptKind::nesterov, OptKind::adam,
                    OptKind::adadelta, OptKind::rmsprop})
    CHECK(opt_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(opt_kind_from_string("lbfgs"), ConfigError);
}
