// Serial vs OpenMP conv kernel comparison. The two paths share their
// accumulation order, so besides timing this doubles as a bit-equality
// check on realistic shapes.
#include <chrono>
#include <cstdio>
#include <functional>

#include "patronus/kernels.hpp"
#include "patronus/rng.hpp"
#include "patronus/tensor.hpp"

using namespace patronus;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void bench_case(int B, int ci, int co, int hw, int stride, int reps) {
  Rng rng(42);
  Tensor in = Tensor::randn({B, ci, hw, hw}, rng);
  Tensor w = Tensor::randn({co, ci, 3, 3}, rng, 0.1);
  Tensor b = Tensor::randn({co}, rng, 0.1);
  const int out_hw = (hw + 2 - 3) / stride + 1;
  Tensor out_s({B, co, out_hw, out_hw}), out_p({B, co, out_hw, out_hw});

  const double ms_serial =
      time_ms([&] { kernels::conv3x3_forward_serial(in, w, b, out_s, stride); }, reps);
  const double ms_omp =
      time_ms([&] { kernels::conv3x3_forward_omp(in, w, b, out_p, stride); }, reps);
  const bool identical = out_s.v == out_p.v;

  std::printf("conv3x3 B=%-3d %3dx%-3d ci=%-3d co=%-3d s=%d | serial %8.3f ms | omp %8.3f ms | "
              "speedup %.2fx | bit-identical: %s\n",
              B, hw, hw, ci, co, stride, ms_serial, ms_omp, ms_serial / ms_omp,
              identical ? "yes" : "NO");
}

}  // namespace

int main() {
  bench_case(16, 3, 16, 32, 1, 20);
  bench_case(16, 16, 16, 32, 1, 10);
  bench_case(16, 16, 32, 32, 2, 10);
  bench_case(64, 16, 16, 8, 1, 50);
  bench_case(64, 4, 16, 8, 1, 50);
  bench_case(128, 16, 16, 8, 1, 20);
  return 0;
}
