#include "patronus/lora.hpp"

#include "patronus/errors.hpp"
#include "patronus/rng.hpp"

namespace patronus {
namespace lora {

namespace {

// [out, in, k, k] kernels only; biases and scalars pass through untouched
bool is_kernel(const ParamEntry& e) { return e.values.shape.size() == 4 && e.trainable; }

int fan_in(const ParamEntry& e) { return e.values.dim(1) * e.values.dim(2) * e.values.dim(3); }

}  // namespace

bool eligible(const ParamEntry& entry, int rank) {
  return is_kernel(entry) && rank < fan_in(entry);
}

ParamTree init_adapters(const ParamTree& base, int rank, uint64_t seed) {
  if (rank < 1) throw ConfigError("lora rank must be >= 1");
  Rng rng(derive_seed(seed, "lora"));
  ParamTree adapters;
  for (const auto& e : base.entries) {
    if (!eligible(e, rank)) continue;
    adapters.add(e.name + ".lora_A", Tensor::randn({rank, fan_in(e)}, rng, 0.01), true);
    adapters.add(e.name + ".lora_B", Tensor({e.values.dim(0), rank}), true);
  }
  if (adapters.entries.empty())
    throw ConfigError("lora rank " + std::to_string(rank) + " fits no kernel in this network");
  return adapters;
}

ParamTree materialize(const ParamTree& base, const ParamTree& adapters, int rank) {
  ParamTree eff = base;
  const double inv_r = 1.0 / static_cast<double>(rank);
  for (auto& e : eff.entries) {
    e.trainable = false;
    const int ia = adapters.index_of(e.name + ".lora_A");
    if (ia < 0) continue;
    const Tensor& A = adapters[ia];
    const Tensor& B = adapters.at(e.name + ".lora_B");
    const int out = e.values.dim(0), fin = fan_in(e);
    for (int o = 0; o < out; ++o)
      for (int j = 0; j < fin; ++j) {
        double s = 0.0;
        for (int r = 0; r < rank; ++r)
          s += B[static_cast<int64_t>(o) * rank + r] * A[static_cast<int64_t>(r) * fin + j];
        e.values[static_cast<int64_t>(o) * fin + j] += s * inv_r;
      }
  }
  return eff;
}

void project_grads(const ParamTree& base, const ParamTree& adapters, const ParamTree& d_effective,
                   int rank, ParamTree* d_adapters) {
  const double inv_r = 1.0 / static_cast<double>(rank);
  for (size_t i = 0; i < base.entries.size(); ++i) {
    const auto& e = base.entries[i];
    const int ia = adapters.index_of(e.name + ".lora_A");
    if (ia < 0) continue;
    const Tensor& A = adapters[ia];
    const Tensor& B = adapters.at(e.name + ".lora_B");
    const Tensor& dW = d_effective[static_cast<int>(i)];
    Tensor& dA = d_adapters->at(e.name + ".lora_A");
    Tensor& dB = d_adapters->at(e.name + ".lora_B");
    const int out = e.values.dim(0), fin = fan_in(e);
    for (int r = 0; r < rank; ++r)
      for (int j = 0; j < fin; ++j) {
        double s = 0.0;
        for (int o = 0; o < out; ++o)
          s += B[static_cast<int64_t>(o) * rank + r] * dW[static_cast<int64_t>(o) * fin + j];
        dA[static_cast<int64_t>(r) * fin + j] += s * inv_r;
      }
    for (int o = 0; o < out; ++o)
      for (int r = 0; r < rank; ++r) {
        double s = 0.0;
        for (int j = 0; j < fin; ++j)
          s += dW[static_cast<int64_t>(o) * fin + j] * A[static_cast<int64_t>(r) * fin + j];
        dB[static_cast<int64_t>(o) * rank + r] += s * inv_r;
      }
  }
}

}  // namespace lora
}  // namespace patronus
