#pragma once

#include <cstdint>

#include "patronus/param_tree.hpp"

namespace patronus {
namespace lora {

// Low-rank adapters over conv kernels. A kernel [out, in, k, k] is treated as
// the matrix [out, in*k*k]; the adapted weight is W + (B A) / rank with
// A [rank, in*k*k] gaussian-initialised and B [out, rank] zero, so a freshly
// attached adapter is a forward no-op.

// a kernel takes an adapter iff the rank is strictly below its fan-in
bool eligible(const ParamEntry& entry, int rank);

// adapter tree with entries "<name>.lora_A" / "<name>.lora_B" per eligible
// kernel; throws ConfigError when the rank fits no kernel in the tree
ParamTree init_adapters(const ParamTree& base, int rank, uint64_t seed);

// base with adapted kernels replaced by W + (B A) / rank; all entries frozen
// (the adapters are the only trainable state during a LoRA attack)
ParamTree materialize(const ParamTree& base, const ParamTree& adapters, int rank);

// chain rule through the materialisation: given gradients w.r.t. the
// effective weights, accumulate dA = B^T dW / rank and dB = dW A^T / rank
void project_grads(const ParamTree& base, const ParamTree& adapters, const ParamTree& d_effective,
                   int rank, ParamTree* d_adapters);

}  // namespace lora
}  // namespace patronus
