#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace patronus {

// splitmix64; used both as a standalone mixer for seed derivation and to
// seed the xoshiro state below.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stage seeds are derived from the global seed and a stage label so each
// stage is independently reproducible.
inline uint64_t derive_seed(uint64_t global_seed, const std::string& label) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the label
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  uint64_t s = global_seed ^ h;
  return splitmix64(s);
}

// xoshiro256** with a Box-Muller gaussian. Self-contained so draws are
// bit-identical across platforms (std::normal_distribution is not).
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    uint64_t threshold = (-n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
  }

  Rng fork(const std::string& label) { return Rng(derive_seed(next_u64(), label)); }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4]{};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace patronus
