#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patronus/errors.hpp"
#include "patronus/tensor.hpp"

namespace patronus {

struct ParamEntry {
  std::string name;
  Tensor values;  // shape lives on the tensor
  bool trainable = true;
};

// Named, ordered parameter collection for one network; the unit of
// checkpointing, fine-tuning and gradient bookkeeping.
struct ParamTree {
  std::vector<ParamEntry> entries;

  int add(const std::string& name, Tensor t, bool trainable = true) {
    if (index_of(name) >= 0) throw ContractError("duplicate parameter name: " + name);
    entries.push_back({name, std::move(t), trainable});
    return static_cast<int>(entries.size()) - 1;
  }

  int index_of(const std::string& name) const {
    for (size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name == name) return static_cast<int>(i);
    return -1;
  }

  Tensor& operator[](int i) { return entries[static_cast<size_t>(i)].values; }
  const Tensor& operator[](int i) const { return entries[static_cast<size_t>(i)].values; }

  Tensor& at(const std::string& name) {
    int i = index_of(name);
    if (i < 0) throw ContractError("no parameter named " + name);
    return entries[static_cast<size_t>(i)].values;
  }
  const Tensor& at(const std::string& name) const {
    int i = index_of(name);
    if (i < 0) throw ContractError("no parameter named " + name);
    return entries[static_cast<size_t>(i)].values;
  }

  // same names/shapes, all values zero; used for gradient accumulators
  ParamTree zeros_like() const {
    ParamTree g;
    for (const auto& e : entries) g.entries.push_back({e.name, Tensor(e.values.shape), e.trainable});
    return g;
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.values.size();
    return n;
  }

  int64_t trainable_params() const {
    int64_t n = 0;
    for (const auto& e : entries)
      if (e.trainable) n += e.values.size();
    return n;
  }

  std::vector<double> flatten_trainable() const {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(trainable_params()));
    for (const auto& e : entries)
      if (e.trainable) out.insert(out.end(), e.values.v.begin(), e.values.v.end());
    return out;
  }

  void add_scaled(const ParamTree& g, double a) {
    for (size_t i = 0; i < entries.size(); ++i)
      for (size_t j = 0; j < entries[i].values.v.size(); ++j)
        entries[i].values.v[j] += a * g.entries[i].values.v[j];
  }

  bool all_finite() const {
    for (const auto& e : entries)
      for (double x : e.values.v)
        if (!std::isfinite(x)) return false;
    return true;
  }

  // FNV-1a over the raw value bytes; detects any parameter mutation
  uint64_t content_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : entries) {
      for (unsigned char c : e.name) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
      const auto* bytes = reinterpret_cast<const unsigned char*>(e.values.v.data());
      for (size_t i = 0; i < e.values.v.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }
};

inline bool same_values(const ParamTree& a, const ParamTree& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (size_t i = 0; i < a.entries.size(); ++i) {
    if (a.entries[i].name != b.entries[i].name) return false;
    if (a.entries[i].values.v != b.entries[i].values.v) return false;
  }
  return true;
}

}  // namespace patronus
