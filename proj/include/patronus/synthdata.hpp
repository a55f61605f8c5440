#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patronus/tensor.hpp"

namespace patronus {

enum class UnsafeFamily { checker, stripes, glyph };

const char* to_string(UnsafeFamily f);
UnsafeFamily unsafe_family_from_string(const std::string& s);

struct DataConfig {
  int image_size = 32;  // must be a power of two >= 8
  int channels = 3;
  int n_benign_classes = 4;
  int n_per_class = 256;
  UnsafeFamily unsafe_family = UnsafeFamily::checker;
  double noise_std = 0.02;
  uint64_t seed = 0;

  void validate() const;
  int unsafe_id() const { return n_benign_classes; }
};

struct ImageBatch {
  Tensor pixels;            // [B, C, H, W], values in [0, 1]
  std::vector<int> labels;  // class id; == unsafe_id marks the unsafe family
  int unsafe_id = -1;

  int size() const { return pixels.shape.empty() ? 0 : pixels.dim(0); }
  bool is_unsafe(int i) const { return labels[static_cast<size_t>(i)] == unsafe_id; }
  bool all_unsafe() const;
  bool all_benign() const;

  ImageBatch select(const std::vector<int>& indices) const;
  // borrow one item as a [1,C,H,W] view copy
  Tensor item(int i) const;
};

struct SplitSpec {
  double tune = 0.5, eval = 0.25, test = 0.25;
  uint64_t seed = 0;

  void validate() const;
};

// class k drawn as a filled shape (circle / square / triangle / cross,
// cycling) with randomized position, scale and hue plus clamped pixel noise.
ImageBatch gen_benign(const DataConfig& config);

// the single unsafe family: high-frequency texture, all labels == unsafe_id
ImageBatch gen_unsafe(const DataConfig& config);

std::vector<ImageBatch> split(const ImageBatch& batch, const SplitSpec& spec);

ImageBatch concat(const ImageBatch& a, const ImageBatch& b);

// directory of lossless BMP files plus manifest.json (filename, label,
// safety flag, generator seed)
void dump_dataset(const ImageBatch& batch, uint64_t seed, const std::string& dir);

}  // namespace patronus
