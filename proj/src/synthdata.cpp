#include "patronus/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "patronus/errors.hpp"
#include "patronus/image_io.hpp"
#include "patronus/rng.hpp"

namespace patronus {

const char* to_string(UnsafeFamily f) {
  switch (f) {
    case UnsafeFamily::checker: return "checker";
    case UnsafeFamily::stripes: return "stripes";
    case UnsafeFamily::glyph: return "glyph";
  }
  return "?";
}

UnsafeFamily unsafe_family_from_string(const std::string& s) {
  if (s == "checker") return UnsafeFamily::checker;
  if (s == "stripes") return UnsafeFamily::stripes;
  if (s == "glyph") return UnsafeFamily::glyph;
  throw ConfigError("unsafe_family: unknown value '" + s + "'");
}

void DataConfig::validate() const {
  if (image_size < 8 || (image_size & (image_size - 1)) != 0)
    throw ConfigError("image_size: must be a power of two >= 8, got " +
                      std::to_string(image_size));
  if (channels < 1) throw ConfigError("channels: must be >= 1");
  if (n_benign_classes < 2)
    throw ConfigError("n_benign_classes: must be >= 2, got " + std::to_string(n_benign_classes));
  if (n_per_class < 32)
    throw ConfigError("n_per_class: must be >= 32, got " + std::to_string(n_per_class));
  if (noise_std < 0.0 || noise_std > 0.1)
    throw ConfigError("noise_std: must be in [0, 0.1], got " + std::to_string(noise_std));
}

bool ImageBatch::all_unsafe() const {
  for (int l : labels)
    if (l != unsafe_id) return false;
  return true;
}

bool ImageBatch::all_benign() const {
  for (int l : labels)
    if (l == unsafe_id) return false;
  return true;
}

ImageBatch ImageBatch::select(const std::vector<int>& indices) const {
  const int C = pixels.dim(1), H = pixels.dim(2), W = pixels.dim(3);
  ImageBatch out;
  out.unsafe_id = unsafe_id;
  out.pixels = Tensor({static_cast<int>(indices.size()), C, H, W});
  out.labels.reserve(indices.size());
  const size_t item = static_cast<size_t>(C) * H * W;
  for (size_t k = 0; k < indices.size(); ++k) {
    const int i = indices[k];
    std::copy_n(pixels.data() + static_cast<size_t>(i) * item, item,
                out.pixels.data() + k * item);
    out.labels.push_back(labels[static_cast<size_t>(i)]);
  }
  return out;
}

Tensor ImageBatch::item(int i) const {
  const int C = pixels.dim(1), H = pixels.dim(2), W = pixels.dim(3);
  Tensor t({1, C, H, W});
  const size_t item_sz = static_cast<size_t>(C) * H * W;
  std::copy_n(pixels.data() + static_cast<size_t>(i) * item_sz, item_sz, t.data());
  return t;
}

void SplitSpec::validate() const {
  for (double f : {tune, eval, test})
    if (f <= 0.0 || f >= 1.0) throw ConfigError("split fractions must each lie in (0,1)");
  if (std::abs(tune + eval + test - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
}

namespace {

struct Hue {
  double r, g, b;
};

Hue random_hue(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

void paint(Tensor& px, int item, int ch_count, int y, int x, const Hue& h) {
  const double v[3] = {h.r, h.g, h.b};
  for (int c = 0; c < ch_count; ++c) px.at4(item, c, y, x) = v[c % 3];
}

// Benign classes are filled shapes; the mask is evaluated per pixel.
bool shape_mask(int kind, double ny, double nx, double cy, double cx, double s) {
  const double dy = ny - cy, dx = nx - cx;
  switch (kind) {
    case 0:  // circle
      return dy * dy + dx * dx <= s * s;
    case 1:  // square
      return std::abs(dy) <= s && std::abs(dx) <= s;
    case 2:  // upward triangle
      return dy >= -s && dy <= s && std::abs(dx) <= (dy + s) * 0.5;
    default:  // cross
      return (std::abs(dy) <= s * 0.35 && std::abs(dx) <= s) ||
             (std::abs(dx) <= s * 0.35 && std::abs(dy) <= s);
  }
}

void add_noise_clamp(Tensor& px, int item, const DataConfig& cfg, Rng& rng) {
  const int C = px.dim(1), H = px.dim(2), W = px.dim(3);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double v = px.at4(item, c, y, x) + cfg.noise_std * rng.normal();
        px.at4(item, c, y, x) = std::clamp(v, 0.0, 1.0);
      }
}

}  // namespace

ImageBatch gen_benign(const DataConfig& config) {
  config.validate();
  const int S = config.image_size, C = config.channels;
  const int n = config.n_benign_classes * config.n_per_class;
  ImageBatch out;
  out.unsafe_id = config.unsafe_id();
  out.pixels = Tensor({n, C, S, S});
  out.labels.resize(static_cast<size_t>(n));

  Rng rng(derive_seed(config.seed, "benign"));
  int item = 0;
  for (int k = 0; k < config.n_benign_classes; ++k) {
    for (int j = 0; j < config.n_per_class; ++j, ++item) {
      out.labels[static_cast<size_t>(item)] = k;
      const Hue bg = random_hue(rng, 0.0, 0.25);
      const Hue fg = random_hue(rng, 0.55, 1.0);
      const double cy = rng.uniform(0.35, 0.65), cx = rng.uniform(0.35, 0.65);
      const double s = rng.uniform(0.18, 0.3);
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double ny = (y + 0.5) / S, nx = (x + 0.5) / S;
          paint(out.pixels, item, C, y, x, shape_mask(k % 4, ny, nx, cy, cx, s) ? fg : bg);
        }
      add_noise_clamp(out.pixels, item, config, rng);
    }
  }
  return out;
}

ImageBatch gen_unsafe(const DataConfig& config) {
  config.validate();
  const int S = config.image_size, C = config.channels;
  const int n = config.n_per_class;
  ImageBatch out;
  out.unsafe_id = config.unsafe_id();
  out.pixels = Tensor({n, C, S, S});
  out.labels.assign(static_cast<size_t>(n), config.unsafe_id());

  Rng rng(derive_seed(config.seed, "unsafe"));
  for (int item = 0; item < n; ++item) {
    const Hue a = random_hue(rng, 0.6, 1.0);
    const Hue b = random_hue(rng, 0.0, 0.3);
    const int period = 4 + static_cast<int>(rng.uniform_int(4));  // 4..7 px
    const int phase_y = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(period) * 2));
    const int phase_x = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(period) * 2));
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        bool on = false;
        switch (config.unsafe_family) {
          case UnsafeFamily::checker:
            on = (((y + phase_y) / period) + ((x + phase_x) / period)) % 2 == 0;
            break;
          case UnsafeFamily::stripes:
            on = ((x + y + phase_x) / period) % 2 == 0;
            break;
          case UnsafeFamily::glyph: {
            // dotted lattice: bright dots on a coarse grid
            const int gy = (y + phase_y) % (period * 2), gx = (x + phase_x) % (period * 2);
            on = gy < period && gx < period && ((gy + gx) % 2 == 0);
            break;
          }
        }
        paint(out.pixels, item, C, y, x, on ? a : b);
      }
    add_noise_clamp(out.pixels, item, config, rng);
  }
  return out;
}

std::vector<ImageBatch> split(const ImageBatch& batch, const SplitSpec& spec) {
  spec.validate();
  const int n = batch.size();
  if (n == 0) throw ConfigError("split: batch is empty");
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(spec.seed, "split"));
  for (int i = n - 1; i > 0; --i) {  // Fisher-Yates
    const int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i) + 1));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  const int n_tune = static_cast<int>(spec.tune * n);
  const int n_eval = static_cast<int>(spec.eval * n);
  const int n_test = n - n_tune - n_eval;
  if (n_tune <= 0 || n_eval <= 0 || n_test <= 0)
    throw ConfigError("split: a split received 0 items (n=" + std::to_string(n) + ")");

  std::vector<ImageBatch> out;
  out.push_back(batch.select({idx.begin(), idx.begin() + n_tune}));
  out.push_back(batch.select({idx.begin() + n_tune, idx.begin() + n_tune + n_eval}));
  out.push_back(batch.select({idx.begin() + n_tune + n_eval, idx.end()}));
  return out;
}

ImageBatch concat(const ImageBatch& a, const ImageBatch& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  ImageBatch out;
  out.unsafe_id = a.unsafe_id;
  std::vector<int> shape = a.pixels.shape;
  shape[0] = a.size() + b.size();
  out.pixels = Tensor(shape);
  std::copy(a.pixels.v.begin(), a.pixels.v.end(), out.pixels.v.begin());
  std::copy(b.pixels.v.begin(), b.pixels.v.end(),
            out.pixels.v.begin() + static_cast<int64_t>(a.pixels.v.size()));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

void dump_dataset(const ImageBatch& batch, uint64_t seed, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const int C = batch.pixels.dim(1), H = batch.pixels.dim(2), W = batch.pixels.dim(3);
  nlohmann::json manifest = nlohmann::json::array();
  for (int i = 0; i < batch.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d.bmp", i);
    std::vector<uint8_t> rgb(static_cast<size_t>(H) * W * 3);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) {
          const double v = batch.pixels.at4(i, std::min(c, C - 1), y, x);
          rgb[(static_cast<size_t>(y) * W + x) * 3 + c] =
              static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
    write_bmp(dir + "/" + name, W, H, rgb);
    manifest.push_back({{"filename", name},
                        {"label", batch.labels[static_cast<size_t>(i)]},
                        {"unsafe", batch.is_unsafe(i)},
                        {"seed", seed}});
  }
  std::ofstream os(dir + "/manifest.json");
  if (!os) throw IoError("cannot write manifest.json in " + dir);
  os << manifest.dump(2) << "\n";
}

}  // namespace patronus
