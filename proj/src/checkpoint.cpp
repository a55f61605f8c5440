#include "patronus/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

namespace patronus {

namespace {

constexpr char kMagic[4] = {'P', 'T', 'R', 'N'};
constexpr uint8_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("checkpoint truncated while reading u32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}

float get_f32(std::istream& is) {
  uint32_t v = get_u32(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace

const char* to_string(NetworkKind k) {
  switch (k) {
    case NetworkKind::encoder: return "encoder";
    case NetworkKind::decoder: return "decoder";
    case NetworkKind::denoiser: return "denoiser";
    case NetworkKind::perceptual: return "perceptual";
    case NetworkKind::probe: return "probe";
  }
  return "?";
}

NetworkKind network_kind_from_string(const std::string& s) {
  if (s == "encoder") return NetworkKind::encoder;
  if (s == "decoder") return NetworkKind::decoder;
  if (s == "denoiser") return NetworkKind::denoiser;
  if (s == "perceptual") return NetworkKind::perceptual;
  if (s == "probe") return NetworkKind::probe;
  throw FormatError("unknown network_kind: " + s);
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));

  nlohmann::json meta;
  meta["network_kind"] = to_string(c.meta.kind);
  meta["stage"] = c.meta.stage;
  meta["seed"] = c.meta.seed;
  meta["iteration"] = c.meta.iteration;
  meta["entries"] = c.params.entries.size();
  nlohmann::json trainable = nlohmann::json::array();
  for (const auto& e : c.params.entries) trainable.push_back(e.trainable ? 1 : 0);
  meta["trainable"] = trainable;
  const std::string meta_str = meta.dump();
  put_u32(os, static_cast<uint32_t>(meta_str.size()));
  os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

  for (const auto& e : c.params.entries) {
    put_u32(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(os, static_cast<uint32_t>(e.values.shape.size()));
    for (int d : e.values.shape) put_u32(os, static_cast<uint32_t>(d));
    for (double x : e.values.v) put_f32(os, static_cast<float>(x));
  }
  if (!os) throw IoError("write failure on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad checkpoint magic in " + path);
  const int version = is.get();
  if (version != kVersion)
    throw FormatError("checkpoint version mismatch: expected " + std::to_string(kVersion) +
                      ", found " + std::to_string(version));

  const uint32_t meta_len = get_u32(is);
  std::string meta_str(meta_len, '\0');
  is.read(meta_str.data(), meta_len);
  if (!is) throw FormatError("checkpoint truncated in metadata block");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_str);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }

  Checkpoint c;
  c.meta.kind = network_kind_from_string(meta.at("network_kind").get<std::string>());
  c.meta.stage = meta.at("stage").get<std::string>();
  c.meta.seed = meta.at("seed").get<uint64_t>();
  c.meta.iteration = meta.at("iteration").get<uint64_t>();
  const size_t n_entries = meta.at("entries").get<size_t>();
  std::vector<int> trainable = meta.value("trainable", std::vector<int>{});

  for (size_t i = 0; i < n_entries; ++i) {
    const uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError("checkpoint truncated in entry name");
    const uint32_t rank = get_u32(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(get_u32(is));
    Tensor t(shape);
    for (auto& x : t.v) x = static_cast<double>(get_f32(is));
    const bool tr = i < trainable.size() ? trainable[i] != 0 : true;
    c.params.entries.push_back({std::move(name), std::move(t), tr});
  }
  if (!c.params.all_finite()) throw FormatError("checkpoint contains non-finite values: " + path);
  return c;
}

}  // namespace patronus
