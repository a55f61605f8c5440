#pragma once

#include <cstdint>
#include <string>

#include "patronus/param_tree.hpp"

namespace patronus {

enum class NetworkKind { encoder, decoder, denoiser, perceptual, probe };

const char* to_string(NetworkKind k);
NetworkKind network_kind_from_string(const std::string& s);

struct CheckpointMeta {
  NetworkKind kind = NetworkKind::encoder;
  std::string stage;  // training-stage tag, e.g. "pretrain", "moderated", "hardened"
  uint64_t seed = 0;
  uint64_t iteration = 0;
};

struct Checkpoint {
  CheckpointMeta meta;
  ParamTree params;
};

// On-disk layout: "PTRN", version byte 1, u32 LE metadata length + UTF-8
// JSON metadata, then per-entry records (u32 name length + name, u32 rank +
// u32 dims, raw little-endian float32 values). Values are stored as float32,
// so save is lossy for params not representable in single precision;
// load(save(c)) is bit-exact once values are float32-representable.
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace patronus
