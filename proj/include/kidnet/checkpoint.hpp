// Checkpoints: `<base>.ckpt.json` manifest (config, seed, step, layer ids and
// shapes) plus `<base>.ckpt.raw` holding little-endian f32 weights then bias
// for every layer, in manifest order.

#pragma once

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "kidnet/network.hpp"

namespace kidnet {

inline constexpr const char* kCheckpointFormat = "kidnet-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  NetworkParams<float> params;
  std::int64_t step = 0;
};

/// Accepts `base`, `base.ckpt`, `base.ckpt.json` or `base.ckpt.raw`.
std::filesystem::path checkpoint_base(const std::filesystem::path& path);

void write_checkpoint(const std::filesystem::path& path, const NetworkParams<float>& params,
                      std::int64_t step);

/// Throws ParseError on a malformed manifest and IntegrityError when the
/// payload disagrees with it or holds non-finite values.
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace kidnet
