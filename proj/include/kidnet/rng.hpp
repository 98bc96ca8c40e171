#pragma once

#include <cstdint>
#include <random>

namespace kidnet {

using Rng = std::mt19937_64;

// Sub-seed derivation: every consumer of randomness gets its own stream,
// seeded with splitmix64(base ^ splitmix64(stream)). Streams are fixed
// integers, so adding a consumer never perturbs the others.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream));
}

inline Rng make_rng(std::uint64_t base, std::uint64_t stream) {
  return Rng(derive_seed(base, stream));
}

namespace streams {
inline constexpr std::uint64_t kPhantomGeometry = 1;
inline constexpr std::uint64_t kPhantomNoise = 2;
inline constexpr std::uint64_t kPhantomFragment = 3;
inline constexpr std::uint64_t kNetworkInit = 10;
inline constexpr std::uint64_t kTrainShuffle = 20;
inline constexpr std::uint64_t kTrainAugment = 21;
inline constexpr std::uint64_t kTrainSampling = 22;
inline constexpr std::uint64_t kSliceBase = 1000;
inline constexpr std::uint64_t kTrainPhantomBase = 100000;
inline constexpr std::uint64_t kHeldoutPhantomBase = 200000;
}  // namespace streams

}  // namespace kidnet
