#pragma once

#include <cstdint>
#include <random>

namespace devi {

using Rng = std::mt19937_64;

// SplitMix64 finalizer.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Seed for an independent random stream derived from a base seed.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix_seed(base ^ mix_seed(stream));
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                                    std::uint64_t sub) {
  return derive_seed(derive_seed(base, stream), sub);
}

// Named streams so that independent consumers never share draws.
namespace streams {
inline constexpr std::uint64_t kTask = 0x7461736bull;
inline constexpr std::uint64_t kData = 0x64617461ull;
inline constexpr std::uint64_t kInit = 0x696e6974ull;
inline constexpr std::uint64_t kStore = 0x73746f72ull;
inline constexpr std::uint64_t kBatch = 0x62617463ull;
inline constexpr std::uint64_t kEval = 0x6576616cull;
inline constexpr std::uint64_t kGlyph = 0x676c7970ull;
}  // namespace streams

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace devi
