#pragma once

#include <cstdint>
#include <random>

namespace fundps {

/// SplitMix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Seed for stream `index` under `master`; distinct indices give unrelated streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return mix_seed(mix_seed(master) ^ mix_seed(index + 0x5851F42D4C957F2Dull));
}

using Rng = std::mt19937_64;

}  // namespace fundps
