#pragma once

// Seed derivation. Every random stream is seeded from a named seed mixed
// with a stream tag so distinct consumers never share a generator state.

#include <cstdint>
#include <random>

namespace mics {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) { return splitmix64(seed ^ splitmix64(tag)); }

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t tag) { return std::mt19937_64(derive_seed(seed, tag)); }

}  // namespace mics
