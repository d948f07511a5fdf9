#pragma once

#include <cstdint>
#include <random>

namespace bgdx {

// splitmix64: used to derive independent sub-seeds from a master seed so that
// parallel trials reproduce regardless of worker count or scheduling.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
  return splitmix64(splitmix64(master) ^ splitmix64(stream * 0x9e3779b97f4a7c15ull + 1));
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(splitmix64(seed ^ 0xc0ffee123456789aull)); }

inline uint32_t uniform_u32(Rng& rng, uint32_t lo, uint32_t hi) {  // inclusive bounds
  return std::uniform_int_distribution<uint32_t>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline bool chance(Rng& rng, double p) { return uniform_real(rng) < p; }

}  // namespace bgdx
