#pragma once

#include <cstdint>
#include <random>

namespace tcyolo {

using Rng = std::mt19937_64;

// Uniform double in [0, 1) from the top 53 bits. Unlike the standard
// distributions this gives the same stream on every standard library.
inline double uniform01(Rng& rng) { return double(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  return std::uint64_t(uniform01(rng) * double(n)) % n;
}

}  // namespace tcyolo
