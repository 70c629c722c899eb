#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "cfft/tensor.hpp"

namespace cfft {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// PCG32 (Melissa O'Neill's pcg32_random_r). Self-contained so that streams are
// bit-identical across platforms and standard-library versions.
class Pcg32 {
 public:
  Pcg32(uint64_t init_state, uint64_t init_seq) {
    state_ = 0;
    inc_ = (init_seq << 1u) | 1u;
    next_u32();
    state_ += init_state;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  uint64_t next_u64() {
    uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Unbiased bounded draw (rejection sampling).
  uint32_t uniform_u32(uint32_t bound) {
    uint32_t threshold = (-bound) % bound;
    for (;;) {
      uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  // Uniform in [0, 1), 32-bit resolution.
  double uniform() { return next_u32() * 0x1p-32; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; draws two uniforms per call (no cached second value, so the
  // stream advance is call-count deterministic).
  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  uint64_t state_;
  uint64_t inc_;
};

// Named independent streams: the draw sequence of one purpose never shifts
// another purpose's sequence.
inline Pcg32 rng_stream(uint64_t seed, std::string_view purpose, uint64_t index) {
  uint64_t h = fnv1a64(purpose.data(), purpose.size());
  uint64_t s0 = seed ^ h;
  uint64_t s1 = index * 0x9e3779b97f4a7c15ull + h;
  uint64_t a = splitmix64(s0);
  s0 ^= s1;
  uint64_t b = splitmix64(s0);
  return Pcg32(a, b);
}

// Stateless per-element noise in [0,1): hash of (seed, index). Used where the
// value for element i must not depend on evaluation order.
inline float hash_noise(uint64_t seed, uint64_t index) {
  uint64_t s = seed ^ (index * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull);
  uint64_t z = splitmix64(s);
  return static_cast<float>((z >> 40) * 0x1p-24);
}

}  // namespace cfft
