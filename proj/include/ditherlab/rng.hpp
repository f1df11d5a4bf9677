#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

namespace ditherlab::rng {

// splitmix64 finalizer. Stable across platforms; used both as the documented
// seed-derivation hash and for deterministic synthetic environment data.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Per-run seed = splitmix64 evaluated at (base + (index+1) * golden gamma).
// This is the counter form of splitmix64, so distinct indices never collide
// in practice and the mapping is reproducible from the documented formula.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(base + (index + 1) * 0x9E3779B97F4A7C15ULL);
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed) { return Engine(seed); }

// Uniform double in [0, 1) with 53 random bits. Hand-rolled instead of
// std::uniform_real_distribution so a given engine stream yields the same
// values under every standard library.
inline double uniform01(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform_range(Engine& eng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(eng);
}

// Standard normal via Box-Muller. One value per call, two engine draws; the
// first uniform is reflected into (0, 1] so log() never sees zero.
inline double gaussian(Engine& eng) {
  double u1 = 1.0 - uniform01(eng);
  double u2 = uniform01(eng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

// Inverse-CDF walk over an explicit probability vector.
inline int sample_index(Engine& eng, std::span<const double> probs) {
  double u = uniform01(eng);
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace ditherlab::rng
