#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "m3asr/tensor.hpp"

namespace m3asr {

/// splitmix64 finaliser.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Independent stream seed for (seed, label); used so that adding a consumer of
/// randomness never shifts the draws seen by another consumer.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(seed ^ mix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::string_view label = {}) {
  return derive_seed(mix64(seed + 0x632be59bd9b4e019ULL * (a + 1)), label);
}

/// Uniform integer in [lo, hi].
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

inline Tensor random_uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = uniform_real(rng, lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace m3asr
