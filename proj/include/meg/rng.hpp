#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "meg/tensor.hpp"

namespace meg {

// mt19937_64 is specified bit-exactly by the standard; the helpers below avoid
// std distributions (whose output is implementation-defined) so seeded runs
// reproduce across standard libraries.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Box-Muller; one draw per call.
inline double normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do r = rng();
  while (r >= limit);
  return r % n;
}

template <class Real>
Tensor<Real> uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor<Real> t(std::move(shape));
  for (auto& v : t.values) v = static_cast<Real>(uniform(rng, -limit, limit));
  return t;
}

template <class Real>
Tensor<Real> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<Real> t(std::move(shape));
  for (auto& v : t.values) v = static_cast<Real>(stddev * normal(rng));
  return t;
}

// Fisher-Yates with uniform_index.
template <class It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = uniform_index(rng, i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace meg
