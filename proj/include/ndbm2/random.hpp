#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "ndbm2/tensor.hpp"

namespace ndbm2 {

/// Seeded generator with platform-independent uniform/normal draws.
/// std::mt19937_64 output is fixed by the standard; the distributions in
/// <random> are not, so they are implemented here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename T>
Tensor<T> random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
Tensor<T> random_normal(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  return random_normal<T>(std::move(shape), rng, stddev);
}

template <typename T>
Tensor<T> random_uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace ndbm2
