#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "textmamba/ndarray.hpp"

namespace textmamba {

/// Seeded generator with platform-independent output. std::mt19937_64's raw
/// stream is fixed by the standard; the distributions below are hand-rolled
/// because the standard library ones are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

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
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(kTwoPi * u2);
    has_spare_ = true;
    return r * std::cos(kTwoPi * u2);
  }

  std::uint64_t next() { return engine_(); }

  template <typename T>
  NdArray<T> uniform_array(Shape shape, double lo, double hi) {
    NdArray<T> a(std::move(shape));
    for (auto& v : a.data()) v = static_cast<T>(uniform(lo, hi));
    return a;
  }

  template <typename T>
  NdArray<T> normal_array(Shape shape, double stddev = 1.0) {
    NdArray<T> a(std::move(shape));
    for (auto& v : a.data()) v = static_cast<T>(stddev * normal());
    return a;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace textmamba
