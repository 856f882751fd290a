#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace tlam {

/// splitmix64 generator. A plain value: copy it to fork a stream, and derive
/// per-worker seeds with next() instead of sharing one instance.
class Rng {
 public:
  constexpr explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  constexpr std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  constexpr double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Box-Muller, cosine branch only.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  constexpr std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace tlam
