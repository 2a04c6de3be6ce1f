#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace vitidle {

/// Deterministic random source. mt19937_64 is fully specified by the
/// standard; the uniform/normal transforms below are written out explicitly
/// so streams are reproducible bit-for-bit regardless of the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one fresh pair per call, second value discarded.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal resampled until it lands within two standard deviations.
  double trunc_normal(double stddev) {
    for (;;) {
      const double x = normal();
      if (std::abs(x) <= 2.0) return x * stddev;
    }
  }

  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    // Rejection sampling over the largest multiple of n below 2^64.
    const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
    for (;;) {
      const std::uint64_t x = gen_();
      if (x < limit) return x % n;
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace vitidle
