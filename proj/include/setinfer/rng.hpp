#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace setinfer::rng {

// SplitMix64 increment and output finalizer.
inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic per-stream seed derived from a master seed and a stream index.
// Streams with distinct indices are decorrelated by double finalization.
inline constexpr std::uint64_t stream_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(mix64(master + kGolden) ^ mix64(index * kGolden + 0xda942042e4dd58b5ull));
}

/// Counter-based generator: one independent stream per (master seed, index).
/// All draws are produced by explicit transforms so sequences are identical
/// across platforms and standard library versions.
class Stream {
 public:
  explicit Stream(std::uint64_t seed) : state_(seed) {}

  static Stream substream(std::uint64_t master, std::uint64_t index) {
    return Stream(stream_seed(master, index));
  }

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix64(state_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
    // 64-bit multiply-shift; bias is negligible for the n used here.
    return static_cast<std::uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller (cosine branch, no caching).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Poisson: multiplicative inversion for small lambda, transformed
  /// rejection (Hoermann's PTRS) for large lambda.
  long poisson(double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("poisson: lambda must be >= 0");
    if (lambda == 0.0) return 0;
    if (lambda <= 10.0) return poisson_inversion(lambda);
    return poisson_ptrs(lambda);
  }

 private:
  long poisson_inversion(double lambda) {
    double p = std::exp(-lambda);
    double cum = p;
    double u = uniform();
    long k = 0;
    while (u > cum) {
      ++k;
      p *= lambda / static_cast<double>(k);
      cum += p;
      if (k > 1000) break;  // unreachable for lambda <= 10
    }
    return k;
  }

  long poisson_ptrs(double lambda) {
    const double slam = std::sqrt(lambda);
    const double loglam = std::log(lambda);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double v_r = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
      double u = uniform() - 0.5;
      double v = uniform();
      double us = 0.5 - std::fabs(u);
      double kf = std::floor((2.0 * a / us + b) * u + lambda + 0.43);
      if (us >= 0.07 && v <= v_r) return static_cast<long>(kf);
      if (kf < 0.0 || (us < 0.013 && v > us)) continue;
      double k = kf;
      if (std::log(v * inv_alpha / (a / (us * us) + b)) <=
          k * loglam - lambda - std::lgamma(k + 1.0)) {
        return static_cast<long>(kf);
      }
    }
  }

  std::uint64_t state_;
};

}  // namespace setinfer::rng
