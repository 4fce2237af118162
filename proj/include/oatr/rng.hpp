#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <utility>

namespace oatr {

/// Seeded random source. The engine is std::mt19937_64, whose output sequence
/// is fixed by the C++ standard; all derived draws (uniform, normal, integer)
/// are computed here rather than through std:: distributions, whose
/// algorithms vary between standard libraries.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64";

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  /// Mixes a base seed with stream identifiers (splitmix64 finalizer), so
  /// independent consumers get uncorrelated, reproducible streams.
  static std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
    std::uint64_t h = mix(seed ^ 0x9e3779b97f4a7c15ULL);
    for (std::uint64_t s : stream) h = mix(h ^ (s + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
    return h;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Always consumes one draw, including for p == 0 or p == 1.
  bool bernoulli(double p) { return uniform() < p; }

  /// Box-Muller; consumes two draws.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal(0, stddev) restricted to ±bound·stddev by resampling.
  double truncated_normal(double stddev, double bound = 2.0) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= bound) return z * stddev;
    }
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace oatr
