#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace chainflow {

/// Seeded generator with a splittable-seed contract: derive() maps a seed and a
/// path of stream ids to an independent child, so parallel work never shares
/// a stream and resumed runs can rebuild any stream from (seed, path).
class Rng {
 public:
  /// Smallest distance kept between a uniform draw and the ends of (0, 1).
  static constexpr double kUniformGuard = 0x1p-52;

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  static std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = mix(seed);
    for (auto p : path) s = mix(s ^ mix(p + 0x632be59bd9b4e019ULL));
    return Rng(s);
  }

  Rng split(std::uint64_t stream) const { return derive(seed_, {stream}); }

  std::uint64_t seed() const { return seed_; }

  /// Uniform draw in [guard, 1 - guard].
  double uniform_open() {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
    if (u < kUniformGuard) return kUniformGuard;
    if (u > 1.0 - kUniformGuard) return 1.0 - kUniformGuard;
    return u;
  }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  /// Integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace chainflow
