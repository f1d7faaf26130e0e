#pragma once

// Portable randomness. The engine is std::mt19937_64 (bit-exact by the
// standard); distributions are implemented here because the standard library
// distributions are implementation-defined.
//
// Named streams: every consumer derives its own engine from the root seed
// and a stream name, so adding a consumer never shifts another one's draws.
//   stream_seed(root, name) = splitmix64(root ^ fnv1a64(name))

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace forge {

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t root, std::string_view name) {
  return splitmix64(root ^ fnv1a64(name));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}
  Rng(std::uint64_t root, std::string_view stream) : Rng(stream_seed(root, stream)) {}

  std::uint64_t bits() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), by rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal with the given std, resampled outside +-2 std.
  double truncated_normal(double std_dev) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > 2.0);
    return z * std_dev;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace forge
