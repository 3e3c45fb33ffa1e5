#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "helix/errors.hpp"

namespace helix {

// Self-contained generator so streams are identical across standard libraries.
// std::normal_distribution and friends are implementation-defined, which would
// make "same seed, same run" hold on one machine and not the next toolchain.
//
// Every consumer derives its own stream from (seed, name, indices...), so e.g.
// the augmentation draws for (epoch 7, batch 3) are a pure function of the run
// seed and can be replayed after a checkpoint resume without saved RNG state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : s_) word = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1), 53-bit mantissa
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  double normal() {
    // polar Box-Muller, spare discarded to keep streams position-independent
    double u, v, r2;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      r2 = u * u + v * v;
    } while (r2 >= 1.0 || r2 == 0.0);
    return u * std::sqrt(-2.0 * std::log(r2) / r2);
  }

  // Marsaglia-Tsang; alpha < 1 handled via the boost identity
  double gamma(double alpha) {
    if (alpha <= 0.0) throw ConfigError("gamma: alpha must be positive");
    if (alpha < 1.0) {
      const double u = uniform();
      return gamma(alpha + 1.0) * std::pow(u > 0.0 ? u : 1e-300, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t s_[4];
};

// Derives a child generator from a run seed, a stream name, and up to two
// indices (typically epoch and batch).
inline Rng substream(std::uint64_t seed, std::string_view name, std::uint64_t i = 0,
                     std::uint64_t j = 0) {
  // FNV-1a over the name, then mix in the indices
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  h ^= seed + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h ^= i * 0xd6e8feb86659fd93ULL;
  h ^= j * 0xa5cb3f6bb41c6d29ULL;
  return Rng(h);
}

}  // namespace helix
