#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "mmsynth/core.hpp"

namespace mmsynth {

// Deterministic random stream. The engine is std::mt19937_64 (bit-exact per
// the standard); all derived draws (uniform, normal, bounded ints) are
// implemented here rather than with std::*_distribution, whose outputs are
// implementation-defined. Streams are derived from (seed, label, a, b) so
// each subsystem owns an independent, reproducible sequence.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  static Rng stream(uint64_t seed, std::string_view label, uint64_t a = 0, uint64_t b = 0) {
    uint64_t s = hash_mix(seed, fnv1a64(label));
    s = hash_mix(s, a);
    s = hash_mix(s, b);
    return Rng(s);
  }

  uint64_t bits() { return eng_(); }

  // uniform double in [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ValidationError("uniform_int: empty range");
    uint64_t mask = ~0ull;
    if (n <= (1ull << 63)) {
      uint64_t np2 = 1;
      while (np2 < n) np2 <<= 1;
      mask = np2 - 1;
    }
    for (;;) {
      uint64_t r = bits() & mask;
      if (r < n) return r;
    }
  }

  // standard normal via Box-Muller, second value cached
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mmsynth
