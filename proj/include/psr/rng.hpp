#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace psr {

// Deterministic RNG. mt19937_64 has a standard-specified sequence; the
// distributions below are implemented by hand so that streams are identical
// across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed), seed_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the spare draw.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Unbiased integer in [0, n).
  uint64_t below(uint64_t n) {
    const uint64_t limit = n * (UINT64_MAX / n);
    uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  // Derived stream; distinct `salt` values give independent generators.
  Rng fork(uint64_t salt) const {
    return Rng(seed_ ^ (salt * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull));
  }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename T>
void shuffle_indices(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace psr
