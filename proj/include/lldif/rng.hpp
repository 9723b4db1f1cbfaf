#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "lldif/tensor.hpp"

namespace lldif {

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// splitmix64 finalizer; used to combine seeds deterministically.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Deterministic RNG. The uniform/normal conversions are implemented
/// explicitly (not via std::*_distribution, whose output is
/// implementation-defined) so streams are identical across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  int uniform_int(int lo, int hi_exclusive) {
    return lo + static_cast<int>(gen_() % static_cast<uint64_t>(hi_exclusive - lo));
  }

  /// Standard normal via Box-Muller (no cached spare).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  Tensor normal_tensor(std::vector<int> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (long i = 0; i < t.numel(); ++i) t[i] = stddev * normal();
    return t;
  }
  Tensor uniform_tensor(std::vector<int> shape, double a, double b) {
    Tensor t(std::move(shape));
    for (long i = 0; i < t.numel(); ++i) t[i] = uniform(a, b);
    return t;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = gen_() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace lldif
