#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "dynrep/core/error.hpp"

namespace dynrep {

// Deterministic random source. The integer stream is std::mt19937_64, whose
// sequence is fixed by the standard; all floating-point derivations below are
// hand-rolled so the value sequence never depends on the standard library's
// unspecified distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    if (!(lo <= hi)) throw Error(ErrCode::value, "rng: empty uniform range");
    return lo + (hi - lo) * uniform();
  }

  // Log-uniform over [lo, hi], lo > 0.
  double log_uniform(double lo, double hi) {
    if (!(0.0 < lo && lo <= hi))
      throw Error(ErrCode::value, "rng: log_uniform requires 0 < lo <= hi");
    if (lo == hi) return lo;  // avoid exp(log(a)) ulp drift on point ranges
    return std::exp(uniform(std::log(lo), std::log(hi)));
  }

  // Standard normal via Box-Muller (two uniforms per draw, no cached spare).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // Normal(0, std) rejected to |z| <= clip standard deviations.
  double trunc_normal(double std, double clip = 2.0) {
    for (;;) {
      double z = normal();
      if (std::abs(z) <= clip) return z * std;
    }
  }

  // Uniform integer in [lo, hi), rejection-sampled to avoid modulo bias.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo >= hi) throw Error(ErrCode::value, "rng: empty integer range");
    uint64_t span = static_cast<uint64_t>(hi - lo);
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % span);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(0, i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  std::vector<int64_t> permutation(int64_t n) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    shuffle(p);
    return p;
  }

  // k distinct indices from [0, n), in random order.
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    if (k < 0 || k > n)
      throw Error(ErrCode::value, "rng: sample size out of range");
    std::vector<int64_t> p = permutation(n);
    p.resize(static_cast<size_t>(k));
    return p;
  }

  // Independent child stream keyed by tag (splitmix64 of seed and tag).
  Rng fork(uint64_t tag) const {
    uint64_t x = seed_ + 0x9E3779B97F4A7C15ULL * (tag + 1);
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x = x ^ (x >> 31);
    return Rng(x);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
};

}  // namespace dynrep
