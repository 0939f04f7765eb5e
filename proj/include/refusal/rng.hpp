#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "refusal/common.hpp"

namespace refusal {

// splitmix64 step; used to derive independent stream seeds from a base seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

// Deterministic RNG: mt19937_64 for the raw stream (sequence fixed by the
// standard), distributions hand-rolled so results do not depend on the
// standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }

  // Uniform in [0, 1).
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased index in [0, n) via rejection sampling.
  std::size_t index(std::size_t n) {
    require(n > 0, "Rng::index: n must be positive");
    const std::uint64_t un = n;
    const std::uint64_t bound = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x = eng_();
    while (x >= bound) x = eng_();
    return static_cast<std::size_t>(x % un);
  }

  // One Box-Muller normal per call (the sine half is discarded to keep the
  // draw count per call fixed).
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    return mean + stddev * z;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  // First k entries of a random permutation of 0..n-1.
  std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
    require(k <= n, "Rng::sample_indices: k=", k, " exceeds n=", n);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + index(n - i)]);
    idx.resize(k);
    return idx;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace refusal
