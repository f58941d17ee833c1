#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace groundling {

// SplitMix64.  State transition: state += 0x9E3779B97F4A7C15; the output mixes
// the post-add state through two xor-shift multiplies.  The whole sequence is
// pinned down by the three constants below, so generated datasets are
// reproducible from the seed alone, on any platform.
struct SplitMix64 {
  uint64_t state = 0;

  SplitMix64() = default;
  explicit SplitMix64(uint64_t seed) : state(seed) {}

  uint64_t next() {
    state += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1).  53 mantissa bits.
  double real() { return double(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).  Plain modulo; the bias is ~n/2^64 and we trade
  // it for portability of the exact sequence.
  uint64_t below(uint64_t n) { return next() % n; }

  // Integer in [lo, hi] inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    return lo + int64_t(below(uint64_t(hi - lo + 1)));
  }

  bool bernoulli(double p) { return real() < p; }

  // Box-Muller, no cached second value so the state stays one u64.
  double gaussian() {
    double u1 = real();
    while (u1 <= 0.0) u1 = real();
    double u2 = real();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }
};

// Derives an independent stream from (seed, index) without advancing either.
// One SplitMix64 output step applied to seed xor a spaced index.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
  SplitMix64 r(seed ^ (index * 0x9E3779B97F4A7C15ULL));
  return r.next();
}

// FNV-1a; used to give every named parameter its own init stream.
inline uint64_t hash_name(const std::string& s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace groundling
