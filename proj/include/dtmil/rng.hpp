#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "dtmil/errors.hpp"

namespace dtmil {

namespace detail {

inline uint64_t splitmix64(uint64_t& x) {
  uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t rotl64(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

// xoshiro256** seeded through splitmix64. Every stochastic component in the
// library draws from an explicitly passed Rng, so a whole run replays from a
// single 64-bit seed. The raw u64 stream is platform-independent; derived
// floating-point draws are deterministic within one platform/precision.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : s_) s = detail::splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = detail::rotl64(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = detail::rotl64(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive [lo, hi]; fixed-point multiply keeps one draw per call.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw ValueError("uniform_int: empty range");
    const uint64_t range = uint64_t(hi - lo) + 1;
    const uint64_t v = uint64_t((static_cast<unsigned __int128>(next_u64()) * range) >> 64);
    return lo + int64_t(v);
  }

  // Standard normal via Box-Muller; avoids std::normal_distribution, whose
  // stream is implementation-defined.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  bool bernoulli(double p) { return uniform() < p; }

  int binomial(int n, double p) {
    int k = 0;
    for (int i = 0; i < n; ++i) k += bernoulli(p) ? 1 : 0;
    return k;
  }

  // Fisher-Yates with our own index draws, so the permutation stream is fixed.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = size_t(uniform_int(0, int64_t(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent seed from a base seed and a stream tag.
  static uint64_t mix(uint64_t seed, uint64_t stream) {
    uint64_t x = seed ^ detail::rotl64(stream, 32);
    return detail::splitmix64(x);
  }

  // FNV-1a; stable across platforms, used to pin per-bag eval partitions.
  static uint64_t hash(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  uint64_t s_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dtmil
