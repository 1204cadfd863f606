#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace stw {

// Deterministic RNG used everywhere instead of <random> distributions, whose
// outputs are implementation-defined. xoshiro256** seeded through splitmix64.
class Rng {
public:
  explicit Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& w : state_) w = splitmix64(s);
  }

  // Independent stream derived from (seed, stream, index) without consuming
  // draws from any other stream.
  static Rng derive(uint64_t seed, uint64_t stream, uint64_t index = 0) {
    uint64_t s = seed;
    uint64_t a = splitmix64(s);
    s ^= stream * 0x9e3779b97f4a7c15ULL;
    uint64_t b = splitmix64(s);
    s ^= index * 0xbf58476d1ce4e5b9ULL;
    uint64_t c = splitmix64(s);
    return Rng(a ^ (b << 1) ^ (c << 2));
  }

  uint64_t next_u64() {
    uint64_t result = rotl(state_[1] * 5, 7) * 9;
    uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Unbiased draw from [0, n).
  uint64_t below(uint64_t n) {
    uint64_t threshold = (-n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // 53-bit uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller without state caching so that call order alone fixes the stream.
  double normal() {
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Marsaglia-Tsang gamma sampler, shape k > 0, scale 1.
  double gamma(double k) {
    if (k < 1.0) {
      double u;
      do {
        u = uniform();
      } while (u <= 0.0);
      return gamma(k + 1.0) * std::pow(u, 1.0 / k);
    }
    double d = k - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  std::vector<double> dirichlet(double alpha, int n) {
    std::vector<double> w(n);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      w[i] = gamma(alpha);
      sum += w[i];
    }
    for (auto& x : w) x /= sum;
    return w;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  static uint64_t splitmix64(uint64_t& s) {
    uint64_t z = (s += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_;
};

}  // namespace stw
