#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace nft {

// Deterministic, splittable PRNG (splitmix64-seeded xoshiro256++).
// Child streams derived by hashing the parent's seed with a label, so a
// stream's draws never depend on how many values a sibling consumed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {
    uint64_t x = seed ^ 0x9e3779b97f4a7c15ULL;
    for (auto& w : s_) w = splitmix(x);
  }

  Rng split(std::string_view label) const {
    uint64_t h = 0xcbf29ce484222325ULL ^ seed_;
    for (char c : label) h = (h ^ static_cast<uint8_t>(c)) * 0x100000001b3ULL;
    return Rng(h);
  }
  Rng split(uint64_t index) const {
    uint64_t x = seed_ + 0x632be59bd9b4e019ULL * (index + 1);
    return Rng(splitmix(x));
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  double uniform() {  // [0,1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller, no caching: two uniforms per draw keeps streams stateless.
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  int uniform_int(int n) {  // [0, n)
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  uint64_t seed() const { return seed_; }

 private:
  static uint64_t splitmix(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t seed_;
  uint64_t s_[4];
};

}  // namespace nft
