#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace skc {

// Counter-free splitmix64 generator. Streams for independent purposes are
// derived by hashing identifiers into a child seed, so e.g. the noise drawn
// at training step k does not depend on what happened at steps < k.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t s = a + 0x9e3779b97f4a7c15ULL * (b + 0x632be59bd9b4e019ULL);
    return step(s);
  }

  Rng child(std::initializer_list<uint64_t> ids) const {
    uint64_t h = state_;
    for (uint64_t id : ids) h = mix(h, id);
    return Rng(h);
  }

  uint64_t next_u64() { return step_inplace(state_); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  uint64_t state() const { return state_; }

 private:
  static uint64_t step(uint64_t s) {
    uint64_t z = s + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t step_inplace(uint64_t& s) {
    s += 0x9e3779b97f4a7c15ULL;
    uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace skc
