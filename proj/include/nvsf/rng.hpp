#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace nvsf {

// Deterministic, serializable PRNG (xoshiro256++ seeded via splitmix64).
// We own the generator so that checkpoint/resume and cross-run determinism
// do not depend on the standard library's distribution internals.
class Rng {
 public:
  Rng() : Rng(0x9e3779b97f4a7c15ull) {}

  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  // Standard normal via Box-Muller; the second variate is discarded so the
  // stream position is a pure function of the draw count.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::vector<uint64_t> state() const { return {state_[0], state_[1], state_[2], state_[3]}; }

  void set_state(const std::vector<uint64_t>& s) {
    for (int i = 0; i < 4; ++i) state_[i] = s[static_cast<size_t>(i)];
  }

  // Stateless hash of a key tuple to [0, 1); used for per-(seed, frame, pixel)
  // raydrop decisions that must not depend on evaluation order.
  static double hash_unit(uint64_t a, uint64_t b, uint64_t c) {
    uint64_t x = a * 0x9e3779b97f4a7c15ull;
    x ^= b + 0xbf58476d1ce4e5b9ull + (x << 6) + (x >> 2);
    x = splitmix64(x);
    x ^= c + 0x94d049bb133111ebull + (x << 6) + (x >> 2);
    x = splitmix64(x);
    return static_cast<double>(x >> 11) * 0x1.0p-53;
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t state_[4];
};

}  // namespace nvsf
