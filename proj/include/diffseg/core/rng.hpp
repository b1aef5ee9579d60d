#pragma once

#include "diffseg/core/grid.hpp"

#include <cmath>
#include <cstdint>
#include <random>

namespace diffseg {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic RNG with explicit distributions. The standard library's
/// distribution objects are implementation-defined, so uniform/normal draws
/// are generated here directly from the mt19937_64 bit stream; given a seed
/// the sequence is reproducible across builds of this project.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform on [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    uint64_t span = uint64_t(hi) - uint64_t(lo) + 1;
    return lo + int(next_u64() % span);
  }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do { u1 = uniform(); } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  /// Derive an independent substream; stable under call order.
  Rng fork(uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ (0xd1b54a32d192ed03ULL * (stream + 1))));
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

template <typename T>
void fill_normal(Grid<T>& g, Rng& rng) {
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = T(rng.normal());
}

}  // namespace diffseg
