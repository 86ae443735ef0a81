#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "calgp/tensor.hpp"

namespace calgp {

// Counter-based splittable generator (splitmix64 output function over a
// key + counter state). The integer and uniform streams are pure integer
// arithmetic, so equal seeds give bit-identical sequences on any platform;
// normal() additionally goes through sqrt/log.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ kGolden)) {}

  std::uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

  // Derives an independent stream; the parent is not advanced.
  Rng split(std::uint64_t stream) const {
    return Rng(mix(key_ + mix(stream ^ 0x8BB84B93962EACC9ull)));
  }

  // Uniform on [0,1): 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Marsaglia polar method; consumes a variable number of uniforms.
  double normal() {
    for (;;) {
      const double u = 2.0 * uniform() - 1.0;
      const double v = 2.0 * uniform() - 1.0;
      const double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
    }
  }

  // True with probability keep_prob; keep_prob = 1 is always true.
  bool bernoulli(double keep_prob) { return uniform() < keep_prob; }

  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  Tensor normal_tensor(std::vector<std::size_t> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.values()) x = stddev * normal();
    return t;
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[below(i)]);
    return p;
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace calgp
