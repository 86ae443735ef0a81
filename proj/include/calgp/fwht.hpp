#pragma once

#include <cstddef>

#include "calgp/tensor.hpp"

namespace calgp {

inline bool is_pow2(std::size_t d) { return d > 0 && (d & (d - 1)) == 0; }

// In-place multiply by the unnormalized Hadamard matrix H (H_2 = [[1,1],[1,-1]],
// H_{2d} = H_2 (x) H_d) in O(d log d). fwht(fwht(v)) == d * v.
inline void fwht_inplace(double* x, std::size_t d) {
  require(is_pow2(d), "fwht: length " + std::to_string(d) + " is not a power of 2");
  for (std::size_t half = 1; half < d; half <<= 1) {
    for (std::size_t base = 0; base < d; base += half << 1) {
      for (std::size_t i = base; i < base + half; ++i) {
        const double a = x[i];
        const double b = x[i + half];
        x[i] = a + b;
        x[i + half] = a - b;
      }
    }
  }
}

inline Tensor fwht(const Tensor& v) {
  require_rank(v, 1, "fwht");
  Tensor out = v;
  fwht_inplace(out.data(), out.size());
  return out;
}

}  // namespace calgp
