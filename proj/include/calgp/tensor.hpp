#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "calgp/errors.hpp"
#include "calgp/parallel.hpp"

namespace calgp {

inline std::string shape_to_string(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor of 64-bit reals. Immutable by convention once an
// operation has returned it; ops below are pure functions.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    require(checked_size(shape_) == data_.size(),
            "tensor: shape " + shape_to_string(shape_) + " does not match " +
                std::to_string(data_.size()) + " values");
  }

  static Tensor full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double& operator()(std::size_t b, std::size_t c, std::size_t i,
                     std::size_t j) {
    return data_[((b * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }
  double operator()(std::size_t b, std::size_t c, std::size_t i,
                    std::size_t j) const {
    return data_[((b * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

 private:
  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      require(d > 0, "tensor: zero dimension in shape " + shape_to_string(shape));
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline void require_shape(const Tensor& t, const std::vector<std::size_t>& want,
                          const std::string& what) {
  require(t.shape() == want, what + ": expected shape " + shape_to_string(want) +
                                 ", got " + shape_to_string(t.shape()));
}

inline void require_rank(const Tensor& t, std::size_t r, const std::string& what) {
  require(t.rank() == r, what + ": expected rank " + std::to_string(r) +
                             " tensor, got shape " + shape_to_string(t.shape()));
}

inline Tensor reshape(Tensor t, std::vector<std::size_t> new_shape) {
  Tensor out(std::move(new_shape), std::vector<double>(t.values().begin(),
                                                       t.values().end()));
  require(out.size() == t.size(), "reshape: element count changed");
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (double x : t.values()) s += x * x;
  return s;
}

// C[m,n] = A[m,k] * B[k,n]. Rows of C are written by exactly one chunk, so the
// parallel split cannot change results.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dims differ, lhs " +
                             shape_to_string(a.shape()) + " vs rhs " +
                             shape_to_string(b.shape()));
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  parallel_chunks(m, kRowChunk, [&](std::size_t, std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const double* arow = pa + i * k;
      double* crow = pc + i * n;
      for (std::size_t l = 0; l < k; ++l) {
        const double av = arow[l];
        if (av == 0.0) continue;
        const double* brow = pb + l * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
  return c;
}

// C[k,n] = A^T * B with A[m,k], B[m,n]; reduction over m uses fixed-order
// chunk partials so results do not depend on the thread count.
inline Tensor matmul_at_b(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_at_b lhs");
  require_rank(b, 2, "matmul_at_b rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == m, "matmul_at_b: row counts differ, lhs " +
                             shape_to_string(a.shape()) + " vs rhs " +
                             shape_to_string(b.shape()));
  const std::size_t n_chunks = (m + kRowChunk - 1) / kRowChunk;
  std::vector<std::vector<double>> partial(n_chunks);
  const double* pa = a.data();
  const double* pb = b.data();
  parallel_chunks(m, kRowChunk, [&](std::size_t c, std::size_t r0, std::size_t r1) {
    auto& acc = partial[c];
    acc.assign(k * n, 0.0);
    for (std::size_t i = r0; i < r1; ++i) {
      const double* arow = pa + i * k;
      const double* brow = pb + i * n;
      for (std::size_t l = 0; l < k; ++l) {
        const double av = arow[l];
        if (av == 0.0) continue;
        double* crow = acc.data() + l * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
  Tensor c({k, n});
  double* pc = c.data();
  for (std::size_t ch = 0; ch < n_chunks; ++ch)
    for (std::size_t i = 0; i < k * n; ++i) pc[i] += partial[ch][i];
  return c;
}

// C[m,k] = A * B^T with A[m,n], B[k,n].
inline Tensor matmul_a_bt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_a_bt lhs");
  require_rank(b, 2, "matmul_a_bt rhs");
  const std::size_t m = a.dim(0), n = a.dim(1), k = b.dim(0);
  require(b.dim(1) == n, "matmul_a_bt: inner dims differ, lhs " +
                             shape_to_string(a.shape()) + " vs rhs " +
                             shape_to_string(b.shape()));
  Tensor c({m, k});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  parallel_chunks(m, kRowChunk, [&](std::size_t, std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const double* arow = pa + i * n;
      double* crow = pc + i * k;
      for (std::size_t l = 0; l < k; ++l)
        crow[l] = dot({arow, n}, {pb + l * n, n});
    }
  });
  return c;
}

}  // namespace calgp
