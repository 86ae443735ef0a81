#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "calgp/tensor.hpp"

namespace calgp {

enum class KernelKind { arc, rbf };

// Covariance hyperparameters: amplitude sigma and the diagonal of Lambda,
// stored as squared length-scales l_k^2.
struct KernelParams {
  double sigma = 1.0;
  std::vector<double> lengthscale_sq;

  static KernelParams isotropic(double sigma, double lengthscale, std::size_t dim) {
    KernelParams p;
    p.sigma = sigma;
    p.lengthscale_sq.assign(dim, lengthscale * lengthscale);
    p.validate();
    return p;
  }

  void validate() const {
    require(sigma > 0.0, "kernel params: sigma must be positive");
    require(!lengthscale_sq.empty(), "kernel params: empty length-scale vector");
    for (double l2 : lengthscale_sq)
      require(l2 > 0.0, "kernel params: length-scales must be positive");
  }

  // Returns the common length-scale l when Lambda = l^2 I.
  bool isotropic_lengthscale(double* out) const {
    for (double l2 : lengthscale_sq)
      if (l2 != lengthscale_sq.front()) return false;
    if (out) *out = std::sqrt(lengthscale_sq.front());
    return true;
  }
};

namespace detail {
inline void check_kernel_input(std::span<const double> c, const KernelParams& p,
                               const char* what) {
  require(c.size() == p.lengthscale_sq.size(),
          std::string(what) + ": feature length " + std::to_string(c.size()) +
              " != length-scale count " + std::to_string(p.lengthscale_sq.size()));
}
}  // namespace detail

// Order-one arc-cosine kernel on Lambda^{-1/2}-scaled inputs:
//   (sigma^2/pi) * |u| * |v| * (sin a + (pi - a) cos a),  a = angle(u, v).
// cos a is clamped into [-1,1] before acos so round-off cannot produce NaN.
inline double arc_cosine_k1(std::span<const double> c_i, std::span<const double> c_j,
                            const KernelParams& params) {
  detail::check_kernel_input(c_i, params, "arc_cosine_k1");
  detail::check_kernel_input(c_j, params, "arc_cosine_k1");
  double nu2 = 0.0, nv2 = 0.0, uv = 0.0;
  for (std::size_t k = 0; k < c_i.size(); ++k) {
    const double inv_l2 = 1.0 / params.lengthscale_sq[k];
    const double u = c_i[k], v = c_j[k];
    nu2 += u * u * inv_l2;
    nv2 += v * v * inv_l2;
    uv += u * v * inv_l2;
  }
  require(nu2 > 0.0 && nv2 > 0.0,
          "arc_cosine_k1: zero scaled feature vector, angle undefined");
  const double nu = std::sqrt(nu2), nv = std::sqrt(nv2);
  const double cos_a = std::clamp(uv / (nu * nv), -1.0, 1.0);
  const double a = std::acos(cos_a);
  const double pi = std::numbers::pi;
  return (params.sigma * params.sigma / pi) * (nu * nv) *
         (std::sin(a) + (pi - a) * cos_a);
}

// RBF covariance sigma^2 exp[-(c_i - c_j)^T Lambda^{-1} (c_i - c_j)];
// note there is no 1/2 in the exponent.
inline double rbf(std::span<const double> c_i, std::span<const double> c_j,
                  const KernelParams& params) {
  detail::check_kernel_input(c_i, params, "rbf");
  detail::check_kernel_input(c_j, params, "rbf");
  double d2 = 0.0;
  for (std::size_t k = 0; k < c_i.size(); ++k) {
    const double diff = c_i[k] - c_j[k];
    d2 += diff * diff / params.lengthscale_sq[k];
  }
  return params.sigma * params.sigma * std::exp(-d2);
}

inline double kernel_value(std::span<const double> a, std::span<const double> b,
                           const KernelParams& params, KernelKind kind) {
  return kind == KernelKind::arc ? arc_cosine_k1(a, b, params) : rbf(a, b, params);
}

// Pairwise kernel matrix; the upper triangle is mirrored so the result is
// symmetric to the last bit.
inline Tensor gram_matrix(const Tensor& features, const KernelParams& params,
                          KernelKind kind) {
  require_rank(features, 2, "gram_matrix features");
  const std::size_t n = features.dim(0), d = features.dim(1);
  Tensor k({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> fi{features.data() + i * d, d};
    for (std::size_t j = i; j < n; ++j) {
      std::span<const double> fj{features.data() + j * d, d};
      const double v = kernel_value(fi, fj, params, kind);
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return k;
}

}  // namespace calgp
