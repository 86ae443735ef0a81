#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <utility>
#include <vector>

#include "calgp/fwht.hpp"
#include "calgp/kernels.hpp"
#include "calgp/parallel.hpp"
#include "calgp/rng.hpp"
#include "calgp/tensor.hpp"

namespace calgp {

enum class SpectralMode { explicit_draw, sorf };

// One SORF block: three +-1 sign diagonals of length padded_dim.
struct SorfBlock {
  std::vector<double> d1, d2, d3;
};

// Spectral frequencies Omega with K columns drawn from N(0, Lambda^{-1}).
// Explicit mode materializes Omega = Lambda^{-1/2} epsilon and keeps the
// standard-normal draws so Omega can be regenerated when the length-scales
// change without redrawing randomness. SORF mode keeps only the sign
// diagonals of Omega = (1/l) G, G = sqrt(d) H^ D1 H^ D2 H^ D3 with the
// normalized Hadamard H^ = H / sqrt(d); features are produced implicitly in
// O(N_RF log d).
struct SpectralMatrix {
  SpectralMode mode = SpectralMode::explicit_draw;
  std::size_t input_dim = 0;     // nconv
  std::size_t num_features = 0;  // N_RF

  Tensor epsilon;  // [input_dim, num_features], explicit mode
  Tensor omega;    // [input_dim, num_features], explicit mode

  std::size_t padded_dim = 0;  // d, power of two >= input_dim (sorf)
  double inv_lengthscale = 1.0;
  std::vector<SorfBlock> blocks;
};

inline SpectralMatrix sample_spectral(std::size_t nconv, std::size_t n_rf,
                                      const KernelParams& params, Rng& rng) {
  require(nconv >= 1 && n_rf >= 1, "sample_spectral: dimensions must be >= 1");
  require(params.lengthscale_sq.size() == nconv,
          "sample_spectral: length-scale count " +
              std::to_string(params.lengthscale_sq.size()) + " != input dim " +
              std::to_string(nconv));
  params.validate();
  SpectralMatrix s;
  s.mode = SpectralMode::explicit_draw;
  s.input_dim = nconv;
  s.num_features = n_rf;
  s.epsilon = rng.normal_tensor({nconv, n_rf});
  s.omega = Tensor({nconv, n_rf});
  for (std::size_t k = 0; k < nconv; ++k) {
    const double inv_l = 1.0 / std::sqrt(params.lengthscale_sq[k]);
    for (std::size_t j = 0; j < n_rf; ++j) s.omega(k, j) = inv_l * s.epsilon(k, j);
  }
  return s;
}

// Regenerates Omega = Lambda^{-1/2} epsilon from the stored draws; used when
// the covariance parameters are being learned with fixed randomness.
inline void regenerate_omega(SpectralMatrix& s, const KernelParams& params) {
  require(s.mode == SpectralMode::explicit_draw,
          "regenerate_omega: spectral matrix is not in explicit mode");
  require(params.lengthscale_sq.size() == s.input_dim,
          "regenerate_omega: length-scale count mismatch");
  for (std::size_t k = 0; k < s.input_dim; ++k) {
    const double inv_l = 1.0 / std::sqrt(params.lengthscale_sq[k]);
    for (std::size_t j = 0; j < s.num_features; ++j)
      s.omega(k, j) = inv_l * s.epsilon(k, j);
  }
}

inline std::size_t next_pow2(std::size_t n) {
  std::size_t d = 1;
  while (d < n) d <<= 1;
  return d;
}

inline SpectralMatrix sorf_spectral(std::size_t nconv, std::size_t n_rf,
                                    double lengthscale, Rng& rng) {
  require(nconv >= 1 && n_rf >= 1, "sorf_spectral: dimensions must be >= 1");
  require(lengthscale > 0.0, "sorf_spectral: length-scale must be positive");
  SpectralMatrix s;
  s.mode = SpectralMode::sorf;
  s.input_dim = nconv;
  s.num_features = n_rf;
  s.padded_dim = next_pow2(nconv);
  s.inv_lengthscale = 1.0 / lengthscale;
  const std::size_t n_blocks = (n_rf + s.padded_dim - 1) / s.padded_dim;
  s.blocks.resize(n_blocks);
  for (auto& blk : s.blocks) {
    blk.d1.resize(s.padded_dim);
    blk.d2.resize(s.padded_dim);
    blk.d3.resize(s.padded_dim);
    for (auto* d : {&blk.d1, &blk.d2, &blk.d3})
      for (auto& v : *d) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
  }
  return s;
}

namespace detail {

// y = (1/(l d)) H D1 H D2 H D3 x for one block; equals (1/l) G x with
// G = sqrt(d) H^ D1 H^ D2 H^ D3. x and y have length d.
inline void sorf_block_apply(const SorfBlock& blk, double inv_l, const double* x,
                             double* y, std::size_t d) {
  for (std::size_t i = 0; i < d; ++i) y[i] = blk.d3[i] * x[i];
  fwht_inplace(y, d);
  for (std::size_t i = 0; i < d; ++i) y[i] *= blk.d2[i];
  fwht_inplace(y, d);
  for (std::size_t i = 0; i < d; ++i) y[i] *= blk.d1[i];
  fwht_inplace(y, d);
  const double scale = inv_l / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) y[i] *= scale;
}

// Transpose of the block operator: y = (1/(l d)) D3 H D2 H D1 H x.
inline void sorf_block_apply_t(const SorfBlock& blk, double inv_l, const double* x,
                               double* y, std::size_t d) {
  for (std::size_t i = 0; i < d; ++i) y[i] = x[i];
  fwht_inplace(y, d);
  for (std::size_t i = 0; i < d; ++i) y[i] *= blk.d1[i];
  fwht_inplace(y, d);
  for (std::size_t i = 0; i < d; ++i) y[i] *= blk.d2[i];
  fwht_inplace(y, d);
  const double scale = inv_l / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) y[i] = blk.d3[i] * y[i] * scale;
}

}  // namespace detail

// Features for one input row: out[j] = (Omega^T c)_j, c zero-padded to d.
inline void sorf_project_row(const SpectralMatrix& s, const double* c, double* out) {
  const std::size_t d = s.padded_dim;
  std::vector<double> x(d, 0.0), y(d);
  for (std::size_t k = 0; k < s.input_dim; ++k) x[k] = c[k];
  std::size_t j0 = 0;
  for (const auto& blk : s.blocks) {
    detail::sorf_block_apply(blk, s.inv_lengthscale, x.data(), y.data(), d);
    const std::size_t take = std::min(d, s.num_features - j0);
    for (std::size_t j = 0; j < take; ++j) out[j0 + j] = y[j];
    j0 += take;
    if (j0 == s.num_features) break;
  }
}

// Gradient w.r.t. the input row: accumulates Omega g, then truncates padding.
inline void sorf_project_row_t(const SpectralMatrix& s, const double* g, double* out) {
  const std::size_t d = s.padded_dim;
  std::vector<double> x(d), y(d), acc(d, 0.0);
  std::size_t j0 = 0;
  for (const auto& blk : s.blocks) {
    const std::size_t take = std::min(d, s.num_features - j0);
    for (std::size_t j = 0; j < d; ++j) x[j] = j < take ? g[j0 + j] : 0.0;
    detail::sorf_block_apply_t(blk, s.inv_lengthscale, x.data(), y.data(), d);
    for (std::size_t j = 0; j < d; ++j) acc[j] += y[j];
    j0 += take;
    if (j0 == s.num_features) break;
  }
  for (std::size_t k = 0; k < s.input_dim; ++k) out[k] = acc[k];
}

// Materializes Omega [input_dim, num_features] by applying the implicit
// operator to basis vectors. Used by tests and checkpoint-independent oracles.
inline Tensor sorf_dense(const SpectralMatrix& s) {
  require(s.mode == SpectralMode::sorf, "sorf_dense: not a sorf spectral matrix");
  Tensor omega({s.input_dim, s.num_features});
  std::vector<double> e(s.input_dim, 0.0), row(s.num_features);
  for (std::size_t k = 0; k < s.input_dim; ++k) {
    e[k] = 1.0;
    sorf_project_row(s, e.data(), row.data());
    e[k] = 0.0;
    for (std::size_t j = 0; j < s.num_features; ++j) omega(k, j) = row[j];
  }
  return omega;
}

// Random-feature map producing Phi with K ~= Phi Phi^T.
//   arc: Phi = sqrt(2 sigma^2 / N_RF) max(0, C Omega)           (width N_RF)
//   rbf: Phi = sqrt(sigma^2 / N_RF) [cos(.), sin(.)]            (width 2 N_RF)
// The rbf trig features are evaluated at sqrt(2) * (C Omega): the implemented
// closed-form rbf has no 1/2 in the exponent, so the matching spectral
// measure is N(0, 2 Lambda^{-1}), realized here as a fixed frequency scale on
// draws from N(0, Lambda^{-1}).
struct FeatureMap {
  SpectralMatrix spectral;
  KernelKind kind = KernelKind::arc;
  KernelParams params;
  bool learn_omega = false;

  std::size_t input_dim() const { return spectral.input_dim; }
  std::size_t num_features() const { return spectral.num_features; }
  std::size_t output_width() const {
    return kind == KernelKind::arc ? spectral.num_features
                                   : 2 * spectral.num_features;
  }
  double freq_scale() const {
    return kind == KernelKind::arc ? 1.0 : std::numbers::sqrt2;
  }
  double prefactor() const {
    const double s2 = params.sigma * params.sigma;
    const double n = static_cast<double>(spectral.num_features);
    return kind == KernelKind::arc ? std::sqrt(2.0 * s2 / n) : std::sqrt(s2 / n);
  }
};

inline FeatureMap make_feature_map(KernelKind kind, std::size_t nconv,
                                   std::size_t n_rf, const KernelParams& params,
                                   SpectralMode mode, Rng& rng) {
  params.validate();
  require(params.lengthscale_sq.size() == nconv,
          "feature map: length-scale count " +
              std::to_string(params.lengthscale_sq.size()) + " != input dim " +
              std::to_string(nconv));
  FeatureMap fm;
  fm.kind = kind;
  fm.params = params;
  if (mode == SpectralMode::explicit_draw) {
    fm.spectral = sample_spectral(nconv, n_rf, params, rng);
  } else {
    double ell = 0.0;
    require(params.isotropic_lengthscale(&ell),
            "feature map: sorf mode requires isotropic length-scales");
    fm.spectral = sorf_spectral(nconv, n_rf, ell, rng);
  }
  return fm;
}

struct FeatureMapCache {
  Tensor input;  // [batch, input_dim]
  Tensor pre;    // [batch, N_RF], the nonlinearity argument freq * (C Omega)
};

inline Tensor apply_feature_map(const Tensor& conv_features, const FeatureMap& map,
                                FeatureMapCache* cache = nullptr) {
  require_rank(conv_features, 2, "apply_feature_map input");
  require(conv_features.dim(1) == map.input_dim(),
          "apply_feature_map: input width " + std::to_string(conv_features.dim(1)) +
              " != spectral input dim " + std::to_string(map.input_dim()));
  const std::size_t batch = conv_features.dim(0);
  const std::size_t n_rf = map.num_features();
  const double freq = map.freq_scale();

  Tensor pre({batch, n_rf});
  if (map.spectral.mode == SpectralMode::explicit_draw) {
    pre = matmul(conv_features, map.spectral.omega);
    if (freq != 1.0)
      for (auto& v : pre.values()) v *= freq;
  } else {
    const double* pc = conv_features.data();
    double* pp = pre.data();
    const std::size_t in_dim = map.input_dim();
    parallel_chunks(batch, kRowChunk, [&](std::size_t, std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b)
        sorf_project_row(map.spectral, pc + b * in_dim, pp + b * n_rf);
    });
    if (freq != 1.0)
      for (auto& v : pre.values()) v *= freq;
  }

  const double pref = map.prefactor();
  Tensor out({batch, map.output_width()});
  if (map.kind == KernelKind::arc) {
    for (std::size_t i = 0; i < pre.size(); ++i)
      out[i] = pre[i] > 0.0 ? pref * pre[i] : 0.0;
  } else {
    for (std::size_t b = 0; b < batch; ++b) {
      const double* prow = pre.data() + b * n_rf;
      double* orow = out.data() + b * 2 * n_rf;
      for (std::size_t j = 0; j < n_rf; ++j) {
        orow[j] = pref * std::cos(prow[j]);
        orow[n_rf + j] = pref * std::sin(prow[j]);
      }
    }
  }
  if (cache) {
    cache->input = conv_features;
    cache->pre = std::move(pre);
  }
  return out;
}

struct FeatureMapGrads {
  Tensor input;      // [batch, input_dim]
  Tensor omega;      // [input_dim, N_RF], only when requested
  bool has_omega = false;
};

inline FeatureMapGrads feature_map_backward(const Tensor& grad_out,
                                            const FeatureMapCache& cache,
                                            const FeatureMap& map,
                                            bool want_omega_grad = false) {
  const std::size_t batch = cache.input.dim(0);
  const std::size_t n_rf = map.num_features();
  require(grad_out.rank() == 2 && grad_out.dim(0) == batch &&
              grad_out.dim(1) == map.output_width(),
          "feature_map_backward: gradient shape " + shape_to_string(grad_out.shape()) +
              " does not match cached forward output [" + std::to_string(batch) +
              "," + std::to_string(map.output_width()) + "]");
  if (want_omega_grad)
    require(map.spectral.mode == SpectralMode::explicit_draw,
            "feature_map_backward: Omega gradient is undefined in sorf mode");

  const double pref = map.prefactor();
  const double freq = map.freq_scale();

  // dL/d(pre); ReLU subgradient is 0 at 0.
  Tensor gpre({batch, n_rf});
  if (map.kind == KernelKind::arc) {
    for (std::size_t i = 0; i < gpre.size(); ++i)
      gpre[i] = cache.pre[i] > 0.0 ? pref * grad_out[i] : 0.0;
  } else {
    for (std::size_t b = 0; b < batch; ++b) {
      const double* prow = cache.pre.data() + b * n_rf;
      const double* grow = grad_out.data() + b * 2 * n_rf;
      double* gp = gpre.data() + b * n_rf;
      for (std::size_t j = 0; j < n_rf; ++j)
        gp[j] = pref * (-std::sin(prow[j]) * grow[j] + std::cos(prow[j]) * grow[n_rf + j]);
    }
  }

  // dL/d(C Omega) = freq * dL/d(pre)
  if (freq != 1.0)
    for (auto& v : gpre.values()) v *= freq;

  FeatureMapGrads g;
  if (map.spectral.mode == SpectralMode::explicit_draw) {
    g.input = matmul_a_bt(gpre, map.spectral.omega);
    if (want_omega_grad) {
      g.omega = matmul_at_b(cache.input, gpre);
      g.has_omega = true;
    }
  } else {
    g.input = Tensor({batch, map.input_dim()});
    const double* gp = gpre.data();
    double* gi = g.input.data();
    const std::size_t in_dim = map.input_dim();
    parallel_chunks(batch, kRowChunk, [&](std::size_t, std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b)
        sorf_project_row_t(map.spectral, gp + b * n_rf, gi + b * in_dim);
    });
  }
  return g;
}

// d(loss)/d(log sigma^2) for a map output scaled by sigma: 0.5 * sum(g . out).
inline double feature_map_sigma_grad(const Tensor& grad_out, const Tensor& out) {
  require(grad_out.shape() == out.shape(), "feature_map_sigma_grad: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += grad_out[i] * out[i];
  return 0.5 * s;
}

}  // namespace calgp
