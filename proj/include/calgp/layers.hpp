#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "calgp/parallel.hpp"
#include "calgp/tensor.hpp"

namespace calgp {

// Each forward returns the cache its backward needs; backwards validate the
// incoming gradient against the cached shapes and reject mismatches.

struct Conv2dCache {
  Tensor input;    // [batch, ch_in, h, w]
  Tensor weights;  // effective weights used in the forward
  std::vector<std::size_t> out_shape;
};

struct Conv2dGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

inline std::pair<Tensor, Conv2dCache> conv2d_forward(const Tensor& input,
                                                     const Tensor& weights,
                                                     const Tensor& bias) {
  require_rank(input, 4, "conv2d input");
  require_rank(weights, 4, "conv2d weights");
  require_rank(bias, 1, "conv2d bias");
  const std::size_t batch = input.dim(0), ch_in = input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const std::size_t ch_out = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
  require(weights.dim(1) == ch_in,
          "conv2d: weights channel dim " + std::to_string(weights.dim(1)) +
              " != input channel dim " + std::to_string(ch_in));
  require(bias.dim(0) == ch_out,
          "conv2d: bias dim " + std::to_string(bias.dim(0)) +
              " != output channel dim " + std::to_string(ch_out));
  require(kh <= h, "conv2d: kernel height " + std::to_string(kh) +
                       " exceeds input height " + std::to_string(h));
  require(kw <= w, "conv2d: kernel width " + std::to_string(kw) +
                       " exceeds input width " + std::to_string(w));
  const std::size_t oh = h - kh + 1, ow = w - kw + 1;
  Tensor out({batch, ch_out, oh, ow});

  const double* pin = input.data();
  const double* pw = weights.data();
  const double* pb = bias.data();
  double* pout = out.data();
  parallel_chunks(batch, kRowChunk, [&](std::size_t, std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      for (std::size_t o = 0; o < ch_out; ++o) {
        double* obase = pout + ((b * ch_out + o) * oh) * ow;
        const double bo = pb[o];
        for (std::size_t i = 0; i < oh * ow; ++i) obase[i] = bo;
        for (std::size_t c = 0; c < ch_in; ++c) {
          const double* ibase = pin + ((b * ch_in + c) * h) * w;
          const double* wbase = pw + ((o * ch_in + c) * kh) * kw;
          for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const double wv = wbase[ki * kw + kj];
              if (wv == 0.0) continue;
              for (std::size_t i = 0; i < oh; ++i) {
                const double* irow = ibase + (i + ki) * w + kj;
                double* orow = obase + i * ow;
                for (std::size_t j = 0; j < ow; ++j) orow[j] += wv * irow[j];
              }
            }
          }
        }
      }
    }
  });
  Conv2dCache cache{input, weights, out.shape()};
  return {std::move(out), std::move(cache)};
}

inline Conv2dGrads conv2d_backward(const Tensor& grad_out, const Conv2dCache& cache) {
  require(grad_out.shape() == cache.out_shape,
          "conv2d_backward: gradient shape " + shape_to_string(grad_out.shape()) +
              " does not match cached forward output " + shape_to_string(cache.out_shape));
  const std::size_t batch = cache.input.dim(0), ch_in = cache.input.dim(1);
  const std::size_t h = cache.input.dim(2), w = cache.input.dim(3);
  const std::size_t ch_out = cache.weights.dim(0), kh = cache.weights.dim(2),
                    kw = cache.weights.dim(3);
  const std::size_t oh = h - kh + 1, ow = w - kw + 1;

  Tensor gin({batch, ch_in, h, w});
  const std::size_t n_chunks = (batch + kRowChunk - 1) / kRowChunk;
  std::vector<std::vector<double>> gw_part(n_chunks), gb_part(n_chunks);

  const double* pg = grad_out.data();
  const double* pin = cache.input.data();
  const double* pw = cache.weights.data();
  double* pgin = gin.data();
  parallel_chunks(batch, kRowChunk, [&](std::size_t ch, std::size_t b0, std::size_t b1) {
    auto& gw = gw_part[ch];
    auto& gb = gb_part[ch];
    gw.assign(cache.weights.size(), 0.0);
    gb.assign(ch_out, 0.0);
    for (std::size_t b = b0; b < b1; ++b) {
      for (std::size_t o = 0; o < ch_out; ++o) {
        const double* gbase = pg + ((b * ch_out + o) * oh) * ow;
        double s = 0.0;
        for (std::size_t i = 0; i < oh * ow; ++i) s += gbase[i];
        gb[o] += s;
        for (std::size_t c = 0; c < ch_in; ++c) {
          const double* ibase = pin + ((b * ch_in + c) * h) * w;
          double* ginbase = pgin + ((b * ch_in + c) * h) * w;
          const double* wbase = pw + ((o * ch_in + c) * kh) * kw;
          double* gwbase = gw.data() + ((o * ch_in + c) * kh) * kw;
          for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const double wv = wbase[ki * kw + kj];
              double acc = 0.0;
              for (std::size_t i = 0; i < oh; ++i) {
                const double* grow = gbase + i * ow;
                const double* irow = ibase + (i + ki) * w + kj;
                double* ginrow = ginbase + (i + ki) * w + kj;
                for (std::size_t j = 0; j < ow; ++j) {
                  acc += grow[j] * irow[j];
                  ginrow[j] += wv * grow[j];
                }
              }
              gwbase[ki * kw + kj] += acc;
            }
          }
        }
      }
    }
  });

  Tensor gw(cache.weights.shape());
  Tensor gb({ch_out});
  for (std::size_t ch = 0; ch < n_chunks; ++ch) {
    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += gw_part[ch][i];
    for (std::size_t i = 0; i < ch_out; ++i) gb[i] += gb_part[ch][i];
  }
  return {std::move(gin), std::move(gw), std::move(gb)};
}

struct MaxPool2Cache {
  std::vector<std::size_t> in_shape;
  std::vector<std::size_t> out_shape;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

// 2x2 window, stride 2, no padding. Ties go to the lowest flat index.
inline std::pair<Tensor, MaxPool2Cache> maxpool2_forward(const Tensor& input) {
  require_rank(input, 4, "maxpool2 input");
  const std::size_t batch = input.dim(0), ch = input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  require(h % 2 == 0, "maxpool2: odd input height " + std::to_string(h));
  require(w % 2 == 0, "maxpool2: odd input width " + std::to_string(w));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({batch, ch, oh, ow});
  MaxPool2Cache cache{input.shape(), out.shape(), std::vector<std::uint32_t>(out.size())};
  const double* pin = input.data();
  double* pout = out.data();
  std::uint32_t* parg = cache.argmax.data();
  parallel_chunks(batch * ch, kRowChunk, [&](std::size_t, std::size_t p0, std::size_t p1) {
    for (std::size_t plane = p0; plane < p1; ++plane) {
      const double* ibase = pin + plane * h * w;
      double* obase = pout + plane * oh * ow;
      std::uint32_t* abase = parg + plane * oh * ow;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t i0 = 2 * i, j0 = 2 * j;
          std::size_t best = i0 * w + j0;
          double bv = ibase[best];
          const std::size_t cand[3] = {i0 * w + j0 + 1, (i0 + 1) * w + j0,
                                       (i0 + 1) * w + j0 + 1};
          for (std::size_t k = 0; k < 3; ++k) {
            if (ibase[cand[k]] > bv) {
              bv = ibase[cand[k]];
              best = cand[k];
            }
          }
          obase[i * ow + j] = bv;
          abase[i * ow + j] = static_cast<std::uint32_t>(plane * h * w + best);
        }
      }
    }
  });
  return {std::move(out), std::move(cache)};
}

inline Tensor maxpool2_backward(const Tensor& grad_out, const MaxPool2Cache& cache) {
  require(grad_out.shape() == cache.out_shape,
          "maxpool2_backward: gradient shape " + shape_to_string(grad_out.shape()) +
              " does not match cached forward output " + shape_to_string(cache.out_shape));
  Tensor gin(cache.in_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i)
    gin[cache.argmax[i]] += grad_out[i];
  return gin;
}

struct ReluCache {
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> positive;
};

// Subgradient 0 at 0: gradient passes only where the input was > 0.
inline std::pair<Tensor, ReluCache> relu_forward(const Tensor& input) {
  Tensor out = input;
  ReluCache cache{input.shape(), std::vector<std::uint8_t>(input.size())};
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] > 0.0) {
      cache.positive[i] = 1;
    } else {
      out[i] = 0.0;
    }
  }
  return {std::move(out), std::move(cache)};
}

inline Tensor relu_backward(const Tensor& grad_out, const ReluCache& cache) {
  require(grad_out.shape() == cache.shape,
          "relu_backward: gradient shape " + shape_to_string(grad_out.shape()) +
              " does not match cached forward input " + shape_to_string(cache.shape));
  Tensor gin = grad_out;
  for (std::size_t i = 0; i < gin.size(); ++i)
    if (!cache.positive[i]) gin[i] = 0.0;
  return gin;
}

struct DenseCache {
  Tensor input;    // [batch, d_in], after any mask was applied
  Tensor weights;  // [d_in, d_out]
  bool has_bias = true;
};

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

inline std::pair<Tensor, DenseCache> dense_forward(const Tensor& input,
                                                   const Tensor& weights,
                                                   const Tensor& bias) {
  require_rank(input, 2, "dense input");
  require_rank(weights, 2, "dense weights");
  require(input.dim(1) == weights.dim(0),
          "dense: input width " + std::to_string(input.dim(1)) +
              " != weights input dim " + std::to_string(weights.dim(0)));
  const bool has_bias = !bias.empty();
  if (has_bias) {
    require_rank(bias, 1, "dense bias");
    require(bias.dim(0) == weights.dim(1),
            "dense: bias dim " + std::to_string(bias.dim(0)) +
                " != weights output dim " + std::to_string(weights.dim(1)));
  }
  Tensor out = matmul(input, weights);
  if (has_bias) {
    const std::size_t n = out.dim(1);
    for (std::size_t i = 0; i < out.dim(0); ++i)
      for (std::size_t j = 0; j < n; ++j) out(i, j) += bias[j];
  }
  return {std::move(out), DenseCache{input, weights, has_bias}};
}

inline DenseGrads dense_backward(const Tensor& grad_out, const DenseCache& cache) {
  require(grad_out.rank() == 2 && grad_out.dim(0) == cache.input.dim(0) &&
              grad_out.dim(1) == cache.weights.dim(1),
          "dense_backward: gradient shape " + shape_to_string(grad_out.shape()) +
              " does not match cached forward (batch " +
              std::to_string(cache.input.dim(0)) + ", d_out " +
              std::to_string(cache.weights.dim(1)) + ")");
  DenseGrads g;
  g.input = matmul_a_bt(grad_out, cache.weights);
  g.weights = matmul_at_b(cache.input, grad_out);
  if (cache.has_bias) {
    g.bias = Tensor({cache.weights.dim(1)});
    for (std::size_t i = 0; i < grad_out.dim(0); ++i)
      for (std::size_t j = 0; j < grad_out.dim(1); ++j) g.bias[j] += grad_out(i, j);
  }
  return g;
}

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax");
  Tensor out = logits;
  const std::size_t q = logits.dim(1);
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    double* row = out.data() + i * q;
    double mx = row[0];
    for (std::size_t j = 1; j < q; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < q; ++j) row[j] /= z;
  }
  return out;
}

inline void require_one_hot(const Tensor& onehot, const std::string& what) {
  require_rank(onehot, 2, what);
  for (std::size_t i = 0; i < onehot.dim(0); ++i) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < onehot.dim(1); ++j) {
      const double v = onehot(i, j);
      require(v == 0.0 || v == 1.0,
              what + ": row " + std::to_string(i) + " is not one-hot");
      ones += (v == 1.0);
    }
    require(ones == 1, what + ": row " + std::to_string(i) + " is not one-hot");
  }
}

// Mean over the batch of -log softmax(logits)[true class], with the
// log-softmax fused for stability. grad = (softmax - onehot) / batch.
inline std::pair<double, Tensor> softmax_cross_entropy(const Tensor& logits,
                                                       const Tensor& onehot) {
  require_rank(logits, 2, "softmax_cross_entropy logits");
  require(logits.shape() == onehot.shape(),
          "softmax_cross_entropy: logits shape " + shape_to_string(logits.shape()) +
              " != labels shape " + shape_to_string(onehot.shape()));
  require_one_hot(onehot, "softmax_cross_entropy labels");
  const std::size_t batch = logits.dim(0), q = logits.dim(1);
  Tensor grad({batch, q});
  double loss = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const double* row = logits.data() + i * q;
    double mx = row[0];
    for (std::size_t j = 1; j < q; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < q; ++j) z += std::exp(row[j] - mx);
    const double logz = std::log(z);
    for (std::size_t j = 0; j < q; ++j) {
      const double p = std::exp(row[j] - mx) / z;
      grad(i, j) = p - onehot(i, j);
      if (onehot(i, j) == 1.0) loss -= (row[j] - mx - logz);
    }
  }
  loss /= static_cast<double>(batch);
  for (auto& g : grad.values()) g /= static_cast<double>(batch);
  return {loss, std::move(grad)};
}

}  // namespace calgp
