#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "calgp/layers.hpp"
#include "calgp/random_features.hpp"
#include "calgp/rng.hpp"
#include "calgp/tensor.hpp"

namespace calgp {

// train and mc_sample draw fresh Bernoulli keep-masks for every weight layer;
// deterministic replaces each mask by its keep-probability (weight scaling)
// and exists for debugging only.
enum class ForwardMode { train, mc_sample, deterministic };

inline bool stochastic(ForwardMode m) { return m != ForwardMode::deterministic; }

// ---------------------------------------------------------------------------
// Convolutional feature extractor c(x|Psi) with Monte-Carlo dropout on the
// weight means, realized as unit dropout on each weight layer's inputs (conv
// layers mask their input activation units, dense layers their input units,
// which is the weight-column reparameterization). Masks are Bernoulli per
// unit and per example, redrawn on every stochastic forward call, as in
// standard dropout training. Biases are never dropped.
// ---------------------------------------------------------------------------

struct ConvLayer {
  Tensor mean_w;  // [co, ci, kh, kw]
  Tensor bias;    // [co]
  double keep_prob = 1.0;
};

struct DenseLayerSpec {
  Tensor mean_w;  // [d_in, d_out]
  Tensor bias;    // [d_out]
  double keep_prob = 1.0;
};

struct ReluOp {};
struct Pool2Op {};

using ExtractorLayer = std::variant<ConvLayer, DenseLayerSpec, ReluOp, Pool2Op>;

// Masks are stored flat as [batch, units]; empty means all-ones.
struct ConvLayerCache {
  Conv2dCache op;
  std::vector<double> mask;
};
struct DenseLayerCache {
  DenseCache op;
  std::vector<double> mask;
};
using ExtractorLayerCache =
    std::variant<ConvLayerCache, DenseLayerCache, ReluCache, MaxPool2Cache>;

struct FeatureExtractor {
  std::array<std::size_t, 3> input_shape{};  // [channels, h, w]
  std::vector<ExtractorLayer> layers;
  std::size_t output_dim = 0;  // nconv

  // Per-example, per-unit keep masks, flat [batch, units].
  static std::vector<double> draw_mask(std::size_t batch, std::size_t units,
                                       double keep, ForwardMode mode, Rng& rng) {
    std::vector<double> m;
    if (keep >= 1.0) return m;
    m.resize(batch * units);
    if (stochastic(mode)) {
      for (auto& v : m) v = rng.bernoulli(keep) ? 1.0 : 0.0;
    } else {
      for (auto& v : m) v = keep;
    }
    return m;
  }

  static void apply_mask(Tensor& x, const std::vector<double>& mask) {
    if (mask.empty()) return;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= mask[i];
  }

  Tensor forward(const Tensor& images, ForwardMode mode, Rng& rng,
                 std::vector<ExtractorLayerCache>* caches) const {
    require_rank(images, 4, "extractor input");
    require(images.dim(1) == input_shape[0] && images.dim(2) == input_shape[1] &&
                images.dim(3) == input_shape[2],
            "extractor: image shape [" + std::to_string(images.dim(1)) + "," +
                std::to_string(images.dim(2)) + "," + std::to_string(images.dim(3)) +
                "] does not match configured [" + std::to_string(input_shape[0]) +
                "," + std::to_string(input_shape[1]) + "," +
                std::to_string(input_shape[2]) + "]");
    const std::size_t batch = images.dim(0);
    Tensor cur = images;
    bool flat = false;
    for (const auto& layer : layers) {
      if (std::holds_alternative<ConvLayer>(layer)) {
        const auto& cl = std::get<ConvLayer>(layer);
        require(!flat, "extractor: conv layer after flatten");
        const std::size_t units = cur.dim(1) * cur.dim(2) * cur.dim(3);
        auto mask = draw_mask(batch, units, cl.keep_prob, mode, rng);
        Tensor x_eff = cur;
        apply_mask(x_eff, mask);
        auto [out, op_cache] = conv2d_forward(x_eff, cl.mean_w, cl.bias);
        if (caches) caches->push_back(ConvLayerCache{std::move(op_cache), std::move(mask)});
        cur = std::move(out);
      } else if (std::holds_alternative<DenseLayerSpec>(layer)) {
        const auto& dl = std::get<DenseLayerSpec>(layer);
        if (!flat) {
          cur = Tensor({batch, cur.size() / batch}, std::vector<double>(
                           cur.values().begin(), cur.values().end()));
          flat = true;
        }
        auto mask = draw_mask(batch, cur.dim(1), dl.keep_prob, mode, rng);
        Tensor x_eff = cur;
        apply_mask(x_eff, mask);
        auto [out, op_cache] = dense_forward(x_eff, dl.mean_w, dl.bias);
        if (caches) caches->push_back(DenseLayerCache{std::move(op_cache), std::move(mask)});
        cur = std::move(out);
      } else if (std::holds_alternative<ReluOp>(layer)) {
        auto [out, rc] = relu_forward(cur);
        if (caches) caches->push_back(std::move(rc));
        cur = std::move(out);
      } else {
        require(!flat, "extractor: pool layer after flatten");
        auto [out, pc] = maxpool2_forward(cur);
        if (caches) caches->push_back(std::move(pc));
        cur = std::move(out);
      }
    }
    if (!flat)
      cur = Tensor({batch, cur.size() / batch},
                   std::vector<double>(cur.values().begin(), cur.values().end()));
    require(cur.dim(1) == output_dim,
            "extractor: produced " + std::to_string(cur.dim(1)) +
                " features, expected " + std::to_string(output_dim));
    return cur;
  }

  // Returns gradients for the weight layers in layer order, as (mean, bias)
  // pairs; relu/pool layers contribute no parameters. The incoming gradient is
  // reshaped to each layer's cached output shape, which undoes the implicit
  // trailing flatten.
  std::vector<std::pair<Tensor, Tensor>> backward(
      const Tensor& grad_features, const std::vector<ExtractorLayerCache>& caches,
      const Tensor& images) const {
    require(caches.size() == layers.size(), "extractor backward: cache mismatch");
    std::vector<std::pair<Tensor, Tensor>> grads;
    Tensor g = grad_features;
    auto fit = [&](const std::vector<std::size_t>& shape) {
      if (g.shape() != shape) g = reshape(std::move(g), shape);
    };
    for (std::size_t idx = layers.size(); idx-- > 0;) {
      const auto& layer = layers[idx];
      const auto& cache = caches[idx];
      if (std::holds_alternative<ConvLayer>(layer)) {
        const auto& cc = std::get<ConvLayerCache>(cache);
        fit(cc.op.out_shape);
        auto cg = conv2d_backward(g, cc.op);
        if (!cc.mask.empty())
          for (std::size_t i = 0; i < cg.input.size(); ++i)
            cg.input[i] *= cc.mask[i];
        grads.emplace_back(std::move(cg.weights), std::move(cg.bias));
        g = std::move(cg.input);
      } else if (std::holds_alternative<DenseLayerSpec>(layer)) {
        const auto& dl = std::get<DenseLayerSpec>(layer);
        const auto& dc = std::get<DenseLayerCache>(cache);
        fit({images.dim(0), dl.mean_w.dim(1)});
        auto dg = dense_backward(g, dc.op);
        if (!dc.mask.empty())
          for (std::size_t i = 0; i < dg.input.size(); ++i)
            dg.input[i] *= dc.mask[i];
        grads.emplace_back(std::move(dg.weights), std::move(dg.bias));
        g = std::move(dg.input);
      } else if (std::holds_alternative<ReluOp>(layer)) {
        const auto& rc = std::get<ReluCache>(cache);
        fit(rc.shape);
        g = relu_backward(g, rc);
      } else {
        const auto& pc = std::get<MaxPool2Cache>(cache);
        fit(pc.out_shape);
        g = maxpool2_backward(g, pc);
      }
    }
    std::vector<std::pair<Tensor, Tensor>> ordered(grads.rbegin(), grads.rend());
    return ordered;
  }
};

// ---------------------------------------------------------------------------
// GP layer: random-feature map plus Bayesian linear readout F = Phi W with
// W = M_w diag(z_w). At DGP depth > 1 the readout consumes [Phi, C].
// ---------------------------------------------------------------------------

struct GpRfLayer {
  FeatureMap fmap;
  Tensor readout_mean;  // [fmap width (+ nconv when concat), out_dim]
  double keep_prob_w = 1.0;
  Tensor theta_log;  // [log sigma^2, log l^2 ...] when covariance is learned
};

struct GpLayerCache {
  FeatureMapCache fmap_cache;
  Tensor phi;
  Tensor readout_input;              // masked [phi, C] (or [phi])
  std::vector<double> w_mask;        // readout input units; empty = ones
  std::vector<double> omega_mask;    // feature-map input units; empty = ones
};

struct ModelCaches {
  Tensor images;
  std::vector<ExtractorLayerCache> extractor;
  Tensor conv_features;
  std::vector<GpLayerCache> gp;
  ForwardMode mode = ForwardMode::train;
};

struct ParamView {
  std::string name;
  Tensor* value;
};

struct ModelGrads {
  std::vector<Tensor> by_param;  // aligned with CnnGpModel::parameters()
};

class CnnGpModel {
 public:
  FeatureExtractor extractor;
  std::vector<GpRfLayer> gp_layers;
  std::size_t num_classes = 0;
  bool learn_omega = false;
  bool learn_theta = false;
  double keep_prob_omega = 1.0;

  bool concat_conv() const { return gp_layers.size() > 1; }

  // Propagates learned covariance parameters into the feature maps and, for
  // frozen-prior spectra, regenerates Omega = Lambda^{-1/2} eps from the
  // stored draws.
  void sync_theta() {
    if (!learn_theta) return;
    for (auto& layer : gp_layers) {
      auto& p = layer.fmap.params;
      p.sigma = std::exp(0.5 * layer.theta_log[0]);
      if (layer.fmap.spectral.mode == SpectralMode::sorf) {
        const double l2 = std::exp(layer.theta_log[1]);
        for (auto& v : p.lengthscale_sq) v = l2;
        layer.fmap.spectral.inv_lengthscale = 1.0 / std::sqrt(l2);
      } else if (layer.theta_log.size() == 2) {
        const double l2 = std::exp(layer.theta_log[1]);
        for (auto& v : p.lengthscale_sq) v = l2;
        if (!learn_omega) regenerate_omega(layer.fmap.spectral, p);
      } else {
        for (std::size_t k = 0; k < p.lengthscale_sq.size(); ++k)
          p.lengthscale_sq[k] = std::exp(layer.theta_log[1 + k]);
        if (!learn_omega) regenerate_omega(layer.fmap.spectral, p);
      }
    }
  }

  std::pair<Tensor, ModelCaches> forward(const Tensor& images, ForwardMode mode,
                                         Rng& rng) {
    require(num_classes >= 2, "model: needs at least 2 classes");
    sync_theta();
    ModelCaches caches;
    caches.mode = mode;
    caches.images = images;
    Tensor conv = extractor.forward(images, mode, rng, &caches.extractor);
    caches.conv_features = conv;
    const std::size_t batch = images.dim(0);

    Tensor x = conv;
    for (std::size_t l = 0; l < gp_layers.size(); ++l) {
      auto& layer = gp_layers[l];
      GpLayerCache lc;

      Tensor fmap_in = x;
      if (learn_omega && layer.fmap.spectral.mode == SpectralMode::explicit_draw) {
        lc.omega_mask = FeatureExtractor::draw_mask(batch, fmap_in.dim(1),
                                                    keep_prob_omega, mode, rng);
        FeatureExtractor::apply_mask(fmap_in, lc.omega_mask);
      }
      lc.phi = apply_feature_map(fmap_in, layer.fmap, &lc.fmap_cache);

      Tensor r_in;
      if (concat_conv()) {
        const std::size_t w = lc.phi.dim(1), nc = conv.dim(1);
        r_in = Tensor({batch, w + nc});
        for (std::size_t i = 0; i < batch; ++i) {
          for (std::size_t j = 0; j < w; ++j) r_in(i, j) = lc.phi(i, j);
          for (std::size_t j = 0; j < nc; ++j) r_in(i, w + j) = conv(i, j);
        }
      } else {
        r_in = lc.phi;
      }
      require(layer.readout_mean.dim(0) == r_in.dim(1),
              "gp layer " + std::to_string(l) + ": readout expects " +
                  std::to_string(layer.readout_mean.dim(0)) + " inputs, got " +
                  std::to_string(r_in.dim(1)));

      lc.w_mask = FeatureExtractor::draw_mask(batch, r_in.dim(1), layer.keep_prob_w,
                                              mode, rng);
      FeatureExtractor::apply_mask(r_in, lc.w_mask);
      lc.readout_input = r_in;

      x = matmul(r_in, layer.readout_mean);
      caches.gp.push_back(std::move(lc));
    }
    require(x.dim(1) == num_classes,
            "model: final layer produced " + std::to_string(x.dim(1)) +
                " outputs for " + std::to_string(num_classes) + " classes");
    if (!x.all_finite())
      throw numeric_error("model forward produced non-finite logits");
    return {std::move(x), std::move(caches)};
  }

  // Fixed parameter order: extractor weight layers (mean, bias) in layer
  // order, then per GP layer the readout mean, Omega when learned, and the
  // covariance parameters when learned.
  std::vector<ParamView> parameters() {
    std::vector<ParamView> out;
    std::size_t wl = 0;
    for (auto& layer : extractor.layers) {
      if (std::holds_alternative<ConvLayer>(layer)) {
        auto& cl = std::get<ConvLayer>(layer);
        out.push_back({"extractor." + std::to_string(wl) + ".conv.mean", &cl.mean_w});
        out.push_back({"extractor." + std::to_string(wl) + ".conv.bias", &cl.bias});
        ++wl;
      } else if (std::holds_alternative<DenseLayerSpec>(layer)) {
        auto& dl = std::get<DenseLayerSpec>(layer);
        out.push_back({"extractor." + std::to_string(wl) + ".dense.mean", &dl.mean_w});
        out.push_back({"extractor." + std::to_string(wl) + ".dense.bias", &dl.bias});
        ++wl;
      }
    }
    for (std::size_t l = 0; l < gp_layers.size(); ++l) {
      auto& gl = gp_layers[l];
      out.push_back({"gp." + std::to_string(l) + ".readout.mean", &gl.readout_mean});
      if (learn_omega && gl.fmap.spectral.mode == SpectralMode::explicit_draw)
        out.push_back({"gp." + std::to_string(l) + ".spectral.omega",
                       &gl.fmap.spectral.omega});
      if (learn_theta)
        out.push_back({"gp." + std::to_string(l) + ".theta_log", &gl.theta_log});
    }
    return out;
  }

  ModelGrads backward(const Tensor& grad_logits, const ModelCaches& caches) {
    require(caches.gp.size() == gp_layers.size(),
            "model backward: cache does not match this model");
    const std::size_t batch = caches.images.dim(0);
    require(grad_logits.rank() == 2 && grad_logits.dim(0) == batch &&
                grad_logits.dim(1) == num_classes,
            "model backward: gradient shape " + shape_to_string(grad_logits.shape()) +
                " does not match logits [" + std::to_string(batch) + "," +
                std::to_string(num_classes) + "]");

    const std::size_t nc = caches.conv_features.dim(1);
    Tensor grad_conv({batch, nc});
    Tensor grad_x = grad_logits;

    std::vector<Tensor> readout_grads(gp_layers.size());
    std::vector<Tensor> omega_grads(gp_layers.size());
    std::vector<Tensor> theta_grads(gp_layers.size());

    for (std::size_t l = gp_layers.size(); l-- > 0;) {
      auto& layer = gp_layers[l];
      const auto& lc = caches.gp[l];

      readout_grads[l] = matmul_at_b(lc.readout_input, grad_x);
      Tensor grad_rin = matmul_a_bt(grad_x, layer.readout_mean);
      if (!lc.w_mask.empty())
        for (std::size_t i = 0; i < grad_rin.size(); ++i)
          grad_rin[i] *= lc.w_mask[i];

      const std::size_t w = layer.fmap.output_width();
      Tensor grad_phi({batch, w});
      if (concat_conv()) {
        for (std::size_t i = 0; i < batch; ++i) {
          for (std::size_t j = 0; j < w; ++j) grad_phi(i, j) = grad_rin(i, j);
          for (std::size_t j = 0; j < nc; ++j) grad_conv(i, j) += grad_rin(i, w + j);
        }
      } else {
        grad_phi = std::move(grad_rin);
      }

      const bool explicit_mode =
          layer.fmap.spectral.mode == SpectralMode::explicit_draw;
      const bool want_omega = explicit_mode && (learn_omega || learn_theta);
      auto fg = feature_map_backward(grad_phi, lc.fmap_cache, layer.fmap, want_omega);

      if (learn_omega && explicit_mode) omega_grads[l] = fg.omega;
      if (learn_theta) {
        Tensor tg(layer.theta_log.shape());
        tg[0] = feature_map_sigma_grad(grad_phi, lc.phi);
        if (layer.fmap.spectral.mode == SpectralMode::sorf) {
          // pre is proportional to exp(-u/2) for u = log l^2, so
          // dL/du = -0.5 * sum dL/dpre . pre, with dL/dpre recovered from the
          // arc/rbf chain exactly as in feature_map_backward
          double s = 0.0;
          const auto& pre = lc.fmap_cache.pre;
          const double pref = layer.fmap.prefactor();
          const std::size_t n_rf = layer.fmap.num_features();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t j = 0; j < n_rf; ++j) {
              const double pv = pre(b, j);
              double gp;
              if (layer.fmap.kind == KernelKind::arc) {
                gp = pv > 0.0 ? pref * grad_phi(b, j) : 0.0;
              } else {
                gp = pref * (-std::sin(pv) * grad_phi(b, j) +
                             std::cos(pv) * grad_phi(b, n_rf + j));
              }
              s += gp * pv;
            }
          }
          tg[1] = -0.5 * s;
        } else if (!learn_omega) {
          // through Omega = Lambda^{-1/2} eps: dOmega/du_k = -Omega/2
          const auto& om = layer.fmap.spectral.omega;
          for (std::size_t k = 0; k < om.dim(0); ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < om.dim(1); ++j)
              s += fg.omega(k, j) * om(k, j);
            tg[1 + k] = -0.5 * s;
          }
        }
        theta_grads[l] = std::move(tg);
      }

      Tensor grad_in = std::move(fg.input);
      if (!lc.omega_mask.empty())
        for (std::size_t i = 0; i < grad_in.size(); ++i)
          grad_in[i] *= lc.omega_mask[i];

      if (l == 0) {
        for (std::size_t i = 0; i < grad_in.size(); ++i) grad_conv[i] += grad_in[i];
      } else {
        grad_x = std::move(grad_in);
      }
    }

    auto ext_grads = extractor.backward(grad_conv, caches.extractor, caches.images);

    ModelGrads grads;
    for (auto& [gw, gb] : ext_grads) {
      grads.by_param.push_back(std::move(gw));
      grads.by_param.push_back(std::move(gb));
    }
    for (std::size_t l = 0; l < gp_layers.size(); ++l) {
      grads.by_param.push_back(std::move(readout_grads[l]));
      if (learn_omega && gp_layers[l].fmap.spectral.mode == SpectralMode::explicit_draw)
        grads.by_param.push_back(std::move(omega_grads[l]));
      if (learn_theta) grads.by_param.push_back(std::move(theta_grads[l]));
    }
    return grads;
  }

  // Monte-Carlo predictive: mean over S mask resamplings of the
  // softmax probabilities. Rows stay on the simplex.
  Tensor predictive_distribution(const Tensor& images, std::size_t s, Rng& rng) {
    require(s >= 1, "predictive_distribution: S must be >= 1");
    Tensor acc;
    for (std::size_t t = 0; t < s; ++t) {
      auto [logits, caches] = forward(images, ForwardMode::mc_sample, rng);
      Tensor p = softmax_rows(logits);
      if (t == 0) {
        acc = std::move(p);
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
      }
    }
    for (auto& v : acc.values()) v /= static_cast<double>(s);
    return acc;
  }
};

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

struct ExtractorItem {
  enum class Kind { conv, relu, pool2, dense } kind = Kind::conv;
  std::size_t channels = 0;  // conv out channels / dense units
  std::size_t kernel = 0;    // conv kernel size
};

struct ModelSpec {
  std::vector<ExtractorItem> extractor;  // empty = identity (flatten only)
  KernelKind kernel = KernelKind::arc;
  std::size_t n_rf = 1024;
  SpectralMode spectral = SpectralMode::explicit_draw;
  std::size_t depth = 1;
  std::size_t hidden_width = 64;
  double sigma = 1.0;
  double lengthscale = 1.0;
  double keep_prob_psi = 0.5;
  double keep_prob_w = 0.5;
  double keep_prob_omega = 0.5;
  bool learn_omega = false;
  bool learn_theta = false;
};

inline CnnGpModel build_model(const ModelSpec& spec,
                              std::array<std::size_t, 3> image_shape,
                              std::size_t num_classes, Rng& rng) {
  require(num_classes >= 2, "build_model: needs at least 2 classes");
  require(spec.depth >= 1, "build_model: depth must be >= 1");
  require(spec.n_rf >= 1, "build_model: n_rf must be >= 1");
  require(!(spec.learn_omega && spec.spectral == SpectralMode::sorf),
          "build_model: variational Omega is not available in sorf mode");

  CnnGpModel model;
  model.num_classes = num_classes;
  model.learn_omega = spec.learn_omega;
  model.learn_theta = spec.learn_theta;
  model.keep_prob_omega = spec.keep_prob_omega;
  model.extractor.input_shape = image_shape;

  std::size_t c = image_shape[0], h = image_shape[1], w = image_shape[2];
  bool flat = false;
  std::size_t flat_dim = 0;
  Rng init = rng.split(0xE0);
  for (const auto& item : spec.extractor) {
    switch (item.kind) {
      case ExtractorItem::Kind::conv: {
        require(!flat, "build_model: conv after dense in extractor");
        require(item.kernel >= 1 && item.kernel <= h && item.kernel <= w,
                "build_model: conv kernel " + std::to_string(item.kernel) +
                    " does not fit input " + std::to_string(h) + "x" +
                    std::to_string(w));
        ConvLayer cl;
        const double he = std::sqrt(2.0 / double(c * item.kernel * item.kernel));
        cl.mean_w = init.normal_tensor({item.channels, c, item.kernel, item.kernel}, he);
        cl.bias = Tensor({item.channels});
        cl.keep_prob = spec.keep_prob_psi;
        model.extractor.layers.push_back(std::move(cl));
        c = item.channels;
        h = h - item.kernel + 1;
        w = w - item.kernel + 1;
        break;
      }
      case ExtractorItem::Kind::relu:
        model.extractor.layers.push_back(ReluOp{});
        break;
      case ExtractorItem::Kind::pool2:
        require(!flat, "build_model: pool after dense in extractor");
        require(h % 2 == 0 && w % 2 == 0,
                "build_model: pool2 needs even spatial dims, got " +
                    std::to_string(h) + "x" + std::to_string(w));
        model.extractor.layers.push_back(Pool2Op{});
        h /= 2;
        w /= 2;
        break;
      case ExtractorItem::Kind::dense: {
        const std::size_t d_in = flat ? flat_dim : c * h * w;
        DenseLayerSpec dl;
        dl.mean_w = init.normal_tensor({d_in, item.channels},
                                       std::sqrt(2.0 / double(d_in)));
        dl.bias = Tensor({item.channels});
        dl.keep_prob = spec.keep_prob_psi;
        model.extractor.layers.push_back(std::move(dl));
        flat = true;
        flat_dim = item.channels;
        break;
      }
    }
  }
  const std::size_t nconv = flat ? flat_dim : c * h * w;
  model.extractor.output_dim = nconv;

  const bool concat = spec.depth > 1;
  std::size_t layer_in = nconv;
  for (std::size_t l = 0; l < spec.depth; ++l) {
    GpRfLayer layer;
    KernelParams params = KernelParams::isotropic(spec.sigma, spec.lengthscale, layer_in);
    Rng frng = rng.split(0xF0 + l);
    layer.fmap = make_feature_map(spec.kernel, layer_in, spec.n_rf, params,
                                  spec.spectral, frng);
    layer.fmap.learn_omega = spec.learn_omega;
    const std::size_t out_dim =
        l + 1 == spec.depth ? num_classes : spec.hidden_width;
    const std::size_t readout_in = layer.fmap.output_width() + (concat ? nconv : 0);
    Rng rrng = rng.split(0xD0 + l);
    layer.readout_mean =
        rrng.normal_tensor({readout_in, out_dim}, 1.0 / std::sqrt(double(readout_in)));
    layer.keep_prob_w = spec.keep_prob_w;
    if (spec.learn_theta) {
      // the variational-Omega KL needs a single shared length-scale
      const std::size_t n_l =
          (spec.spectral == SpectralMode::sorf || spec.learn_omega) ? 1 : layer_in;
      layer.theta_log = Tensor({1 + n_l});
      layer.theta_log[0] = 2.0 * std::log(spec.sigma);
      for (std::size_t k = 0; k < n_l; ++k)
        layer.theta_log[1 + k] = 2.0 * std::log(spec.lengthscale);
    }
    model.gp_layers.push_back(std::move(layer));
    layer_in = out_dim;
  }
  return model;
}

}  // namespace calgp
