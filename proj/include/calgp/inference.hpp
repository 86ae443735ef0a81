#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "calgp/layers.hpp"
#include "calgp/model.hpp"
#include "calgp/rng.hpp"
#include "calgp/tensor.hpp"

namespace calgp {

struct TrainConfig {
  std::size_t batch_size = 1000;
  double learning_rate = 0.001;
  std::size_t epochs = 30;
  std::size_t n_mc = 1;  // MC samples per step
  double keep_prob_w = 0.5;
  double keep_prob_psi = 0.5;
  double keep_prob_omega = 0.5;
  bool learn_omega = false;
  bool learn_theta = false;
  std::uint64_t seed = 1;

  void validate() const {
    require(batch_size >= 1, "train config: batch_size must be >= 1");
    require(learning_rate > 0.0 || learning_rate == 0.0,
            "train config: learning_rate must be >= 0");
    require(n_mc >= 1, "train config: n_mc must be >= 1");
    for (double p : {keep_prob_w, keep_prob_psi, keep_prob_omega})
      require(p > 0.0 && p <= 1.0, "train config: keep probabilities must be in (0,1]");
  }
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m, v;
  long step = 0;

  void init(const std::vector<ParamView>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.value->shape());
      v.emplace_back(p.value->shape());
    }
    step = 0;
  }

  void update(std::vector<ParamView>& params, const std::vector<Tensor>& grads,
              double lr) {
    require(params.size() == m.size() && grads.size() == m.size(),
            "adam: parameter/gradient count mismatch");
    ++step;
    const double c1 = 1.0 - std::pow(beta1, double(step));
    const double c2 = 1.0 - std::pow(beta2, double(step));
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor& x = *params[p].value;
      const Tensor& g = grads[p];
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[p][i] = beta1 * m[p][i] + (1.0 - beta1) * g[i];
        v[p][i] = beta2 * v[p][i] + (1.0 - beta2) * g[i] * g[i];
        x[i] -= lr * (m[p][i] / c1) / (std::sqrt(v[p][i] / c2) + eps);
      }
    }
  }
};

struct EllEstimate {
  double value = 0.0;
  ModelGrads grads;
  Tensor first_logits;  // logits of the first MC draw, for cheap diagnostics
};

// Doubly-stochastic estimator of the expected log-likelihood:
//   (n/m) (1/N_MC) sum_i sum_{k in batch} log p(y_k | x_k, W^(i), Psi^(i)),
// with fresh Bernoulli masks per draw. Returns the value and its gradient
// w.r.t. all model parameters. The (n/m) prefactor follows the actual batch
// length, so a short trailing batch is weighted correctly.
inline EllEstimate expected_ll_estimate(CnnGpModel& model, const Tensor& images,
                                        const Tensor& onehot, std::size_t n_total,
                                        std::size_t n_mc, Rng& rng) {
  require(images.rank() == 4 && images.dim(0) >= 1,
          "expected_ll_estimate: empty batch");
  require(n_mc >= 1, "expected_ll_estimate: n_mc must be >= 1");
  const double n = static_cast<double>(n_total);
  EllEstimate est;
  for (std::size_t draw = 0; draw < n_mc; ++draw) {
    auto [logits, caches] = model.forward(images, ForwardMode::train, rng);
    auto [loss, grad_logits] = softmax_cross_entropy(logits, onehot);
    // sum_k log p = -m * loss, value contribution = -(n/m) m loss / N_MC
    est.value += -n * loss / double(n_mc);
    const double scale = -n / double(n_mc);
    for (auto& g : grad_logits.values()) g *= scale;
    ModelGrads g = model.backward(grad_logits, caches);
    if (draw == 0) {
      est.grads = std::move(g);
      est.first_logits = std::move(logits);
    } else {
      for (std::size_t p = 0; p < g.by_param.size(); ++p)
        for (std::size_t i = 0; i < g.by_param[p].size(); ++i)
          est.grads.by_param[p][i] += g.by_param[p][i];
    }
  }
  return est;
}

// KL approximation: (pi/2) ||M||^2 summed over every weight-mean matrix with
// its own keep probability. Biases carry no penalty.
inline double kl_penalty(const CnnGpModel& model) {
  double kl = 0.0;
  for (const auto& layer : model.extractor.layers) {
    if (std::holds_alternative<ConvLayer>(layer)) {
      const auto& cl = std::get<ConvLayer>(layer);
      kl += 0.5 * cl.keep_prob * squared_norm(cl.mean_w);
    } else if (std::holds_alternative<DenseLayerSpec>(layer)) {
      const auto& dl = std::get<DenseLayerSpec>(layer);
      kl += 0.5 * dl.keep_prob * squared_norm(dl.mean_w);
    }
  }
  for (const auto& gl : model.gp_layers)
    kl += 0.5 * gl.keep_prob_w * squared_norm(gl.readout_mean);
  return kl;
}

// KL with Omega treated variationally: adds the length-scale terms
//   (l^2 pi_Omega / 2) ||M_Omega||^2 + N_RF nconv log(l^-2)
// per GP layer to kl_penalty.
inline double kl_penalty_variational_omega(const CnnGpModel& model, double lengthscale) {
  require(model.learn_omega, "kl_penalty_variational_omega: learn_omega is off");
  require(lengthscale > 0.0, "kl_penalty_variational_omega: length-scale must be positive");
  double kl = kl_penalty(model);
  for (const auto& gl : model.gp_layers) {
    require(gl.fmap.spectral.mode == SpectralMode::explicit_draw,
            "kl_penalty_variational_omega: undefined for sorf spectral mode");
    const double l2 = lengthscale * lengthscale;
    kl += 0.5 * l2 * model.keep_prob_omega * squared_norm(gl.fmap.spectral.omega);
    kl += double(gl.fmap.num_features()) * double(gl.fmap.input_dim()) *
          std::log(1.0 / l2);
  }
  return kl;
}

namespace detail {

// Total KL for the training objective, using each layer's own length-scale,
// plus its gradient aligned with model.parameters().
inline double kl_with_grads(CnnGpModel& model, std::vector<Tensor>& grads_out) {
  auto params = model.parameters();
  grads_out.clear();
  for (const auto& p : params) grads_out.emplace_back(p.value->shape());

  double kl = 0.0;
  std::size_t idx = 0;
  for (const auto& layer : model.extractor.layers) {
    if (std::holds_alternative<ConvLayer>(layer)) {
      const auto& cl = std::get<ConvLayer>(layer);
      kl += 0.5 * cl.keep_prob * squared_norm(cl.mean_w);
      for (std::size_t i = 0; i < cl.mean_w.size(); ++i)
        grads_out[idx][i] = cl.keep_prob * cl.mean_w[i];
      idx += 2;  // mean + bias
    } else if (std::holds_alternative<DenseLayerSpec>(layer)) {
      const auto& dl = std::get<DenseLayerSpec>(layer);
      kl += 0.5 * dl.keep_prob * squared_norm(dl.mean_w);
      for (std::size_t i = 0; i < dl.mean_w.size(); ++i)
        grads_out[idx][i] = dl.keep_prob * dl.mean_w[i];
      idx += 2;
    }
  }
  for (auto& gl : model.gp_layers) {
    kl += 0.5 * gl.keep_prob_w * squared_norm(gl.readout_mean);
    for (std::size_t i = 0; i < gl.readout_mean.size(); ++i)
      grads_out[idx][i] = gl.keep_prob_w * gl.readout_mean[i];
    ++idx;
    if (model.learn_omega && gl.fmap.spectral.mode == SpectralMode::explicit_draw) {
      double ell = 0.0;
      require(gl.fmap.params.isotropic_lengthscale(&ell),
              "train: variational Omega requires isotropic length-scales");
      const double l2 = ell * ell;
      const Tensor& om = gl.fmap.spectral.omega;
      kl += 0.5 * l2 * model.keep_prob_omega * squared_norm(om);
      const double nn = double(gl.fmap.num_features()) * double(gl.fmap.input_dim());
      kl += nn * std::log(1.0 / l2);
      for (std::size_t i = 0; i < om.size(); ++i)
        grads_out[idx][i] = l2 * model.keep_prob_omega * om[i];
      ++idx;
      if (model.learn_theta) {
        // d/du [ e^u (pi/2)||M||^2 - nn u ] with u = log l^2
        grads_out[idx][1] =
            l2 * 0.5 * model.keep_prob_omega * squared_norm(om) - nn;
        ++idx;
      }
    } else if (model.learn_theta) {
      ++idx;  // theta_log carries no KL term when Omega is fixed from the prior
    }
  }
  return kl;
}

}  // namespace detail

struct TraceRow {
  std::size_t epoch = 0;
  double neg_elbo = 0.0;  // per-datum scale
  double train_err = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  std::vector<TraceRow> trace;
};

// Stochastic variational training: Adam ascent on the ELBO estimate
// expected_ll_estimate - kl_penalty, masks resampled every step, gradient
// clipped at global norm 100. Trace rows report the negative ELBO per datum
// averaged over each epoch.
inline TrainResult train(CnnGpModel& model, const Tensor& images,
                         const Tensor& labels_onehot, const TrainConfig& config) {
  config.validate();
  require_rank(images, 4, "train images");
  require_rank(labels_onehot, 2, "train labels");
  const std::size_t n = images.dim(0);
  require(n >= 1, "train: empty dataset");
  require(labels_onehot.dim(0) == n,
          "train: image count " + std::to_string(n) + " != label count " +
              std::to_string(labels_onehot.dim(0)));
  require(config.learn_omega == model.learn_omega &&
              config.learn_theta == model.learn_theta,
          "train: config learn flags do not match the model");

  const std::size_t m = std::min(config.batch_size, n);
  const std::size_t ch = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t q = labels_onehot.dim(1);

  Rng root(config.seed);
  Rng mask_rng = root.split(1);
  Rng shuffle_rng = root.split(2);

  auto params = model.parameters();
  AdamState adam;
  adam.init(params);

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto perm = shuffle_rng.permutation(n);
    double neg_elbo_sum = 0.0;
    std::size_t steps = 0, err_count = 0;

    for (std::size_t start = 0; start < n; start += m) {
      const std::size_t len = std::min(m, n - start);
      Tensor bx({len, ch, h, w});
      Tensor by({len, q});
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t src = perm[start + i];
        for (std::size_t j = 0; j < ch * h * w; ++j)
          bx[i * ch * h * w + j] = images[src * ch * h * w + j];
        for (std::size_t j = 0; j < q; ++j) by(i, j) = labels_onehot(src, j);
      }

      auto diagnose = [&](const std::string& what) {
        std::string diag = "train: " + what + " at step " +
                           std::to_string(adam.step + 1) + "; parameter norms:";
        for (const auto& p : params)
          diag += " " + p.name + "=" + std::to_string(std::sqrt(squared_norm(*p.value)));
        return numeric_error(diag);
      };
      EllEstimate ell;
      try {
        ell = expected_ll_estimate(model, bx, by, n, config.n_mc, mask_rng);
      } catch (const numeric_error& e) {
        throw diagnose(e.what());
      }
      std::vector<Tensor> kl_grads;
      const double kl = detail::kl_with_grads(model, kl_grads);
      const double neg_elbo = -(ell.value - kl);
      if (!std::isfinite(neg_elbo)) throw diagnose("non-finite objective");
      neg_elbo_sum += neg_elbo / double(n);
      ++steps;

      // training-error bookkeeping from the first MC draw
      for (std::size_t i = 0; i < len; ++i) {
        std::size_t am = 0, lm = 0;
        for (std::size_t j = 1; j < q; ++j) {
          if (ell.first_logits(i, j) > ell.first_logits(i, am)) am = j;
          if (by(i, j) > by(i, lm)) lm = j;
        }
        err_count += (am != lm);
      }

      // gradient of the minimized objective: KL grad minus ELL grad
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor g = kl_grads[p];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= ell.grads.by_param[p][i];
        grads.push_back(std::move(g));
      }
      double gnorm2 = 0.0;
      for (const auto& g : grads) gnorm2 += squared_norm(g);
      const double gnorm = std::sqrt(gnorm2);
      if (gnorm > 100.0) {
        const double scale = 100.0 / gnorm;
        for (auto& g : grads)
          for (auto& v : g.values()) v *= scale;
      }
      adam.update(params, grads, config.learning_rate);
      if (model.learn_theta) model.sync_theta();
    }

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.trace.push_back(TraceRow{epoch, neg_elbo_sum / double(steps),
                                    double(err_count) / double(n), secs});
  }
  return result;
}

}  // namespace calgp
