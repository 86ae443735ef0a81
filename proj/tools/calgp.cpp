// calgp: train and evaluate calibrated CNN+GP random-feature classifiers.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include "calgp/calibration.hpp"
#include "calgp/checkpoint.hpp"
#include "calgp/config.hpp"
#include "calgp/csv.hpp"
#include "calgp/data.hpp"
#include "calgp/inference.hpp"
#include "calgp/kernels.hpp"
#include "calgp/model.hpp"
#include "calgp/svg.hpp"

namespace fs = std::filesystem;
using namespace calgp;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string checkpoint_path;
  std::string out_override;
  long long seed_override = -1;
  int threads = 1;
};

ExperimentConfig effective_config(const std::string& text, const CommonArgs& args) {
  ExperimentConfig cfg = parse_config(text);
  if (args.seed_override >= 0) cfg.seed = std::uint64_t(args.seed_override);
  if (!args.out_override.empty()) cfg.out = args.out_override;
  cfg.validate();
  return cfg;
}

CnnGpModel rebuild_from_checkpoint(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                                   const Dataset& test) {
  Rng dummy(0);
  CnnGpModel model = build_model(cfg.model_spec(),
                                 {test.images.dim(1), test.images.dim(2),
                                  test.images.dim(3)},
                                 test.num_classes(), dummy);
  load_model_state(model, ckpt.entries);
  return model;
}

EvalReport evaluate_model(CnnGpModel& model, const Dataset& test, std::size_t s,
                          Rng& rng) {
  EvalReport report;
  report.probs = model.predictive_distribution(test.images, s, rng);
  report.labels = test.labels_onehot;
  return report;
}

int cmd_train(const CommonArgs& args) {
  std::ifstream in(args.config_path, std::ios::binary);
  if (!in) throw io_error("config: cannot open " + args.config_path);
  std::ostringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg = effective_config(ss.str(), args);

  LoadedData data = load_experiment_data(cfg);
  data.train.validate();
  if (cfg.dataset_kind == "idx" && cfg.classes == 0)
    cfg.classes = data.train.num_classes();  // materialize into the echo

  Rng build_rng = Rng(cfg.seed).split(0xB0);
  CnnGpModel model = build_model(cfg.model_spec(),
                                 {data.train.images.dim(1), data.train.images.dim(2),
                                  data.train.images.dim(3)},
                                 data.train.num_classes(), build_rng);

  TrainResult result = train(model, data.train.images, data.train.labels_onehot,
                             cfg.train_config());

  fs::create_directories(cfg.out);
  write_text_file((fs::path(cfg.out) / "config_resolved.cfg").string(),
                  cfg.resolved_text());
  write_text_file((fs::path(cfg.out) / "trace.csv").string(), trace_csv(result.trace));
  Checkpoint ckpt{cfg.resolved_text(), model_state(model)};
  save_checkpoint((fs::path(cfg.out) / "checkpoint.bin").string(), ckpt);

  const auto& last = result.trace.back();
  std::printf("train: n=%zu epochs=%zu final neg_elbo=%.6f train_err=%.4f (%.1fs)\n",
              data.train.size(), cfg.epochs, last.neg_elbo, last.train_err,
              last.wall_seconds);
  std::printf("train: wrote %s/{checkpoint.bin,trace.csv,config_resolved.cfg}\n",
              cfg.out.c_str());
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
  std::string config_text = ckpt.config_text;
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path, std::ios::binary);
    if (!in) throw io_error("config: cannot open " + args.config_path);
    std::ostringstream ss;
    ss << in.rdbuf();
    config_text = ss.str();
  }
  ExperimentConfig cfg = effective_config(config_text, args);
  LoadedData data = load_experiment_data(cfg, false);
  data.test.validate();
  CnnGpModel model = rebuild_from_checkpoint(ckpt, cfg, data.test);

  Rng rng = Rng(cfg.seed).split(0xEE);
  EvalReport report = evaluate_model(model, data.test, cfg.mc_samples, rng);
  report.validate();

  const auto [err, mnll] = err_and_mnll(report);
  const double e = ece(report, cfg.bins);
  const double b = brier(report);
  ReliabilityBins bins = bin_predictions(report, cfg.bins);

  fs::create_directories(cfg.out);
  write_text_file((fs::path(cfg.out) / "metrics.csv").string(),
                  metrics_csv(err, mnll, e, b));
  write_text_file((fs::path(cfg.out) / "reliability.csv").string(),
                  reliability_csv(bins));
  write_text_file((fs::path(cfg.out) / "probs.csv").string(), probs_csv(report));
  write_text_file((fs::path(cfg.out) / "reliability.svg").string(),
                  reliability_diagram_svg(bins));
  std::printf("eval: n=%zu S=%zu err=%.5f mnll=%.5f ece=%.5f brier=%.5f\n",
              data.test.size(), cfg.mc_samples, err, mnll, e, b);
  std::printf("eval: wrote %s/{metrics.csv,reliability.csv,probs.csv,reliability.svg}\n",
              cfg.out.c_str());
  return 0;
}

int cmd_ood(const CommonArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
  std::string config_text = ckpt.config_text;
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path, std::ios::binary);
    if (!in) throw io_error("config: cannot open " + args.config_path);
    std::ostringstream ss;
    ss << in.rdbuf();
    config_text = ss.str();
  }
  ExperimentConfig cfg = effective_config(config_text, args);
  LoadedData data = load_experiment_data(cfg, false);
  data.test.validate();
  CnnGpModel model = rebuild_from_checkpoint(ckpt, cfg, data.test);

  bool substitute = false;
  Dataset ood;
  if (!cfg.ood_images.empty() && !cfg.ood_labels.empty()) {
    ood = load_idx_pair(resolve_data_path(cfg.ood_images),
                        resolve_data_path(cfg.ood_labels), data.test.num_classes());
  } else {
    substitute = true;
    Rng prng = Rng(cfg.seed).split(0xAB);
    ood = pixel_permuted(data.test, prng);
  }

  // same predictive seed for both sets: evaluating the same dataset twice
  // yields bit-identical entropies
  Rng rng_in = Rng(cfg.seed).split(0xEE);
  Rng rng_ood = Rng(cfg.seed).split(0xEE);
  EvalReport rep_in = evaluate_model(model, data.test, cfg.mc_samples, rng_in);
  EvalReport rep_ood = evaluate_model(model, ood, cfg.mc_samples, rng_ood);
  std::vector<double> h_in = predictive_entropy(rep_in);
  std::vector<double> h_ood = predictive_entropy(rep_ood);

  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  const double max_h = std::log(double(data.test.num_classes()));
  EntropyHistogram hist_in = entropy_histogram(h_in, 30, max_h);
  EntropyHistogram hist_ood = entropy_histogram(h_ood, 30, max_h);

  fs::create_directories(cfg.out);
  write_text_file((fs::path(cfg.out) / "entropy_in.csv").string(), entropy_csv(h_in));
  write_text_file((fs::path(cfg.out) / "entropy_ood.csv").string(), entropy_csv(h_ood));
  write_text_file((fs::path(cfg.out) / "entropy_density.svg").string(),
                  entropy_density_svg(hist_in, hist_ood));
  std::string summary = "mean_entropy_in,mean_entropy_ood,median_entropy_in,"
                        "median_entropy_ood,ood_is_substitute\n";
  summary += fmt_real(mean(h_in)) + "," + fmt_real(mean(h_ood)) + "," +
             fmt_real(median(h_in)) + "," + fmt_real(median(h_ood)) + "," +
             (substitute ? "1" : "0") + "\n";
  write_text_file((fs::path(cfg.out) / "ood_summary.csv").string(), summary);
  std::printf("ood: mean entropy in-dist=%.5f ood=%.5f (substitute=%d)\n",
              mean(h_in), mean(h_ood), int(substitute));
  std::printf("ood: wrote %s/{entropy_in.csv,entropy_ood.csv,entropy_density.svg,"
              "ood_summary.csv}\n", cfg.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// selftest: quick independent-oracle checks, one line per suite.
// ---------------------------------------------------------------------------

bool selftest_conv() {
  Rng rng(1);
  Tensor in = rng.normal_tensor({2, 3, 8, 8});
  Tensor w = rng.normal_tensor({4, 3, 3, 3});
  Tensor b = rng.normal_tensor({4});
  auto [out, cache] = conv2d_forward(in, w, b);
  for (std::size_t bb = 0; bb < 2; ++bb)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
          double s = b[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t ki = 0; ki < 3; ++ki)
              for (std::size_t kj = 0; kj < 3; ++kj)
                s += in(bb, c, i + ki, j + kj) * w(o, c, ki, kj);
          if (std::abs(out(bb, o, i, j) - s) > 1e-12) return false;
        }
  return true;
}

bool selftest_fwht() {
  Rng rng(2);
  Tensor v = rng.normal_tensor({16});
  Tensor hh = fwht(fwht(v));
  for (std::size_t i = 0; i < 16; ++i)
    if (std::abs(hh[i] - 16.0 * v[i]) > 1e-10) return false;
  return true;
}

bool selftest_sorf() {
  Rng rng(3);
  SpectralMatrix s = sorf_spectral(16, 16, 1.0, rng);
  Tensor omega = sorf_dense(s);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 16; ++k) acc += omega(k, i) * omega(k, j);
      if (std::abs(acc - (i == j ? 16.0 : 0.0)) > 1e-10) return false;
    }
  return true;
}

bool selftest_kernels() {
  Rng rng(4);
  KernelParams p = KernelParams::isotropic(1.0, 1.0, 6);
  std::vector<double> a(6), b(6);
  for (int k = 0; k < 6; ++k) {
    a[k] = rng.normal();
    b[k] = rng.normal();
  }
  const double exact_arc = arc_cosine_k1(a, b, p);
  const double exact_rbf = rbf(a, b, p);
  double mc_arc = 0.0, mc_rbf = 0.0;
  const int n = 400000;
  for (int t = 0; t < n; ++t) {
    double sa = 0, sb = 0, sd = 0;
    for (int k = 0; k < 6; ++k) {
      const double w = rng.normal();
      sa += w * a[k];
      sb += w * b[k];
      sd += std::numbers::sqrt2 * w * (a[k] - b[k]);
    }
    if (sa > 0 && sb > 0) mc_arc += 2.0 * sa * sb / n;
    mc_rbf += std::cos(sd) / n;
  }
  return std::abs(mc_arc - exact_arc) / std::abs(exact_arc) < 0.03 &&
         std::abs(mc_rbf - exact_rbf) / std::abs(exact_rbf) < 0.03;
}

bool selftest_metrics() {
  Rng rng(5);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng.below(30), q = 2 + rng.below(5);
    const std::size_t m = 1 + rng.below(12);
    EvalReport r;
    r.probs = Tensor({n, q});
    r.labels = Tensor({n, q});
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < q; ++j) {
        r.probs(i, j) = std::exp(rng.normal());
        s += r.probs(i, j);
      }
      for (std::size_t j = 0; j < q; ++j) r.probs(i, j) /= s;
      r.labels(i, rng.below(q)) = 1.0;
    }
    // straight-loop re-computation
    double total = 0.0;
    for (std::size_t mm = 1; mm <= m; ++mm) {
      std::size_t count = 0, hits = 0;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t pred = argmax_row(r.probs, i), truth = argmax_row(r.labels, i);
        const double score = r.probs(i, pred);
        const bool in_bin = (score > double(mm - 1) / m && score <= double(mm) / m) ||
                            (mm == 1 && score <= double(mm - 1) / m);
        if (!in_bin) continue;
        ++count;
        hits += (pred == truth);
      }
      if (count)
        total += (double(count) / n) *
                 std::abs(double(hits) / count - (double(mm) - 0.5) / m);
    }
    if (std::abs(ece(r, m) - total) > 1e-12) return false;
    double bf = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < q; ++j) {
        const double d = r.labels(i, j) - r.probs(i, j);
        bf += d * d / (double(q) * double(n));
      }
    if (std::abs(brier(r) - bf) > 1e-12) return false;
  }
  return true;
}

bool selftest_gradients() {
  ModelSpec spec;
  spec.extractor = {{ExtractorItem::Kind::conv, 2, 3},
                    {ExtractorItem::Kind::relu},
                    {ExtractorItem::Kind::pool2}};
  spec.n_rf = 8;
  spec.keep_prob_psi = 0.7;
  spec.keep_prob_w = 0.7;
  Rng rng(6);
  CnnGpModel m = build_model(spec, {1, 6, 6}, 3, rng);
  Tensor images = rng.normal_tensor({3, 1, 6, 6});
  Tensor onehot({3, 3});
  onehot(0, 0) = onehot(1, 2) = onehot(2, 1) = 1.0;
  auto loss_fn = [&] {
    Rng r(1234);
    auto [logits, caches] = m.forward(images, ForwardMode::train, r);
    return softmax_cross_entropy(logits, onehot).first;
  };
  Rng r(1234);
  auto [logits, caches] = m.forward(images, ForwardMode::train, r);
  auto [loss, grad_logits] = softmax_cross_entropy(logits, onehot);
  ModelGrads g = m.backward(grad_logits, caches);
  auto params = m.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p].value;
    const std::size_t stride = std::max<std::size_t>(1, t.size() / 6);
    for (std::size_t i = 0; i < t.size(); i += stride) {
      const double x0 = t[i];
      t[i] = x0 + 1e-5;
      const double fp = loss_fn();
      t[i] = x0 - 1e-5;
      const double fm = loss_fn();
      t[i] = x0;
      const double fd = (fp - fm) / 2e-5;
      const double an = g.by_param[p][i];
      if (std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4}) > 1e-4)
        return false;
    }
  }
  return true;
}

bool selftest_idx() {
  Rng rng(7);
  Dataset ds = synthetic_blobs(12, 3, 4, 2.0, rng);
  const auto dir = fs::temp_directory_path() / "calgp_selftest";
  fs::create_directories(dir);
  const auto pi = (dir / "st-images-idx3-ubyte").string();
  const auto pl = (dir / "st-labels-idx1-ubyte").string();
  write_idx_pair(ds, pi, pl);
  Dataset rt = load_idx_pair(pi, pl, 3);
  const auto pi2 = (dir / "st2-images-idx3-ubyte").string();
  const auto pl2 = (dir / "st2-labels-idx1-ubyte").string();
  write_idx_pair(rt, pi2, pl2);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  return slurp(pi) == slurp(pi2) && slurp(pl) == slurp(pl2);
}

int cmd_selftest() {
  struct Suite {
    const char* name;
    bool (*fn)();
  };
  const Suite suites[] = {
      {"conv2d vs six-loop reference", selftest_conv},
      {"fwht involution", selftest_fwht},
      {"sorf orthogonality", selftest_sorf},
      {"kernel closed forms vs Monte Carlo", selftest_kernels},
      {"ece/brier vs brute force", selftest_metrics},
      {"model gradients vs finite differences", selftest_gradients},
      {"idx round trip", selftest_idx},
  };
  int failures = 0;
  for (const auto& s : suites) {
    const bool pass = s.fn();
    std::printf("%s %s\n", pass ? "ok  " : "FAIL", s.name);
    failures += !pass;
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"calgp: calibrated CNN+GP random-feature classifiers"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* sub, bool needs_config, bool needs_ckpt) {
    if (needs_config)
      sub->add_option("--config", args.config_path, "experiment config file")
          ->required(needs_ckpt ? false : true);
    if (needs_ckpt)
      sub->add_option("--checkpoint", args.checkpoint_path, "model checkpoint")
          ->required();
    sub->add_option("--seed", args.seed_override, "override run.seed");
    sub->add_option("--out", args.out_override, "override run.out directory");
    sub->add_option("--threads", args.threads, "worker threads (default 1)");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a model from a config");
  add_common(train_cmd, true, false);
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, true, true);
  CLI::App* ood_cmd = app.add_subcommand("ood", "entropy analysis on an OOD set");
  add_common(ood_cmd, true, true);
  CLI::App* self_cmd = app.add_subcommand("selftest", "run built-in oracle checks");
  self_cmd->add_option("--threads", args.threads, "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  set_num_threads(args.threads);
  try {
    if (train_cmd->parsed()) return cmd_train(args);
    if (eval_cmd->parsed()) return cmd_eval(args);
    if (ood_cmd->parsed()) return cmd_ood(args);
    if (self_cmd->parsed()) return cmd_selftest();
  } catch (const config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const io_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
