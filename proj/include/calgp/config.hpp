#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "calgp/csv.hpp"
#include "calgp/data.hpp"
#include "calgp/errors.hpp"
#include "calgp/model.hpp"
#include "calgp/inference.hpp"

namespace calgp {

// Plain-text experiment configuration: `[section]` headers and `key = value`
// lines, full-line or trailing `#` comments, unknown keys rejected. The
// resolved form (all defaults materialized, fixed order) is what gets echoed
// into run outputs and checkpoints; re-ingesting it reproduces the run.
struct ExperimentConfig {
  // [dataset]
  std::string dataset_kind = "synthetic";  // synthetic | idx
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t classes = 0;      // class count; 0 = infer from idx labels
  std::size_t subsample = 0;    // balanced training subsample size, 0 = all
  std::size_t train_n = 2000;   // synthetic sizes
  std::size_t test_n = 2000;
  std::size_t dim = 8;          // synthetic feature dim
  double separation = 6.0;

  // [model]
  std::string extractor = "identity";
  std::string kernel = "arc";      // arc | rbf
  std::size_t n_rf = 1024;
  std::string spectral = "explicit";  // explicit | sorf
  std::size_t depth = 1;
  std::size_t hidden_width = 64;
  double sigma = 1.0;
  double lengthscale = 1.0;

  // [train]
  std::size_t batch_size = 1000;
  double learning_rate = 0.001;
  std::size_t epochs = 30;
  std::size_t n_mc = 1;
  double keep_prob_w = 0.5;
  double keep_prob_psi = 0.5;
  double keep_prob_omega = 0.5;
  bool learn_omega = false;
  bool learn_theta = false;

  // [eval]
  std::size_t mc_samples = 50;  // S
  std::size_t bins = 10;        // M

  // [ood]
  std::string ood_images, ood_labels;

  // [run]
  std::uint64_t seed = 1;
  std::string out = "out";

  void validate() const {
    require(dataset_kind == "synthetic" || dataset_kind == "idx",
            "config: dataset.kind must be synthetic or idx, got " + dataset_kind);
    if (dataset_kind == "idx") {
      require(!train_images.empty() && !train_labels.empty(),
              "config: dataset.train_images/train_labels required for idx datasets");
      require(!test_images.empty() && !test_labels.empty(),
              "config: dataset.test_images/test_labels required for idx datasets");
      require(classes == 0 || classes >= 2,
              "config: dataset.classes must be >= 2, or 0 to infer from the labels");
    } else {
      require(classes >= 2, "config: dataset.classes must be >= 2");
      require(dim >= 1, "config: dataset.dim must be >= 1");
      require(train_n >= classes && test_n >= classes,
              "config: dataset.train_n/test_n must cover every class");
      require(separation >= 0.0, "config: dataset.separation must be >= 0");
    }
    require(kernel == "arc" || kernel == "rbf",
            "config: model.kernel must be arc or rbf, got " + kernel);
    require(spectral == "explicit" || spectral == "sorf",
            "config: model.spectral must be explicit or sorf, got " + spectral);
    require(n_rf >= 1, "config: model.n_rf must be a positive integer");
    require(depth >= 1, "config: model.depth must be >= 1");
    require(hidden_width >= 1, "config: model.hidden_width must be >= 1");
    require(sigma > 0.0, "config: model.sigma must be positive");
    require(lengthscale > 0.0, "config: model.lengthscale must be positive");
    require(!(learn_omega && spectral == "sorf"),
            "config: train.learn_omega is incompatible with model.spectral = sorf");
    require(batch_size >= 1, "config: train.batch_size must be >= 1");
    require(learning_rate >= 0.0, "config: train.learning_rate must be >= 0");
    require(epochs >= 1, "config: train.epochs must be >= 1");
    require(n_mc >= 1, "config: train.n_mc must be >= 1");
    for (double p : {keep_prob_w, keep_prob_psi, keep_prob_omega})
      require(p > 0.0 && p <= 1.0, "config: keep probabilities must be in (0,1]");
    require(mc_samples >= 1, "config: eval.mc_samples must be >= 1");
    require(bins >= 1, "config: eval.bins must be >= 1");
    require(!out.empty(), "config: run.out must not be empty");
    parse_extractor_items(extractor);  // validates the grammar
  }

  static std::vector<ExtractorItem> parse_extractor_items(const std::string& text) {
    std::string spec = text;
    if (spec == "lenet") spec = "conv5x16,relu,pool2,conv5x32,relu,pool2";
    std::vector<ExtractorItem> items;
    if (spec == "identity" || spec.empty()) return items;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok == "relu") {
        items.push_back({ExtractorItem::Kind::relu, 0, 0});
      } else if (tok == "pool2") {
        items.push_back({ExtractorItem::Kind::pool2, 0, 0});
      } else if (tok.rfind("conv", 0) == 0) {
        const auto x = tok.find('x');
        require(x != std::string::npos && x > 4 && x + 1 < tok.size(),
                "config: bad extractor token '" + tok + "', want convKxN");
        const long k = std::strtol(tok.substr(4, x - 4).c_str(), nullptr, 10);
        const long n = std::strtol(tok.substr(x + 1).c_str(), nullptr, 10);
        require(k >= 1 && n >= 1, "config: bad extractor token '" + tok + "'");
        items.push_back({ExtractorItem::Kind::conv, std::size_t(n), std::size_t(k)});
      } else if (tok.rfind("dense", 0) == 0) {
        const long n = std::strtol(tok.substr(5).c_str(), nullptr, 10);
        require(n >= 1, "config: bad extractor token '" + tok + "'");
        items.push_back({ExtractorItem::Kind::dense, std::size_t(n), 0});
      } else {
        throw config_error("config: unknown extractor token '" + tok + "'");
      }
    }
    return items;
  }

  ModelSpec model_spec() const {
    ModelSpec spec;
    spec.extractor = parse_extractor_items(extractor);
    spec.kernel = kernel == "arc" ? KernelKind::arc : KernelKind::rbf;
    spec.n_rf = n_rf;
    spec.spectral = spectral == "explicit" ? SpectralMode::explicit_draw
                                           : SpectralMode::sorf;
    spec.depth = depth;
    spec.hidden_width = hidden_width;
    spec.sigma = sigma;
    spec.lengthscale = lengthscale;
    spec.keep_prob_psi = keep_prob_psi;
    spec.keep_prob_w = keep_prob_w;
    spec.keep_prob_omega = keep_prob_omega;
    spec.learn_omega = learn_omega;
    spec.learn_theta = learn_theta;
    return spec;
  }

  TrainConfig train_config() const {
    TrainConfig cfg;
    cfg.batch_size = batch_size;
    cfg.learning_rate = learning_rate;
    cfg.epochs = epochs;
    cfg.n_mc = n_mc;
    cfg.keep_prob_w = keep_prob_w;
    cfg.keep_prob_psi = keep_prob_psi;
    cfg.keep_prob_omega = keep_prob_omega;
    cfg.learn_omega = learn_omega;
    cfg.learn_theta = learn_theta;
    cfg.seed = seed;
    return cfg;
  }

  std::string resolved_text() const {
    std::ostringstream os;
    os << "[dataset]\n";
    os << "kind = " << dataset_kind << "\n";
    if (dataset_kind == "idx") {
      os << "train_images = " << train_images << "\n";
      os << "train_labels = " << train_labels << "\n";
      os << "test_images = " << test_images << "\n";
      os << "test_labels = " << test_labels << "\n";
      os << "classes = " << classes << "\n";
      os << "subsample = " << subsample << "\n";
    } else {
      os << "train_n = " << train_n << "\n";
      os << "test_n = " << test_n << "\n";
      os << "classes = " << classes << "\n";
      os << "dim = " << dim << "\n";
      os << "separation = " << fmt_real(separation) << "\n";
    }
    os << "\n[model]\n";
    os << "extractor = " << extractor << "\n";
    os << "kernel = " << kernel << "\n";
    os << "n_rf = " << n_rf << "\n";
    os << "spectral = " << spectral << "\n";
    os << "depth = " << depth << "\n";
    os << "hidden_width = " << hidden_width << "\n";
    os << "sigma = " << fmt_real(sigma) << "\n";
    os << "lengthscale = " << fmt_real(lengthscale) << "\n";
    os << "\n[train]\n";
    os << "batch_size = " << batch_size << "\n";
    os << "learning_rate = " << fmt_real(learning_rate) << "\n";
    os << "epochs = " << epochs << "\n";
    os << "n_mc = " << n_mc << "\n";
    os << "keep_prob_w = " << fmt_real(keep_prob_w) << "\n";
    os << "keep_prob_psi = " << fmt_real(keep_prob_psi) << "\n";
    os << "keep_prob_omega = " << fmt_real(keep_prob_omega) << "\n";
    os << "learn_omega = " << (learn_omega ? "true" : "false") << "\n";
    os << "learn_theta = " << (learn_theta ? "true" : "false") << "\n";
    os << "\n[eval]\n";
    os << "mc_samples = " << mc_samples << "\n";
    os << "bins = " << bins << "\n";
    if (!ood_images.empty() || !ood_labels.empty()) {
      os << "\n[ood]\n";
      os << "images = " << ood_images << "\n";
      os << "labels = " << ood_labels << "\n";
    }
    os << "\n[run]\n";
    os << "seed = " << seed << "\n";
    os << "out = " << out << "\n";
    return os.str();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_uint(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0' || v[0] == '-')
    throw config_error("config: " + key + " must be a nonnegative integer, got '" + v + "'");
  return std::size_t(x);
}

inline double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw config_error("config: " + key + " must be a real number, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw config_error("config: " + key + " must be true or false, got '" + v + "'");
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']', "config line " + std::to_string(lineno) +
                                      ": malformed section header '" + line + "'");
      section = line.substr(1, line.size() - 2);
      if (section != "dataset" && section != "model" && section != "train" &&
          section != "eval" && section != "ood" && section != "run")
        throw config_error("config line " + std::to_string(lineno) +
                           ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(lineno) +
                         ": expected key = value, got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    const std::string full = section + "." + key;
    if (!seen.insert(full).second)
      throw config_error("config line " + std::to_string(lineno) + ": duplicate key " + full);

    if (full == "dataset.kind") cfg.dataset_kind = val;
    else if (full == "dataset.train_images") cfg.train_images = val;
    else if (full == "dataset.train_labels") cfg.train_labels = val;
    else if (full == "dataset.test_images") cfg.test_images = val;
    else if (full == "dataset.test_labels") cfg.test_labels = val;
    else if (full == "dataset.classes") cfg.classes = detail::parse_uint(full, val);
    else if (full == "dataset.subsample") cfg.subsample = detail::parse_uint(full, val);
    else if (full == "dataset.train_n") cfg.train_n = detail::parse_uint(full, val);
    else if (full == "dataset.test_n") cfg.test_n = detail::parse_uint(full, val);
    else if (full == "dataset.dim") cfg.dim = detail::parse_uint(full, val);
    else if (full == "dataset.separation") cfg.separation = detail::parse_real(full, val);
    else if (full == "model.extractor") cfg.extractor = val;
    else if (full == "model.kernel") cfg.kernel = val;
    else if (full == "model.n_rf") cfg.n_rf = detail::parse_uint(full, val);
    else if (full == "model.spectral") cfg.spectral = val;
    else if (full == "model.depth") cfg.depth = detail::parse_uint(full, val);
    else if (full == "model.hidden_width") cfg.hidden_width = detail::parse_uint(full, val);
    else if (full == "model.sigma") cfg.sigma = detail::parse_real(full, val);
    else if (full == "model.lengthscale") cfg.lengthscale = detail::parse_real(full, val);
    else if (full == "train.batch_size") cfg.batch_size = detail::parse_uint(full, val);
    else if (full == "train.learning_rate") cfg.learning_rate = detail::parse_real(full, val);
    else if (full == "train.epochs") cfg.epochs = detail::parse_uint(full, val);
    else if (full == "train.n_mc") cfg.n_mc = detail::parse_uint(full, val);
    else if (full == "train.keep_prob_w") cfg.keep_prob_w = detail::parse_real(full, val);
    else if (full == "train.keep_prob_psi") cfg.keep_prob_psi = detail::parse_real(full, val);
    else if (full == "train.keep_prob_omega") cfg.keep_prob_omega = detail::parse_real(full, val);
    else if (full == "train.learn_omega") cfg.learn_omega = detail::parse_bool(full, val);
    else if (full == "train.learn_theta") cfg.learn_theta = detail::parse_bool(full, val);
    else if (full == "eval.mc_samples") cfg.mc_samples = detail::parse_uint(full, val);
    else if (full == "eval.bins") cfg.bins = detail::parse_uint(full, val);
    else if (full == "ood.images") cfg.ood_images = val;
    else if (full == "ood.labels") cfg.ood_labels = val;
    else if (full == "run.seed") cfg.seed = detail::parse_uint(full, val);
    else if (full == "run.out") cfg.out = val;
    else
      throw config_error("config line " + std::to_string(lineno) + ": unknown key " + full);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Dataset paths resolve against $CALGP_DATA_DIR unless absolute.
inline std::string resolve_data_path(const std::string& path) {
  namespace fs = std::filesystem;
  if (path.empty() || fs::path(path).is_absolute()) return path;
  if (const char* base = std::getenv("CALGP_DATA_DIR"))
    return (fs::path(base) / path).string();
  return path;
}

struct LoadedData {
  Dataset train;
  Dataset test;
};

// Loads the datasets a config describes; pass need_train = false for
// evaluation-only paths so the (possibly large) training split stays on disk.
// The synthetic generator always draws the training set first so the test set
// is identical either way.
inline LoadedData load_experiment_data(const ExperimentConfig& cfg,
                                       bool need_train = true) {
  LoadedData data;
  if (cfg.dataset_kind == "idx") {
    std::size_t classes = cfg.classes;
    if (need_train) {
      data.train = load_idx_pair(resolve_data_path(cfg.train_images),
                                 resolve_data_path(cfg.train_labels), classes);
      classes = data.train.num_classes();
      if (cfg.subsample > 0) {
        Rng srng = Rng(cfg.seed).split(0xDA);
        data.train = balanced_subsample(data.train, cfg.subsample, srng);
      }
    }
    data.test = load_idx_pair(resolve_data_path(cfg.test_images),
                              resolve_data_path(cfg.test_labels), classes);
  } else {
    Rng drng = Rng(cfg.seed).split(0xDB);
    Dataset train = synthetic_blobs(cfg.train_n, cfg.classes, cfg.dim,
                                    cfg.separation, drng);
    data.test = synthetic_blobs(cfg.test_n, cfg.classes, cfg.dim, cfg.separation, drng);
    if (need_train) data.train = std::move(train);
  }
  return data;
}

}  // namespace calgp
