#pragma once

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "calgp/layers.hpp"
#include "calgp/tensor.hpp"

namespace calgp {

// Predicted class probabilities g(x_*) with one-hot labels for a test set.
struct EvalReport {
  Tensor probs;   // [N_test, Q], rows on the simplex
  Tensor labels;  // [N_test, Q], one-hot

  void validate() const {
    require_rank(probs, 2, "eval report probs");
    require(probs.shape() == labels.shape(),
            "eval report: probs shape " + shape_to_string(probs.shape()) +
                " != labels shape " + shape_to_string(labels.shape()));
    for (std::size_t i = 0; i < probs.dim(0); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < probs.dim(1); ++j) {
        require(probs(i, j) >= 0.0,
                "eval report: negative probability in row " + std::to_string(i));
        s += probs(i, j);
      }
      require(std::abs(s - 1.0) <= 1e-9,
              "eval report: row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
    require_one_hot(labels, "eval report labels");
  }
};

inline std::size_t argmax_row(const Tensor& t, std::size_t i) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < t.dim(1); ++j)
    if (t(i, j) > t(i, best)) best = j;
  return best;
}

// Reliability bins over the prediction score max_k g_k(x_*): bin m covers
// ((m-1)/M, m/M] with confidence at the midpoint (m-0.5)/M. Empty bins have
// undefined accuracy (NaN) and zero ECE weight.
struct ReliabilityBins {
  std::size_t m_bins = 0;
  std::vector<std::size_t> count;
  std::vector<double> confidence;  // midpoints
  std::vector<double> accuracy;    // NaN for empty bins
  std::vector<double> mean_score;  // per-bin mean prediction score
};

inline ReliabilityBins bin_predictions(const EvalReport& report, std::size_t m_bins) {
  require(m_bins >= 1, "bin_predictions: need at least one bin");
  report.validate();
  ReliabilityBins bins;
  bins.m_bins = m_bins;
  bins.count.assign(m_bins, 0);
  bins.confidence.resize(m_bins);
  bins.accuracy.assign(m_bins, std::numeric_limits<double>::quiet_NaN());
  bins.mean_score.assign(m_bins, 0.0);
  for (std::size_t m = 0; m < m_bins; ++m)
    bins.confidence[m] = (double(m) + 0.5) / double(m_bins);

  std::vector<std::size_t> hits(m_bins, 0);
  const std::size_t n = report.probs.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pred = argmax_row(report.probs, i);
    const double score = report.probs(i, pred);
    // right-closed intervals: score in ((m-1)/M, m/M] lands in bin m
    long m = static_cast<long>(std::ceil(score * double(m_bins)));
    if (m < 1) m = 1;
    if (m > long(m_bins)) m = long(m_bins);
    const std::size_t idx = std::size_t(m - 1);
    ++bins.count[idx];
    bins.mean_score[idx] += score;
    hits[idx] += (pred == argmax_row(report.labels, i));
  }
  for (std::size_t m = 0; m < m_bins; ++m) {
    if (bins.count[m] > 0) {
      bins.accuracy[m] = double(hits[m]) / double(bins.count[m]);
      bins.mean_score[m] /= double(bins.count[m]);
    }
  }
  return bins;
}

enum class EceConfidence {
  midpoint,  // bin midpoint (m-0.5)/M, the convention used everywhere here
  bin_mean   // alternative: mean prediction score per bin
};

inline double ece(const EvalReport& report, std::size_t m_bins = 10,
                  EceConfidence convention = EceConfidence::midpoint) {
  ReliabilityBins bins = bin_predictions(report, m_bins);
  const double n = double(report.probs.dim(0));
  double e = 0.0;
  for (std::size_t m = 0; m < m_bins; ++m) {
    if (bins.count[m] == 0) continue;
    const double conf = convention == EceConfidence::midpoint ? bins.confidence[m]
                                                              : bins.mean_score[m];
    e += (double(bins.count[m]) / n) * std::abs(bins.accuracy[m] - conf);
  }
  return e;
}

// Squared distance between labels and outputs averaged across classes and
// test points.
inline double brier(const EvalReport& report) {
  report.validate();
  const std::size_t n = report.probs.dim(0), q = report.probs.dim(1);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
      const double d = report.labels(i, j) - report.probs(i, j);
      row += d * d;
    }
    s += row / double(q);
  }
  return s / double(n);
}

// Classification error rate and mean negative log-likelihood of the true
// class, with probabilities floored at 1e-12 before the log.
inline std::pair<double, double> err_and_mnll(const EvalReport& report) {
  report.validate();
  const std::size_t n = report.probs.dim(0);
  std::size_t wrong = 0;
  double nll = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pred = argmax_row(report.probs, i);
    const std::size_t truth = argmax_row(report.labels, i);
    wrong += (pred != truth);
    nll -= std::log(std::max(report.probs(i, truth), 1e-12));
  }
  return {double(wrong) / double(n), nll / double(n)};
}

// Per-row predictive entropy -sum_k g_k log g_k (natural log, 0 log 0 = 0).
inline std::vector<double> predictive_entropy(const EvalReport& report) {
  report.validate();
  const std::size_t n = report.probs.dim(0), q = report.probs.dim(1);
  std::vector<double> h(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      const double p = report.probs(i, j);
      if (p > 0.0) h[i] -= p * std::log(p);
    }
  return h;
}

// Normalized histogram (a density: sum height * width = 1) over [0, upper].
struct EntropyHistogram {
  double upper = 0.0;
  std::vector<std::size_t> count;
  std::vector<double> density;

  double bin_width() const { return upper / double(count.size()); }
};

inline EntropyHistogram entropy_histogram(const std::vector<double>& entropies,
                                          std::size_t bins, double upper) {
  require(bins >= 1, "entropy_histogram: need at least one bin");
  require(upper > 0.0, "entropy_histogram: upper bound must be positive");
  require(!entropies.empty(), "entropy_histogram: empty input");
  EntropyHistogram h;
  h.upper = upper;
  h.count.assign(bins, 0);
  const double width = upper / double(bins);
  for (double e : entropies) {
    long idx = static_cast<long>(std::floor(e / width));
    if (idx < 0) idx = 0;
    if (idx >= long(bins)) idx = long(bins) - 1;
    ++h.count[std::size_t(idx)];
  }
  h.density.resize(bins);
  const double n = double(entropies.size());
  for (std::size_t b = 0; b < bins; ++b) h.density[b] = double(h.count[b]) / (n * width);
  return h;
}

}  // namespace calgp
