#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "calgp/calibration.hpp"
#include "calgp/errors.hpp"
#include "calgp/inference.hpp"

namespace calgp {

// 17 significant digits: enough to round-trip any double exactly.
inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path);
  out << text;
  if (!out) throw io_error("write failed for " + path);
}

inline std::string metrics_csv(double err, double mnll, double ece_v, double brier_v) {
  return "err,mnll,ece,brier\n" + fmt_real(err) + "," + fmt_real(mnll) + "," +
         fmt_real(ece_v) + "," + fmt_real(brier_v) + "\n";
}

inline std::string reliability_csv(const ReliabilityBins& bins) {
  std::string s = "bin_lo,bin_hi,confidence,accuracy,count\n";
  for (std::size_t m = 0; m < bins.m_bins; ++m) {
    s += fmt_real(double(m) / double(bins.m_bins)) + ",";
    s += fmt_real(double(m + 1) / double(bins.m_bins)) + ",";
    s += fmt_real(bins.confidence[m]) + ",";
    s += fmt_real(bins.accuracy[m]) + ",";
    s += std::to_string(bins.count[m]) + "\n";
  }
  return s;
}

inline std::string entropy_csv(const std::vector<double>& entropies) {
  std::string s = "entropy\n";
  for (double e : entropies) s += fmt_real(e) + "\n";
  return s;
}

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string s = "epoch,neg_elbo,train_err,wall_seconds\n";
  for (const auto& row : trace) {
    s += std::to_string(row.epoch) + "," + fmt_real(row.neg_elbo) + "," +
         fmt_real(row.train_err) + "," + fmt_real(row.wall_seconds) + "\n";
  }
  return s;
}

inline std::string probs_csv(const EvalReport& report) {
  const std::size_t q = report.probs.dim(1);
  std::string s;
  for (std::size_t j = 0; j < q; ++j) s += "p" + std::to_string(j) + ",";
  s += "label\n";
  for (std::size_t i = 0; i < report.probs.dim(0); ++i) {
    for (std::size_t j = 0; j < q; ++j) s += fmt_real(report.probs(i, j)) + ",";
    s += std::to_string(argmax_row(report.labels, i)) + "\n";
  }
  return s;
}

}  // namespace calgp
