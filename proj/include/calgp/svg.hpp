#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "calgp/calibration.hpp"

namespace calgp {

namespace detail {
inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}
}  // namespace detail

// Reliability diagram: accuracy bars per confidence bin plus the identity
// diagonal. Self-contained SVG, empty bins omitted.
inline std::string reliability_diagram_svg(const ReliabilityBins& bins,
                                           const std::string& title = "") {
  using detail::svg_num;
  const double w = 420, h = 420, m = 50;
  const double pw = w - 2 * m, ph = h - 2 * m;
  auto x_of = [&](double v) { return m + v * pw; };
  auto y_of = [&](double v) { return h - m - v * ph; };
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg_num(w) +
       "\" height=\"" + svg_num(h) + "\" viewBox=\"0 0 " + svg_num(w) + " " +
       svg_num(h) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty())
    s += "<text x=\"" + svg_num(w / 2) + "\" y=\"20\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"14\">" + title + "</text>\n";
  for (std::size_t b = 0; b < bins.m_bins; ++b) {
    if (bins.count[b] == 0) continue;
    const double x0 = x_of(double(b) / double(bins.m_bins));
    const double x1 = x_of(double(b + 1) / double(bins.m_bins));
    const double y1 = y_of(0.0), y0 = y_of(bins.accuracy[b]);
    s += "<rect x=\"" + svg_num(x0 + 1) + "\" y=\"" + svg_num(y0) + "\" width=\"" +
         svg_num(x1 - x0 - 2) + "\" height=\"" + svg_num(y1 - y0) +
         "\" fill=\"#c44\" stroke=\"#822\"/>\n";
  }
  s += "<line x1=\"" + svg_num(x_of(0)) + "\" y1=\"" + svg_num(y_of(0)) +
       "\" x2=\"" + svg_num(x_of(1)) + "\" y2=\"" + svg_num(y_of(1)) +
       "\" stroke=\"black\" stroke-dasharray=\"5,4\"/>\n";
  s += "<rect x=\"" + svg_num(m) + "\" y=\"" + svg_num(m) + "\" width=\"" +
       svg_num(pw) + "\" height=\"" + svg_num(ph) +
       "\" fill=\"none\" stroke=\"black\"/>\n";
  s += "<text x=\"" + svg_num(w / 2) + "\" y=\"" + svg_num(h - 12) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
       "confidence</text>\n";
  s += "<text x=\"15\" y=\"" + svg_num(h / 2) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
       "transform=\"rotate(-90 15 " + svg_num(h / 2) + ")\">accuracy</text>\n";
  s += "</svg>\n";
  return s;
}

// Two overlaid entropy densities (step outlines), e.g. in-distribution vs OOD.
inline std::string entropy_density_svg(const EntropyHistogram& in_dist,
                                       const EntropyHistogram& ood,
                                       const std::string& label_in = "in-distribution",
                                       const std::string& label_ood = "ood") {
  using detail::svg_num;
  const double w = 480, h = 360, m = 50;
  const double pw = w - 2 * m, ph = h - 2 * m;
  double dmax = 0.0;
  for (double d : in_dist.density) dmax = std::max(dmax, d);
  for (double d : ood.density) dmax = std::max(dmax, d);
  if (dmax <= 0.0) dmax = 1.0;
  auto path_of = [&](const EntropyHistogram& hist) {
    std::string p;
    const std::size_t n = hist.density.size();
    for (std::size_t b = 0; b < n; ++b) {
      const double x0 = m + pw * double(b) / double(n);
      const double x1 = m + pw * double(b + 1) / double(n);
      const double y = h - m - ph * (hist.density[b] / dmax);
      p += (b == 0 ? "M" : "L") + svg_num(x0) + " " + svg_num(y) + " ";
      p += "L" + svg_num(x1) + " " + svg_num(y) + " ";
    }
    p += "L" + svg_num(m + pw) + " " + svg_num(h - m);
    return p;
  };
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg_num(w) +
       "\" height=\"" + svg_num(h) + "\" viewBox=\"0 0 " + svg_num(w) + " " +
       svg_num(h) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<path d=\"" + path_of(in_dist) + "\" fill=\"none\" stroke=\"#36c\" stroke-width=\"2\"/>\n";
  s += "<path d=\"" + path_of(ood) + "\" fill=\"none\" stroke=\"#c44\" stroke-width=\"2\"/>\n";
  s += "<rect x=\"" + svg_num(m) + "\" y=\"" + svg_num(m) + "\" width=\"" + svg_num(pw) +
       "\" height=\"" + svg_num(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  s += "<text x=\"" + svg_num(w / 2) + "\" y=\"" + svg_num(h - 12) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
       "predictive entropy</text>\n";
  s += "<text x=\"" + svg_num(m + 10) + "\" y=\"" + svg_num(m + 18) +
       "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#36c\">" + label_in +
       "</text>\n";
  s += "<text x=\"" + svg_num(m + 10) + "\" y=\"" + svg_num(m + 36) +
       "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#c44\">" + label_ood +
       "</text>\n";
  s += "</svg>\n";
  return s;
}

}  // namespace calgp
