#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "datwep/errors.hpp"

namespace datwep::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  double width = 720;
  double height = 420;
};

namespace detail {

inline std::string num(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.6g", v);
  return b;
}

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline const char* colour(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return palette[i % 10];
}

/// Round tick spacing covering [lo, hi] with about n intervals.
inline double tick_step(double lo, double hi, int n) {
  const double raw = (hi - lo) / n;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10.0 * mag;
}

}  // namespace detail

/// Standalone SVG line chart with axes, ticks and a legend.
inline std::string render(const Chart& c) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : c.series) {
    if (s.x.size() != s.y.size()) throw ShapeError("series '" + s.name + "' has mismatched x and y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;

  const double L = 70, R = 180, T = 40, B = 50;
  const double pw = c.width - L - R, ph = c.height - T - B;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return T + (y1 - y) / (y1 - y0) * ph; };
  using detail::num;

  std::string o;
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(c.width) + "\" height=\"" + num(c.height) +
       "\" viewBox=\"0 0 " + num(c.width) + " " + num(c.height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + num(L + pw / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
       detail::escape(c.title) + "</text>\n";
  o += "<rect x=\"" + num(L) + "\" y=\"" + num(T) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
       "\" fill=\"none\" stroke=\"black\"/>\n";

  const double xs = detail::tick_step(x0, x1, 8), ys = detail::tick_step(y0, y1, 6);
  for (double t = std::ceil(x0 / xs) * xs; t <= x1 + 1e-9 * xs; t += xs) {
    o += "<line x1=\"" + num(px(t)) + "\" y1=\"" + num(T + ph) + "\" x2=\"" + num(px(t)) + "\" y2=\"" +
         num(T + ph + 5) + "\" stroke=\"black\"/>\n";
    o += "<text x=\"" + num(px(t)) + "\" y=\"" + num(T + ph + 18) + "\" text-anchor=\"middle\">" +
         num(std::abs(t) < 1e-12 ? 0.0 : t) + "</text>\n";
  }
  for (double t = std::ceil(y0 / ys) * ys; t <= y1 + 1e-9 * ys; t += ys) {
    o += "<line x1=\"" + num(L) + "\" y1=\"" + num(py(t)) + "\" x2=\"" + num(L + pw) + "\" y2=\"" + num(py(t)) +
         "\" stroke=\"#dddddd\"/>\n";
    o += "<text x=\"" + num(L - 6) + "\" y=\"" + num(py(t) + 4) + "\" text-anchor=\"end\">" +
         num(std::abs(t) < 1e-12 ? 0.0 : t) + "</text>\n";
  }
  o += "<text x=\"" + num(L + pw / 2) + "\" y=\"" + num(c.height - 10) + "\" text-anchor=\"middle\">" +
       detail::escape(c.x_label) + "</text>\n";
  o += "<text transform=\"translate(16," + num(T + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
       detail::escape(c.y_label) + "</text>\n";

  for (std::size_t i = 0; i < c.series.size(); ++i) {
    const auto& s = c.series[i];
    std::string pts;
    for (std::size_t j = 0; j < s.x.size(); ++j) {
      if (!std::isfinite(s.x[j]) || !std::isfinite(s.y[j])) continue;
      if (!pts.empty()) pts += ' ';
      pts += num(px(s.x[j])) + "," + num(py(s.y[j]));
    }
    o += "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" + std::string(detail::colour(i)) + "\" points=\"" +
         pts + "\"/>\n";
    const double ly = T + 10 + 18 * static_cast<double>(i);
    o += "<line x1=\"" + num(L + pw + 12) + "\" y1=\"" + num(ly) + "\" x2=\"" + num(L + pw + 32) + "\" y2=\"" +
         num(ly) + "\" stroke-width=\"2\" stroke=\"" + detail::colour(i) + "\"/>\n";
    o += "<text x=\"" + num(L + pw + 38) + "\" y=\"" + num(ly + 4) + "\">" + detail::escape(s.name) + "</text>\n";
  }
  o += "</svg>\n";
  return o;
}

inline void write(const Chart& c, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path);
  os << render(c);
}

}  // namespace datwep::svg
