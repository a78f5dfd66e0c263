#pragma once

// Static SVG rendering of MI traces and center trajectories. Output bytes
// depend only on the inputs (fixed-precision coordinates, stable ordering).

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mimax/errors.hpp"
#include "mimax/metrics.hpp"
#include "mimax/tensor.hpp"

namespace mimax {

struct NamedTrace {
  std::string name;
  std::vector<MITraceRow> rows;
};

namespace svg {

inline std::string fixed(double v, int precision = 2) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed,
                               precision);
  std::string s(buf, r.ptr);
  return s == "-0.00" ? "0.00" : s;
}

inline std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline constexpr std::array<std::string_view, 8> kPalette = {
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

struct Panel {
  double x0, y0, w, h;
  double xmin, xmax, ymin, ymax;

  double px(double x) const { return x0 + (x - xmin) / (xmax - xmin) * w; }
  double py(double y) const { return y0 + h - (y - ymin) / (ymax - ymin) * h; }
};

inline void frame(std::string& out, const Panel& p, std::string_view title) {
  out += "<rect x=\"" + fixed(p.x0) + "\" y=\"" + fixed(p.y0) + "\" width=\"" +
         fixed(p.w) + "\" height=\"" + fixed(p.h) +
         "\" fill=\"none\" stroke=\"#444\"/>\n";
  out += "<text x=\"" + fixed(p.x0 + p.w / 2) + "\" y=\"" + fixed(p.y0 - 8) +
         "\" text-anchor=\"middle\" font-size=\"13\">" + escape(title) + "</text>\n";
  out += "<text x=\"" + fixed(p.x0 - 4) + "\" y=\"" + fixed(p.y0 + 10) +
         "\" text-anchor=\"end\" font-size=\"10\">" + fixed(p.ymax) + "</text>\n";
  out += "<text x=\"" + fixed(p.x0 - 4) + "\" y=\"" + fixed(p.y0 + p.h) +
         "\" text-anchor=\"end\" font-size=\"10\">" + fixed(p.ymin) + "</text>\n";
}

}  // namespace svg

/// One panel per estimator; each panel holds one polyline per trace.
inline std::string render_mi_svg(const std::vector<NamedTrace>& traces) {
  if (traces.empty()) throw ConfigError("plot needs at least one trace");
  struct Estimator {
    std::string_view key, title;
    std::optional<double> MITraceRow::*field;
  };
  const std::array<Estimator, 3> estimators{{
      {"cos_dv", "cos-DV (nats)", &MITraceRow::mi_cos_dv},
      {"infonce", "InfoNCE (nats)", &MITraceRow::mi_infonce},
      {"jsd", "JSD", &MITraceRow::mi_jsd},
  }};
  const double pw = 300, ph = 220, margin = 60, gap = 50;
  const double width = margin + 3 * pw + 2 * gap + 20;
  const double height = 60 + ph + 50 + 18.0 * static_cast<double>(traces.size());

  double emax = 1.0;
  for (const auto& t : traces)
    for (const auto& r : t.rows) emax = std::max(emax, static_cast<double>(r.epoch));

  std::string out =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg::fixed(width, 0) +
      "\" height=\"" + svg::fixed(height, 0) + "\" viewBox=\"0 0 " +
      svg::fixed(width, 0) + ' ' + svg::fixed(height, 0) + "\">\n" +
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t e = 0; e < estimators.size(); ++e) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& t : traces)
      for (const auto& r : t.rows)
        if (const auto& v = r.*estimators[e].field; v && std::isfinite(*v)) {
          lo = std::min(lo, *v);
          hi = std::max(hi, *v);
        }
    if (!(lo <= hi)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-9) lo -= 0.5, hi += 0.5;
    const double padv = 0.05 * (hi - lo);
    const svg::Panel panel{margin + static_cast<double>(e) * (pw + gap), 40, pw, ph,
                           0.0, emax, lo - padv, hi + padv};
    svg::frame(out, panel, estimators[e].title);
    for (std::size_t ti = 0; ti < traces.size(); ++ti) {
      std::string pts;
      for (const auto& r : traces[ti].rows) {
        const auto& v = r.*estimators[e].field;
        if (!v || !std::isfinite(*v)) continue;
        if (!pts.empty()) pts += ' ';
        pts += svg::fixed(panel.px(static_cast<double>(r.epoch))) + ',' +
               svg::fixed(panel.py(*v));
      }
      out += "<polyline class=\"mi\" data-estimator=\"" +
             std::string(estimators[e].key) + "\" data-trace=\"" +
             svg::escape(traces[ti].name) + "\" fill=\"none\" stroke=\"" +
             std::string(svg::kPalette[ti % svg::kPalette.size()]) +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    }
  }
  for (std::size_t ti = 0; ti < traces.size(); ++ti) {
    const double y = 40 + ph + 40 + 18.0 * static_cast<double>(ti);
    out += "<line x1=\"" + svg::fixed(margin) + "\" y1=\"" + svg::fixed(y - 4) +
           "\" x2=\"" + svg::fixed(margin + 24) + "\" y2=\"" + svg::fixed(y - 4) +
           "\" stroke=\"" + std::string(svg::kPalette[ti % svg::kPalette.size()]) +
           "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + svg::fixed(margin + 30) + "\" y=\"" + svg::fixed(y) +
           "\" font-size=\"12\">" + svg::escape(traces[ti].name) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

/// Center paths projected onto the (z0, z1) plane of the unit sphere; one
/// polyline per cluster, with epoch markers at the final position.
inline std::string render_trajectory_svg(const std::vector<Tensor>& centers,
                                         std::string_view title) {
  if (centers.empty()) throw ConfigError("trajectory plot needs at least one epoch");
  const std::size_t k = centers.front().rows();
  for (const Tensor& c : centers) {
    if (c.rank() != 2 || c.rows() != k || c.cols() < 2) {
      throw DimensionError("trajectory epochs must share a k x 3 shape");
    }
  }
  const double size = 420, r = 180, cx = size / 2, cy = size / 2 + 10;
  std::string out =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"420\" height=\"440\" "
      "viewBox=\"0 0 420 440\">\n<rect width=\"100%\" height=\"100%\" "
      "fill=\"white\"/>\n";
  out += "<text x=\"210\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" +
         svg::escape(title) + "</text>\n";
  out += "<circle cx=\"" + svg::fixed(cx) + "\" cy=\"" + svg::fixed(cy) + "\" r=\"" +
         svg::fixed(r) + "\" fill=\"none\" stroke=\"#999\"/>\n";
  for (std::size_t c = 0; c < k; ++c) {
    std::string pts;
    for (const Tensor& e : centers) {
      if (!pts.empty()) pts += ' ';
      pts += svg::fixed(cx + r * e.at(c, 0)) + ',' + svg::fixed(cy - r * e.at(c, 1));
    }
    const std::string color(svg::kPalette[c % svg::kPalette.size()]);
    out += "<polyline class=\"trajectory\" data-cluster=\"" + std::to_string(c) +
           "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-opacity=\"0.6\" points=\"" + pts + "\"/>\n";
    const Tensor& last = centers.back();
    // Hollow marker: final center lies on the far hemisphere (z2 < 0).
    const bool back = last.cols() > 2 && last.at(c, 2) < 0.0;
    out += "<circle cx=\"" + svg::fixed(cx + r * last.at(c, 0)) + "\" cy=\"" +
           svg::fixed(cy - r * last.at(c, 1)) + "\" r=\"5\" fill=\"" +
           (back ? std::string("white") : color) + "\" stroke=\"" + color + "\"/>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace mimax
