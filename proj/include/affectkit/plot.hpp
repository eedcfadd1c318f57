#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "affectkit/errors.hpp"
#include "affectkit/trainer.hpp"

namespace affectkit {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
  bool scatter = false;
};

struct Panel {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  bool diagonal = false;  ///< draw y = x (prediction vs gold)
};

/// Reads `step=<n> loss=<v>` and `epoch=<n> ccc_v=<v> ccc_a=<v>` lines; anything else is skipped.
inline TrainLog parse_train_log(const std::string& text) {
  TrainLog log;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    unsigned long n = 0;
    double a = 0.0, b = 0.0;
    if (std::sscanf(line.c_str(), "step=%lu loss=%lf", &n, &a) == 2) {
      log.steps.push_back({n, a});
    } else if (std::sscanf(line.c_str(), "epoch=%lu ccc_v=%lf ccc_a=%lf", &n, &a, &b) == 3) {
      log.epochs.push_back({n, a, b});
    }
  }
  return log;
}

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string svg_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Data extent widened by 5% on each side (a unit interval around a single value).
inline std::pair<double, double> axis_range(double lo, double hi) {
  if (lo == hi) return {lo - 0.5, hi + 0.5};
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

}  // namespace detail

/**
 * Panels stacked vertically as a standalone SVG document. Each panel group
 * carries its axis ranges in data-x-min / data-x-max / data-y-min /
 * data-y-max attributes. Output depends only on the input.
 */
inline std::string render_svg(const std::vector<Panel>& panels) {
  constexpr double width = 640, panel_h = 300, left = 70, right = 20, top = 40, bottom = 50;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  std::ostringstream s;
  const double total_h = panel_h * static_cast<double>(panels.size());
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << total_h
    << "\" viewBox=\"0 0 " << width << " " << total_h << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const Panel& panel = panels[p];
    double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
    for (const auto& ser : panel.series) {
      for (const auto& [x, y] : ser.points) {
        xlo = std::min(xlo, x), xhi = std::max(xhi, x), ylo = std::min(ylo, y), yhi = std::max(yhi, y);
      }
    }
    if (xlo > xhi) xlo = xhi = ylo = yhi = 0.0;
    if (panel.diagonal) {
      xlo = ylo = std::min(xlo, ylo);
      xhi = yhi = std::max(xhi, yhi);
    }
    const auto [x0, x1] = detail::axis_range(xlo, xhi);
    const auto [y0, y1] = detail::axis_range(ylo, yhi);
    const double oy = panel_h * static_cast<double>(p);
    const double pw = width - left - right, ph = panel_h - top - bottom;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return oy + top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

    s << "<g class=\"panel\" data-x-min=\"" << detail::svg_label(x0) << "\" data-x-max=\"" << detail::svg_label(x1)
      << "\" data-y-min=\"" << detail::svg_label(y0) << "\" data-y-max=\"" << detail::svg_label(y1) << "\">\n";
    s << "<text x=\"" << detail::svg_num(width / 2) << "\" y=\"" << detail::svg_num(oy + 22)
      << "\" text-anchor=\"middle\" font-size=\"14\">" << detail::escape_xml(panel.title) << "</text>\n";
    s << "<rect x=\"" << left << "\" y=\"" << detail::svg_num(oy + top) << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
      s << "<text x=\"" << detail::svg_num(px(fx)) << "\" y=\"" << detail::svg_num(oy + top + ph + 16)
        << "\" text-anchor=\"middle\">" << detail::svg_label(fx) << "</text>\n";
      s << "<text x=\"" << detail::svg_num(left - 6) << "\" y=\"" << detail::svg_num(py(fy) + 4)
        << "\" text-anchor=\"end\">" << detail::svg_label(fy) << "</text>\n";
    }
    s << "<text x=\"" << detail::svg_num(left + pw / 2) << "\" y=\"" << detail::svg_num(oy + panel_h - 8)
      << "\" text-anchor=\"middle\">" << detail::escape_xml(panel.x_label) << "</text>\n";
    s << "<text transform=\"translate(16," << detail::svg_num(oy + top + ph / 2)
      << ") rotate(-90)\" text-anchor=\"middle\">" << detail::escape_xml(panel.y_label) << "</text>\n";
    if (panel.diagonal) {
      s << "<line x1=\"" << detail::svg_num(px(x0)) << "\" y1=\"" << detail::svg_num(py(y0)) << "\" x2=\""
        << detail::svg_num(px(x1)) << "\" y2=\"" << detail::svg_num(py(y1))
        << "\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n";
    }
    for (std::size_t k = 0; k < panel.series.size(); ++k) {
      const Series& ser = panel.series[k];
      const char* color = colors[k % 4];
      if (ser.scatter) {
        for (const auto& [x, y] : ser.points) {
          s << "<circle cx=\"" << detail::svg_num(px(x)) << "\" cy=\"" << detail::svg_num(py(y))
            << "\" r=\"3\" fill=\"" << color << "\" fill-opacity=\"0.7\"/>\n";
        }
      } else if (!ser.points.empty()) {
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < ser.points.size(); ++i) {
          s << (i ? " " : "") << detail::svg_num(px(ser.points[i].first)) << ","
            << detail::svg_num(py(ser.points[i].second));
        }
        s << "\"/>\n";
      }
      s << "<text x=\"" << detail::svg_num(left + 8) << "\" y=\"" << detail::svg_num(oy + top + 14 + 14.0 * k)
        << "\" fill=\"" << color << "\">" << detail::escape_xml(ser.label) << "</text>\n";
    }
    s << "</g>\n";
  }
  s << "</svg>\n";
  return s.str();
}

/// Loss curve, per-epoch CCC curves, and (when given) prediction-vs-gold scatter.
inline std::vector<Panel> training_panels(const TrainLog& log,
                                          const std::vector<std::pair<UtterancePrediction, Utterance>>& pairs = {}) {
  if (log.steps.empty() && log.epochs.empty()) throw DataError("training log has no step or epoch lines");
  std::vector<Panel> panels;
  if (!log.steps.empty()) {
    Series loss{"loss", {}, false};
    for (const auto& r : log.steps) loss.points.emplace_back(static_cast<double>(r.step), r.loss);
    panels.push_back({"Training loss", "step", "1 - CCC (valence) + 1 - CCC (arousal)", {loss}});
  }
  if (!log.epochs.empty()) {
    Series v{"valence", {}, false}, a{"arousal", {}, false};
    for (const auto& r : log.epochs) {
      v.points.emplace_back(static_cast<double>(r.epoch), r.ccc_valence);
      a.points.emplace_back(static_cast<double>(r.epoch), r.ccc_arousal);
    }
    panels.push_back({"Validation CCC", "epoch", "CCC", {v, a}});
  }
  if (!pairs.empty()) {
    Series v{"valence", {}, true}, a{"arousal", {}, true};
    for (const auto& [p, g] : pairs) {
      v.points.emplace_back(g.valence, p.valence);
      a.points.emplace_back(g.arousal, p.arousal);
    }
    panels.push_back({"Prediction vs gold", "gold", "prediction", {v, a}, true});
  }
  return panels;
}

}  // namespace affectkit
