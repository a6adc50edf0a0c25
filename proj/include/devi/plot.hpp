#pragma once

// Learning and transfer curves as standalone SVG.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "devi/trainkit.hpp"

namespace devi::plot {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // sorted by x
};

struct Panel {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> runs;  // thin lines
  Series mean;               // bold line
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
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

}  // namespace detail

/// One panel per phase. The plotted metric is the oracle-normalised return
/// where a phase logs one, the training loss otherwise. The mean at each step
/// averages the runs that logged that step.
inline std::vector<Panel> panels_from_metrics(const MetricsLog& log) {
  if (log.empty()) throw std::runtime_error("plot: no metrics rows");
  std::set<std::string> phases;
  for (const auto& r : log) phases.insert(r.phase);
  std::vector<Panel> panels;
  for (const auto& phase : phases) {
    bool has_return = false;
    for (const auto& r : log)
      if (r.phase == phase && r.oracle_norm) has_return = true;
    auto value = [&](const MetricsRow& r) { return has_return ? r.oracle_norm : r.loss; };

    Panel p;
    p.title = phase;
    p.x_label = "minibatches (gradient steps)";
    p.y_label = has_return ? "oracle-normalised return (fraction of optimum)" : "training loss (squared TD error)";
    std::map<std::string, std::map<std::size_t, double>> by_run;
    for (const auto& r : log)
      if (r.phase == phase && value(r)) by_run[r.run_id][r.step] = *value(r);
    std::map<std::size_t, std::pair<double, std::size_t>> sums;
    for (const auto& [run, pts] : by_run) {
      Series s;
      s.label = run;
      for (const auto& [x, y] : pts) {
        s.points.emplace_back(static_cast<double>(x), y);
        sums[x].first += y;
        ++sums[x].second;
      }
      p.runs.push_back(std::move(s));
    }
    if (p.runs.empty()) continue;
    p.mean.label = "mean";
    for (const auto& [x, acc] : sums) p.mean.points.emplace_back(static_cast<double>(x), acc.first / static_cast<double>(acc.second));
    panels.push_back(std::move(p));
  }
  if (panels.empty()) throw std::runtime_error("plot: no plottable values");
  return panels;
}

inline std::string render_svg(const std::vector<Panel>& panels) {
  constexpr double kW = 520, kH = 340, kLeft = 70, kRight = 20, kTop = 36, kBottom = 56;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::num(kW * panels.size()) << "\" height=\""
     << detail::num(kH) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t pi = 0; pi < panels.size(); ++pi) {
    const Panel& p = panels[pi];
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    auto extend = [&](const Series& s) {
      for (const auto& [x, y] : s.points) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        if (std::isfinite(y)) {
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
        }
      }
    };
    for (const auto& s : p.runs) extend(s);
    extend(p.mean);
    if (!(x1 > x0)) x1 = x0 + 1;
    if (!std::isfinite(y0)) y0 = 0, y1 = 1;
    if (!(y1 > y0)) y1 = y0 + 1;
    const double ox = kW * static_cast<double>(pi);
    const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
    auto sx = [&](double x) { return ox + kLeft + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

    os << "<g>\n";
    os << "<text x=\"" << detail::num(ox + kW / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">"
       << detail::escape(p.title) << "</text>\n";
    os << "<rect x=\"" << detail::num(ox + kLeft) << "\" y=\"" << detail::num(kTop) << "\" width=\"" << detail::num(pw)
       << "\" height=\"" << detail::num(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
      os << "<text x=\"" << detail::num(sx(fx)) << "\" y=\"" << detail::num(kTop + ph + 16)
         << "\" text-anchor=\"middle\">" << detail::tick(fx) << "</text>\n";
      os << "<text x=\"" << detail::num(ox + kLeft - 6) << "\" y=\"" << detail::num(sy(fy) + 4)
         << "\" text-anchor=\"end\">" << detail::tick(fy) << "</text>\n";
    }
    os << "<text x=\"" << detail::num(ox + kLeft + pw / 2) << "\" y=\"" << detail::num(kH - 14)
       << "\" text-anchor=\"middle\">" << detail::escape(p.x_label) << "</text>\n";
    const double ly = kTop + ph / 2, lx = ox + 16;
    os << "<text x=\"" << detail::num(lx) << "\" y=\"" << detail::num(ly) << "\" text-anchor=\"middle\" transform=\"rotate(-90 "
       << detail::num(lx) << ' ' << detail::num(ly) << ")\">" << detail::escape(p.y_label) << "</text>\n";
    auto polyline = [&](const Series& s, const char* style) {
      os << "<polyline class=\"" << style << "\" fill=\"none\" "
         << (std::string(style) == "mean" ? "stroke=\"black\" stroke-width=\"2.5\"" : "stroke=\"steelblue\" stroke-width=\"0.7\" stroke-opacity=\"0.7\"")
         << " points=\"";
      bool first = true;
      for (const auto& [x, y] : s.points) {
        if (!std::isfinite(y)) continue;
        os << (first ? "" : " ") << detail::num(sx(x)) << ',' << detail::num(sy(y));
        first = false;
      }
      os << "\"><title>" << detail::escape(s.label) << "</title></polyline>\n";
    };
    for (const auto& s : p.runs) polyline(s, "run");
    polyline(p.mean, "mean");
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace devi::plot
