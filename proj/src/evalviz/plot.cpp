#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "lne/evalviz.hpp"

namespace lne::evalviz {

namespace fs = std::filesystem;

std::string format_coordinate(double v) {
  if (v == 0.0) v = 0.0;  // no "-0"
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::array<unsigned char, 3> viridis(double t) {
  static constexpr unsigned char kAnchors[11][3] = {
      {68, 1, 84},    {72, 36, 117},  {65, 68, 135},  {53, 95, 141},   {42, 120, 142},  {33, 145, 140},
      {34, 168, 132}, {68, 191, 112}, {122, 209, 81}, {189, 223, 38},  {253, 231, 37}};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  const double pos = t * 10.0;
  const auto i = std::min<std::size_t>(9, static_cast<std::size_t>(pos));
  const double f = pos - static_cast<double>(i);
  std::array<unsigned char, 3> c{};
  for (int k = 0; k < 3; ++k) {
    c[k] = static_cast<unsigned char>(std::lround(kAnchors[i][k] + f * (kAnchors[i + 1][k] - kAnchors[i][k])));
  }
  return c;
}

void TrajectoryFieldPlot::validate() const {
  if (start.size() != end.size() || start.size() != color_key.size()) {
    throw EvalError("field plot: start, end and color arrays differ in length");
  }
  if (start.empty()) throw EvalError("field plot: no arrows");
  for (std::size_t i = 0; i < start.size(); ++i) {
    for (double v : {start[i][0], start[i][1], end[i][0], end[i][1], color_key[i]}) {
      if (!std::isfinite(v)) throw EvalError("field plot: non-finite value in arrow " + std::to_string(i));
    }
    if (!categories.empty() && (color_key[i] < 0 || color_key[i] >= static_cast<double>(categories.size()))) {
      throw EvalError("field plot: category index out of range");
    }
  }
}

namespace {

constexpr const char* kPalette[] = {"#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9"};

std::string hex(const std::array<unsigned char, 3>& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

std::string color_for(const TrajectoryFieldPlot& plot, double key, double lo, double hi) {
  if (!plot.categories.empty()) return kPalette[static_cast<std::size_t>(key) % std::size(kPalette)];
  return hex(viridis(hi > lo ? (key - lo) / (hi - lo) : 0.0));
}

std::string fmt(double v) { return format_coordinate(v); }

}  // namespace

void export_field_plot(const TrajectoryFieldPlot& plot, const fs::path& svg_path, const fs::path& csv_path) {
  plot.validate();
  const std::size_t n = plot.start.size();

  double x0 = plot.start[0][0], x1 = x0, y0 = plot.start[0][1], y1 = y0;
  double sx0 = x0, sx1 = x0;
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& p : {plot.start[i], plot.end[i]}) {
      x0 = std::min(x0, p[0]);
      x1 = std::max(x1, p[0]);
      y0 = std::min(y0, p[1]);
      y1 = std::max(y1, p[1]);
    }
    sx0 = std::min(sx0, plot.start[i][0]);
    sx1 = std::max(sx1, plot.start[i][0]);
  }
  constexpr int kCurvePoints = 101;
  std::vector<std::array<double, 2>> curve;
  for (int k = 0; k < kCurvePoints; ++k) {
    const double x = sx0 + (sx1 - sx0) * k / (kCurvePoints - 1);
    const double y = plot.curve(x);
    if (y < y0 - (y1 - y0) || y > y1 + (y1 - y0)) continue;  // keep the view on the arrows
    curve.push_back({x, y});
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  }

  const double span = std::max({x1 - x0, y1 - y0, 1e-12});
  constexpr double kCanvas = 640.0, kMargin = 50.0, kLegend = 140.0;
  const double scale = (kCanvas - 2 * kMargin) / span;
  const double tx = kMargin - scale * x0;
  const double ty = kCanvas - kMargin + scale * y0;
  const double stroke = 1.0;

  double lo = plot.color_key[0], hi = lo;
  for (double k : plot.color_key) {
    lo = std::min(lo, k);
    hi = std::max(hi, k);
  }

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kCanvas + kLegend << "\" height=\"" << kCanvas
      << "\" viewBox=\"0 0 " << kCanvas + kLegend << " " << kCanvas << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kCanvas / 2 << "\" y=\"" << kCanvas - 12 << "\" text-anchor=\"middle\" font-size=\"13\">PC1</text>\n";
  svg << "<text x=\"14\" y=\"" << kCanvas / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 14 "
      << kCanvas / 2 << ")\">PC2</text>\n";
  svg << "<g id=\"field\" transform=\"matrix(" << fmt(scale) << " 0 0 " << fmt(-scale) << " " << fmt(tx) << " "
      << fmt(ty) << ")\">\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = plot.start[i];
    const auto& e = plot.end[i];
    const std::string color = color_for(plot, plot.color_key[i], lo, hi);
    svg << "<line class=\"arrow\" x1=\"" << fmt(s[0]) << "\" y1=\"" << fmt(s[1]) << "\" x2=\"" << fmt(e[0])
        << "\" y2=\"" << fmt(e[1]) << "\" stroke=\"" << color << "\" stroke-width=\"" << stroke
        << "\" vector-effect=\"non-scaling-stroke\"/>\n";
    const double dx = e[0] - s[0], dy = e[1] - s[1];
    const double len = std::hypot(dx, dy);
    if (len > 0.0) {
      const double head = std::min(0.35 * len, 0.02 * span);
      const double ux = dx / len, uy = dy / len;
      const double bx = e[0] - head * ux, by = e[1] - head * uy;
      const double w = 0.5 * head;
      svg << "<polygon class=\"arrowhead\" points=\"" << fmt(e[0]) << "," << fmt(e[1]) << " " << fmt(bx - w * uy)
          << "," << fmt(by + w * ux) << " " << fmt(bx + w * uy) << "," << fmt(by - w * ux) << "\" fill=\"" << color
          << "\"/>\n";
    }
  }
  if (curve.size() >= 2) {
    svg << "<polyline class=\"curve\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2.5\" "
           "vector-effect=\"non-scaling-stroke\" points=\"";
    for (std::size_t k = 0; k < curve.size(); ++k) svg << (k ? " " : "") << fmt(curve[k][0]) << "," << fmt(curve[k][1]);
    svg << "\"/>\n";
  }
  svg << "</g>\n";

  svg << "<g class=\"legend\" font-size=\"12\">\n";
  svg << "<text x=\"" << kCanvas + 10 << "\" y=\"" << kMargin << "\">" << plot.key_label << "</text>\n";
  std::vector<std::pair<double, std::string>> entries;
  if (!plot.categories.empty()) {
    for (std::size_t c = 0; c < plot.categories.size(); ++c) entries.emplace_back(static_cast<double>(c), plot.categories[c]);
  } else {
    constexpr int kSteps = 6;
    for (int k = 0; k < kSteps; ++k) {
      const double key = lo + (hi - lo) * k / (kSteps - 1);
      char label[32];
      std::snprintf(label, sizeof label, "%.1f", key);
      entries.emplace_back(key, label);
    }
  }
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const double y = kMargin + 16.0 + 22.0 * static_cast<double>(k);
    svg << "<rect class=\"legend-swatch\" data-key=\"" << fmt(entries[k].first) << "\" x=\"" << kCanvas + 10
        << "\" y=\"" << y << "\" width=\"16\" height=\"16\" fill=\"" << color_for(plot, entries[k].first, lo, hi)
        << "\"/>\n";
    svg << "<text x=\"" << kCanvas + 32 << "\" y=\"" << y + 12 << "\">" << entries[k].second << "</text>\n";
  }
  svg << "</g>\n</svg>\n";

  std::ostringstream csv;
  csv << "x_t,y_t,x_s,y_s,color_key\n";
  for (std::size_t i = 0; i < n; ++i) {
    csv << fmt(plot.start[i][0]) << "," << fmt(plot.start[i][1]) << "," << fmt(plot.end[i][0]) << ","
        << fmt(plot.end[i][1]) << "," << fmt(plot.color_key[i]) << "\n";
  }

  for (const auto& [path, text] : {std::pair{svg_path, svg.str()}, std::pair{csv_path, csv.str()}}) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw EvalError("cannot write " + path.string());
    out << text;
    if (!out) throw EvalError("write failed for " + path.string());
  }
}

}  // namespace lne::evalviz
