#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "intervae/common.hpp"

namespace intervae {

// Static SVG scatter plots. Output is a pure function of the input points:
// coordinates are formatted with fixed precision and no timestamps or ids are
// embedded, so identical inputs produce identical bytes.

struct ScatterSeries {
  std::string label;
  std::string color;  // CSS color
  MatrixXd points;    // n x 2
};

struct ScatterPanel {
  std::string title;
  std::vector<ScatterSeries> series;
};

// Palette for the observational / do(first var) / do(second var) overlays.
inline const char* kObservationalColor = "#40E0D0";  // turquoise
inline const char* kDoFirstColor = "#1F77B4";        // blue
inline const char* kDoSecondColor = "#8C564B";       // brown

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace detail

// Renders panels side by side with a shared coordinate range so distribution
// shifts are visually comparable across panels.
inline std::string render_scatter_svg(const std::vector<ScatterPanel>& panels,
                                      const std::string& title) {
  check(!panels.empty(), "plot needs at least one panel");
  double lo = 1e300, hi = -1e300;
  for (const ScatterPanel& panel : panels)
    for (const ScatterSeries& s : panel.series) {
      check(s.points.cols() == 2, "scatter series must be two-dimensional");
      for (Index i = 0; i < s.points.rows(); ++i) {
        lo = std::min({lo, s.points(i, 0), s.points(i, 1)});
        hi = std::max({hi, s.points(i, 0), s.points(i, 1)});
      }
    }
  if (lo > hi) {  // all series empty
    lo = 0.0;
    hi = 1.0;
  }
  const double pad = 0.05 * std::max(hi - lo, 1e-9);
  lo -= pad;
  hi += pad;

  const double panel_size = 240.0, margin = 34.0, gap = 18.0, legend = 26.0;
  const double width =
      margin + static_cast<double>(panels.size()) * (panel_size + gap) - gap + 10.0;
  const double height = margin + panel_size + legend + 22.0;
  auto sx = [&](double x, double x0) {
    return x0 + (x - lo) / (hi - lo) * panel_size;
  };
  auto sy = [&](double y) {
    return margin + panel_size - (y - lo) / (hi - lo) * panel_size;
  };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt(width) +
         "\" height=\"" + detail::fmt(height) + "\" viewBox=\"0 0 " + detail::fmt(width) + " " +
         detail::fmt(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + detail::fmt(width / 2) +
         "\" y=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
         title + "</text>\n";

  for (std::size_t p = 0; p < panels.size(); ++p) {
    const double x0 = margin + static_cast<double>(p) * (panel_size + gap);
    svg += "<rect x=\"" + detail::fmt(x0) + "\" y=\"" + detail::fmt(margin) + "\" width=\"" +
           detail::fmt(panel_size) + "\" height=\"" + detail::fmt(panel_size) +
           "\" fill=\"none\" stroke=\"#888\"/>\n";
    svg += "<text x=\"" + detail::fmt(x0 + panel_size / 2) + "\" y=\"" +
           detail::fmt(margin + panel_size + 16) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
           panels[p].title + "</text>\n";
    for (const ScatterSeries& s : panels[p].series)
      for (Index i = 0; i < s.points.rows(); ++i)
        svg += "<circle cx=\"" + detail::fmt(sx(s.points(i, 0), x0)) + "\" cy=\"" +
               detail::fmt(sy(s.points(i, 1))) + "\" r=\"2\" fill=\"" + s.color +
               "\" fill-opacity=\"0.75\"/>\n";
  }

  // single legend row: take series labels from the first panel
  double lx = margin;
  const double ly = margin + panel_size + legend + 10.0;
  for (const ScatterSeries& s : panels.front().series) {
    svg += "<circle cx=\"" + detail::fmt(lx) + "\" cy=\"" + detail::fmt(ly - 4) +
           "\" r=\"4\" fill=\"" + s.color + "\"/>\n";
    svg += "<text x=\"" + detail::fmt(lx + 8) + "\" y=\"" + detail::fmt(ly) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + s.label + "</text>\n";
    lx += 10.0 + 7.0 * static_cast<double>(s.label.size()) + 18.0;
  }
  svg += "</svg>\n";
  return svg;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open file for writing: " + path);
  out << content;
}

}  // namespace intervae
