#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "lldif/image_io.hpp"

namespace lldif {

// Minimal batch plotter: renders loss curves, histograms, and bar charts
// straight into PNG files. No text beyond a small numeric glyph set; figures
// are meant as quick visual checks, not publication graphics.

using Rgb = std::array<double, 3>;

inline constexpr Rgb kPlotBg = {1.0, 1.0, 1.0};
inline constexpr Rgb kPlotFrame = {0.25, 0.25, 0.25};
inline const std::vector<Rgb> kPalette = {
    {0.12, 0.39, 0.88}, {0.86, 0.30, 0.16}, {0.18, 0.62, 0.29},
    {0.58, 0.25, 0.70}, {0.85, 0.62, 0.10}, {0.10, 0.65, 0.65},
};

class Canvas {
 public:
  Canvas(int w, int h, Rgb bg = kPlotBg) : w_(w), h_(h), img_({3, h, w}) {
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) img_.at3(c, i, j) = bg[c];
  }

  int width() const { return w_; }
  int height() const { return h_; }
  const Tensor& image() const { return img_; }

  void pixel(int x, int y, const Rgb& c) {
    if (x < 0 || x >= w_ || y < 0 || y >= h_) return;
    for (int k = 0; k < 3; ++k) img_.at3(k, y, x) = c[k];
  }

  void fill_rect(int x0, int y0, int x1, int y1, const Rgb& c) {
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    for (int y = std::max(0, y0); y <= std::min(h_ - 1, y1); ++y)
      for (int x = std::max(0, x0); x <= std::min(w_ - 1, x1); ++x) pixel(x, y, c);
  }

  void line(int x0, int y0, int x1, int y1, const Rgb& c) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      pixel(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  /// 3x5 glyphs for numeric labels; unknown characters advance the cursor.
  void text(int x, int y, const std::string& s, const Rgb& c) {
    for (char ch : s) {
      uint16_t rows = glyph(ch);
      for (int r = 0; r < 5; ++r)
        for (int b = 0; b < 3; ++b)
          if (rows >> (3 * (4 - r) + (2 - b)) & 1) pixel(x + b, y + r, c);
      x += 4;
    }
  }

 private:
  static uint16_t glyph(char c) {
    switch (c) {
      case '0': return 0b111101101101111;
      case '1': return 0b010110010010111;
      case '2': return 0b111001111100111;
      case '3': return 0b111001111001111;
      case '4': return 0b101101111001001;
      case '5': return 0b111100111001111;
      case '6': return 0b111100111101111;
      case '7': return 0b111001010010010;
      case '8': return 0b111101111101111;
      case '9': return 0b111101111001111;
      case '.': return 0b000000000000010;
      case '-': return 0b000000111000000;
      case '+': return 0b000010111010000;
      case 'e': return 0b000111111100111;
      default: return 0;
    }
  }

  int w_, h_;
  Tensor img_;
};

namespace detail {

struct AxisMap {
  double xmin, xmax, ymin, ymax;
  int px0, px1, py_top, py_bot;  // plot rectangle in pixels

  int X(double v) const {
    double f = (v - xmin) / (xmax - xmin);
    return px0 + static_cast<int>(std::lround(f * (px1 - px0)));
  }
  int Y(double v) const {
    double f = (v - ymin) / (ymax - ymin);
    return py_bot - static_cast<int>(std::lround(f * (py_bot - py_top)));
  }
};

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline void draw_frame(Canvas& cv, const AxisMap& ax) {
  cv.line(ax.px0, ax.py_top, ax.px0, ax.py_bot, kPlotFrame);
  cv.line(ax.px0, ax.py_bot, ax.px1, ax.py_bot, kPlotFrame);
  for (int i = 0; i <= 4; ++i) {
    double fy = ax.ymin + (ax.ymax - ax.ymin) * i / 4.0;
    int y = ax.Y(fy);
    cv.line(ax.px0 - 3, y, ax.px0, y, kPlotFrame);
    cv.text(2, y - 2, tick_label(fy), kPlotFrame);
    double fx = ax.xmin + (ax.xmax - ax.xmin) * i / 4.0;
    int x = ax.X(fx);
    cv.line(x, ax.py_bot, x, ax.py_bot + 3, kPlotFrame);
    cv.text(x - 6, ax.py_bot + 6, tick_label(fx), kPlotFrame);
  }
}

inline void pad_range(double& lo, double& hi) {
  if (!(hi > lo)) {
    double c = lo;
    lo = c - 1.0;
    hi = c + 1.0;
    return;
  }
  double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
}

}  // namespace detail

struct PlotSeries {
  std::vector<double> x;  // empty: use 0..n-1
  std::vector<double> y;
};

inline void plot_curves(const std::string& path, const std::vector<PlotSeries>& series,
                        int w = 640, int h = 400) {
  check(!series.empty(), "plot: no series");
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    check(!s.y.empty(), "plot: empty series");
    check(s.x.empty() || s.x.size() == s.y.size(), "plot: x/y size mismatch");
    for (size_t i = 0; i < s.y.size(); ++i) {
      double xv = s.x.empty() ? static_cast<double>(i) : s.x[i];
      xmin = std::min(xmin, xv);
      xmax = std::max(xmax, xv);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  detail::pad_range(xmin, xmax);
  detail::pad_range(ymin, ymax);

  Canvas cv(w, h);
  detail::AxisMap ax{xmin, xmax, ymin, ymax, 46, w - 12, 12, h - 22};
  detail::draw_frame(cv, ax);
  for (size_t k = 0; k < series.size(); ++k) {
    const Rgb& color = kPalette[k % kPalette.size()];
    const auto& s = series[k];
    for (size_t i = 1; i < s.y.size(); ++i) {
      double xa = s.x.empty() ? static_cast<double>(i - 1) : s.x[i - 1];
      double xb = s.x.empty() ? static_cast<double>(i) : s.x[i];
      cv.line(ax.X(xa), ax.Y(s.y[i - 1]), ax.X(xb), ax.Y(s.y[i]), color);
    }
    if (s.y.size() == 1) cv.fill_rect(ax.X(s.x.empty() ? 0.0 : s.x[0]) - 2,
                                      ax.Y(s.y[0]) - 2, ax.X(s.x.empty() ? 0.0 : s.x[0]) + 2,
                                      ax.Y(s.y[0]) + 2, color);
  }
  save_image(path, cv.image());
}

inline void plot_histogram(const std::string& path, const std::vector<double>& values, int bins,
                           int w = 640, int h = 400) {
  check(!values.empty(), "plot: no values");
  check(bins >= 1, "plot: bins must be >= 1");
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (!(hi > lo)) hi = lo + 1.0;
  std::vector<long> count(bins, 0);
  for (double v : values) {
    int b = static_cast<int>((v - lo) / (hi - lo) * bins);
    count[std::clamp(b, 0, bins - 1)] += 1;
  }
  long peak = *std::max_element(count.begin(), count.end());

  Canvas cv(w, h);
  detail::AxisMap ax{lo, hi, 0.0, static_cast<double>(peak) * 1.05, 46, w - 12, 12, h - 22};
  detail::draw_frame(cv, ax);
  for (int b = 0; b < bins; ++b) {
    double x0 = lo + (hi - lo) * b / bins;
    double x1 = lo + (hi - lo) * (b + 1) / bins;
    cv.fill_rect(ax.X(x0) + 1, ax.Y(static_cast<double>(count[b])), ax.X(x1) - 1, ax.py_bot - 1,
                 kPalette[0]);
  }
  save_image(path, cv.image());
}

/// One bar per category, values expected in a known range (e.g. accuracies).
inline void plot_bars(const std::string& path, const std::vector<double>& values,
                      double ymax_hint = 0.0, int w = 640, int h = 400) {
  check(!values.empty(), "plot: no values");
  double hi = ymax_hint;
  for (double v : values) hi = std::max(hi, v);
  if (!(hi > 0.0)) hi = 1.0;

  Canvas cv(w, h);
  int n = static_cast<int>(values.size());
  detail::AxisMap ax{-0.5, n - 0.5, 0.0, hi * 1.05, 46, w - 12, 12, h - 22};
  detail::draw_frame(cv, ax);
  for (int i = 0; i < n; ++i) {
    int xa = ax.X(i - 0.35), xb = ax.X(i + 0.35);
    cv.fill_rect(xa, ax.Y(values[i]), xb, ax.py_bot - 1, kPalette[i % kPalette.size()]);
  }
  save_image(path, cv.image());
}

}  // namespace lldif
