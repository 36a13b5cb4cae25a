#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "riemla/nn.hpp"

namespace riemla {
namespace svg {

struct Rgb {
  int r, g, b;
};

inline Rgb class_color(int label) {
  static const Rgb palette[] = {{214, 69, 65},  {31, 119, 180}, {44, 160, 44},
                                {255, 127, 14}, {148, 103, 189}, {140, 86, 75}};
  return palette[label % 6];
}

/// Confidence colormap: 1/C (chance) -> near white, 1.0 -> saturated blue.
inline Rgb confidence_color(double conf, double chance) {
  double t = std::clamp((conf - chance) / std::max(1e-9, 1.0 - chance), 0.0, 1.0);
  auto lerp = [&](int lo, int hi) { return static_cast<int>(lo + t * (hi - lo)); };
  return {lerp(250, 40), lerp(250, 90), lerp(252, 170)};
}

/// Max-probability heatmap over a regular grid plus the data scatter.
/// conf is row-major (ny rows by nx cols), conf[j*nx + i] at grid cell (i, j).
inline void write_confidence_heatmap(const std::string& path, double x_lo, double x_hi,
                                     double y_lo, double y_hi, int nx, int ny,
                                     const std::vector<double>& conf, double chance,
                                     const Matrix& points, const std::vector<int>& labels) {
  if (static_cast<int>(conf.size()) != nx * ny)
    throw std::invalid_argument("write_confidence_heatmap: grid size mismatch");
  const int w = 640, h = 640;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  double cw = static_cast<double>(w) / nx, ch = static_cast<double>(h) / ny;
  char buf[192];
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      Rgb c = confidence_color(conf[static_cast<std::size_t>(j * nx + i)], chance);
      // svg y axis points down; grid row 0 is the bottom of the data box
      std::snprintf(buf, sizeof(buf),
                    "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" "
                    "fill=\"rgb(%d,%d,%d)\"/>\n",
                    i * cw, h - (j + 1) * ch, cw + 0.5, ch + 0.5, c.r, c.g, c.b);
      out << buf;
    }
  }
  auto px = [&](double x) { return (x - x_lo) / (x_hi - x_lo) * w; };
  auto py = [&](double y) { return h - (y - y_lo) / (y_hi - y_lo) * h; };
  for (long i = 0; i < points.rows(); ++i) {
    Rgb c = class_color(labels[static_cast<std::size_t>(i)]);
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"rgb(%d,%d,%d)\" "
                  "stroke=\"black\" stroke-width=\"0.5\"/>\n",
                  px(points(i, 0)), py(points(i, 1)), c.r, c.g, c.b);
    out << buf;
  }
  out << "</svg>\n";
  if (!out) throw std::runtime_error("write failed for " + path);
}

/// 1-D regression band: mean line, mean +/- 2 sd polygon, training scatter.
inline void write_regression_band(const std::string& path, const Vector& xs, const Vector& mean,
                                  const Vector& sd, const Matrix& train_x, const Matrix& train_y) {
  const int w = 720, h = 480;
  double x_lo = xs.minCoeff(), x_hi = xs.maxCoeff();
  double y_lo = (mean - 2.0 * sd).minCoeff(), y_hi = (mean + 2.0 * sd).maxCoeff();
  if (train_y.size() > 0) {
    y_lo = std::min(y_lo, train_y.minCoeff());
    y_hi = std::max(y_hi, train_y.maxCoeff());
  }
  double pad = 0.05 * (y_hi - y_lo + 1e-9);
  y_lo -= pad;
  y_hi += pad;

  auto px = [&](double x) { return (x - x_lo) / (x_hi - x_lo + 1e-12) * w; };
  auto py = [&](double y) { return h - (y - y_lo) / (y_hi - y_lo + 1e-12) * h; };

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  out << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";

  char buf[96];
  out << "<polygon fill=\"rgb(170,200,240)\" fill-opacity=\"0.7\" points=\"";
  for (long i = 0; i < xs.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", px(xs(i)), py(mean(i) + 2.0 * sd(i)));
    out << buf;
  }
  for (long i = xs.size() - 1; i >= 0; --i) {
    std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", px(xs(i)), py(mean(i) - 2.0 * sd(i)));
    out << buf;
  }
  out << "\"/>\n";

  out << "<polyline fill=\"none\" stroke=\"rgb(31,80,160)\" stroke-width=\"2\" points=\"";
  for (long i = 0; i < xs.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", px(xs(i)), py(mean(i)));
    out << buf;
  }
  out << "\"/>\n";

  for (long i = 0; i < train_x.rows(); ++i) {
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"rgb(214,69,65)\"/>\n",
                  px(train_x(i, 0)), py(train_y(i, 0)));
    out << buf;
  }
  out << "</svg>\n";
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace svg
}  // namespace riemla
