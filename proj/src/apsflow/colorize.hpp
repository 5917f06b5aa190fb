#pragma once

// Flow and error rasterization: the standard 55-entry flow color wheel (white
// at zero motion), brightness-coded error maps, and a small heat colormap for
// similarity figures.

#include <array>
#include <cmath>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace apsflow {

// 55 fully saturated RGB stops around the hue circle.
inline const std::vector<std::array<float, 3>>& flow_colorwheel() {
  static const std::vector<std::array<float, 3>> wheel = [] {
    const int ry = 15, yg = 6, gc = 4, cb = 11, bm = 13, mr = 6;
    std::vector<std::array<float, 3>> w;
    auto span = [&w](int n, auto color) {
      for (int i = 0; i < n; ++i) w.push_back(color(static_cast<float>(i) / n));
    };
    span(ry, [](float t) { return std::array<float, 3>{1, t, 0}; });
    span(yg, [](float t) { return std::array<float, 3>{1 - t, 1, 0}; });
    span(gc, [](float t) { return std::array<float, 3>{0, 1, t}; });
    span(cb, [](float t) { return std::array<float, 3>{0, 1 - t, 1}; });
    span(bm, [](float t) { return std::array<float, 3>{t, 0, 1}; });
    span(mr, [](float t) { return std::array<float, 3>{1, 0, 1 - t}; });
    return w;
  }();
  return wheel;
}

// max_magnitude <= 0 means auto-scale to the largest vector present.
template <typename T>
Tensor<float> flow_to_color(const Tensor<T>& flow, double max_magnitude = 0) {
  APSFLOW_CHECK(flow.rank() == 3 && flow.dim(2) == 2, ShapeError,
                "flow_to_color: flow must be (H, W, 2), got "
                    << shape_str(flow.shape()));
  const int h = flow.dim(0), w = flow.dim(1);
  double max_rad = max_magnitude;
  if (max_rad <= 0) {
    for (int p = 0; p < h * w; ++p)
      max_rad = std::max(max_rad,
                         std::hypot(static_cast<double>(flow.data()[p * 2]),
                                    static_cast<double>(flow.data()[p * 2 + 1])));
    if (max_rad == 0) max_rad = 1;
  }

  const auto& wheel = flow_colorwheel();
  const int ncols = static_cast<int>(wheel.size());
  auto img = Tensor<float>::zeros(Shape{h, w, 3});
  for (int p = 0; p < h * w; ++p) {
    const double u = flow.data()[p * 2], v = flow.data()[p * 2 + 1];
    const double rad = std::hypot(u, v) / max_rad;
    const double a = std::atan2(-v, -u) / M_PI;  // [-1, 1]
    const double fk = (a + 1.0) / 2.0 * (ncols - 1);
    const int k0 = static_cast<int>(std::floor(fk));
    const int k1 = (k0 + 1) % ncols;
    const double f = fk - k0;
    for (int c = 0; c < 3; ++c) {
      double col = (1.0 - f) * wheel[static_cast<size_t>(k0)][static_cast<size_t>(c)] +
                   f * wheel[static_cast<size_t>(k1)][static_cast<size_t>(c)];
      if (rad <= 1.0)
        col = 1.0 - rad * (1.0 - col);  // white center, saturation ~ magnitude
      else
        col *= 0.75;  // out-of-range vectors darkened
      img.raw_value()[static_cast<size_t>(p) * 3 + c] = static_cast<float>(col);
    }
  }
  return img;
}

// Per-pixel endpoint error as brightness; brighter means larger error.
template <typename T>
Tensor<float> error_to_brightness(const Tensor<T>& pred, const Tensor<T>& gt,
                                  double max_error = 0) {
  APSFLOW_CHECK(pred.same_shape(gt), ShapeError, "error_to_brightness: shape mismatch");
  const int h = pred.dim(0), w = pred.dim(1);
  std::vector<double> err(static_cast<size_t>(h) * w);
  double top = max_error;
  for (int p = 0; p < h * w; ++p) {
    const double du = static_cast<double>(pred.data()[p * 2]) - gt.data()[p * 2];
    const double dv = static_cast<double>(pred.data()[p * 2 + 1]) - gt.data()[p * 2 + 1];
    err[static_cast<size_t>(p)] = std::hypot(du, dv);
    if (max_error <= 0) top = std::max(top, err[static_cast<size_t>(p)]);
  }
  if (top == 0) top = 1;
  auto img = Tensor<float>::zeros(Shape{h, w, 3});
  for (int p = 0; p < h * w; ++p) {
    const float b = static_cast<float>(std::min(1.0, err[static_cast<size_t>(p)] / top));
    for (int c = 0; c < 3; ++c) img.raw_value()[static_cast<size_t>(p) * 3 + c] = b;
  }
  return img;
}

// Black -> red -> yellow -> white ramp for t in [0, 1].
inline void heat_color(double t, float rgb[3]) {
  t = std::min(1.0, std::max(0.0, t));
  rgb[0] = static_cast<float>(std::min(1.0, 3.0 * t));
  rgb[1] = static_cast<float>(std::min(1.0, std::max(0.0, 3.0 * t - 1.0)));
  rgb[2] = static_cast<float>(std::min(1.0, std::max(0.0, 3.0 * t - 2.0)));
}

// Scalar field (expected range [lo, hi]) to a heat-mapped image.
template <typename T>
Tensor<float> heatmap(const Tensor<T>& field, double lo, double hi) {
  APSFLOW_CHECK(field.rank() == 3 && field.dim(2) == 1, ShapeError,
                "heatmap: field must be (H, W, 1)");
  APSFLOW_CHECK(hi > lo, ContractError, "heatmap: empty value range");
  const int h = field.dim(0), w = field.dim(1);
  auto img = Tensor<float>::zeros(Shape{h, w, 3});
  float rgb[3];
  for (int p = 0; p < h * w; ++p) {
    heat_color((static_cast<double>(field.data()[p]) - lo) / (hi - lo), rgb);
    for (int c = 0; c < 3; ++c)
      img.raw_value()[static_cast<size_t>(p) * 3 + c] = rgb[c];
  }
  return img;
}

}  // namespace apsflow
