#pragma once

// Synthetic ground-truth scenes: band-limited noise textures on a translating
// background with affinely moving rectangle/ellipse layers on top. Flow is the
// exact analytic displacement of the topmost layer at each pixel; occlusion is
// derived from layer ordering at the target position. Textures are smooth
// enough that bilinear warping of frame 2 reproduces frame 1 within 2/255 at
// visible pixels, which the tests enforce per seed.
//
// Both frames carry a margin of real context around the crop so losses can
// sample beyond the frame edge.

#include <cmath>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace apsflow {

struct SceneParams {
  int height = 64;
  int width = 64;
  int num_layers = 3;
  double max_motion = 6.0;
  int margin = 8;

  void validate() const {
    APSFLOW_CHECK(height >= 8 && width >= 8, ContractError,
                  "scene: size too small, " << height << "x" << width);
    APSFLOW_CHECK(num_layers >= 0, ContractError, "scene: negative layer count");
    APSFLOW_CHECK(margin >= 1, ContractError, "scene: margin must be >= 1");
    APSFLOW_CHECK(max_motion >= 0, ContractError, "scene: negative max_motion");
  }
};

template <typename T>
struct SyntheticScene {
  Tensor<T> img1, img2;          // crop, height x width x 3
  Tensor<T> img1_ext, img2_ext;  // crop plus margin on every side
  Tensor<T> flow_gt;             // height x width x 2, exact
  Tensor<T> occlusion;           // height x width x 1, 1 marks visible pixels
  int margin = 0;
};

namespace detail {

// Sum of three oriented cosines per channel. Wavelengths are long enough that
// bilinear resampling stays inside the generator's 2/255 consistency budget.
struct NoiseTexture {
  double base[3];
  double dir_x[3], dir_y[3];   // unit direction * (2*pi / wavelength)
  double amp[3];
  double phase[3][3];          // [wave][channel]

  static NoiseTexture random(Rng& rng) {
    NoiseTexture t;
    const double wavelengths[3] = {16.0, 24.0, 40.0};
    const double amps[3] = {0.09, 0.14, 0.20};
    for (int k = 0; k < 3; ++k) {
      const double angle = rng.uniform(0.0, 2.0 * M_PI);
      const double freq = 2.0 * M_PI / wavelengths[k];
      t.dir_x[k] = std::cos(angle) * freq;
      t.dir_y[k] = std::sin(angle) * freq;
      t.amp[k] = amps[k];
      for (int c = 0; c < 3; ++c) t.phase[k][c] = rng.uniform(0.0, 2.0 * M_PI);
    }
    for (int c = 0; c < 3; ++c) t.base[c] = rng.uniform(0.48, 0.52);
    return t;
  }

  void sample(double x, double y, double rgb[3]) const {
    for (int c = 0; c < 3; ++c) rgb[c] = base[c];
    for (int k = 0; k < 3; ++k) {
      const double s = dir_x[k] * x + dir_y[k] * y;
      for (int c = 0; c < 3; ++c) rgb[c] += amp[k] * std::cos(s + phase[k][c]);
    }
  }
};

// One moving layer: a rotated rectangle or ellipse defined in frame-1
// coordinates, carried by the affine map psi(x) = B (x - c) + c + t.
struct SceneLayer {
  bool ellipse = false;
  double cx = 0, cy = 0, rx = 1, ry = 1, tilt = 0;
  double b00 = 1, b01 = 0, b10 = 0, b11 = 1;
  double tx = 0, ty = 0;
  NoiseTexture tex;

  bool covers(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double ca = std::cos(tilt), sa = std::sin(tilt);
    const double u = ca * dx + sa * dy;
    const double v = -sa * dx + ca * dy;
    if (ellipse) return (u / rx) * (u / rx) + (v / ry) * (v / ry) <= 1.0;
    return std::abs(u) <= rx && std::abs(v) <= ry;
  }

  void displacement(double x, double y, double& dx, double& dy) const {
    dx = (b00 - 1.0) * (x - cx) + b01 * (y - cy) + tx;
    dy = b10 * (x - cx) + (b11 - 1.0) * (y - cy) + ty;
  }

  // Frame-2 point back to frame-1 coordinates.
  void to_frame1(double qx, double qy, double& x, double& y) const {
    const double det = b00 * b11 - b01 * b10;
    const double rxq = qx - cx - tx, ryq = qy - cy - ty;
    x = cx + (b11 * rxq - b01 * ryq) / det;
    y = cy + (-b10 * rxq + b00 * ryq) / det;
  }

  bool covers_in_frame2(double qx, double qy) const {
    double x, y;
    to_frame1(qx, qy, x, y);
    return covers(x, y);
  }
};

}  // namespace detail

template <typename T>
SyntheticScene<T> generate_scene(uint64_t seed, const SceneParams& params) {
  params.validate();
  Rng rng(Rng::mix(seed, 0x5CE11E));
  const int h = params.height, w = params.width, m = params.margin;
  const int eh = h + 2 * m, ew = w + 2 * m;

  auto background = detail::NoiseTexture::random(rng);
  const double bg_tx = rng.uniform(-params.max_motion, params.max_motion);
  const double bg_ty = rng.uniform(-params.max_motion, params.max_motion);

  std::vector<detail::SceneLayer> layers(static_cast<size_t>(params.num_layers));
  for (auto& layer : layers) {
    layer.ellipse = rng.bernoulli(0.5);
    layer.cx = m + rng.uniform(0.2, 0.8) * w;
    layer.cy = m + rng.uniform(0.2, 0.8) * h;
    layer.rx = rng.uniform(0.12, 0.30) * w;
    layer.ry = rng.uniform(0.12, 0.30) * h;
    layer.tilt = rng.uniform(0.0, M_PI);
    const double angle = rng.uniform(-0.04, 0.04);
    const double scale = rng.uniform(0.98, 1.02);
    layer.b00 = std::cos(angle) * scale;
    layer.b01 = -std::sin(angle) * scale;
    layer.b10 = std::sin(angle) * scale;
    layer.b11 = std::cos(angle) * scale;
    layer.tx = rng.uniform(-params.max_motion, params.max_motion);
    layer.ty = rng.uniform(-params.max_motion, params.max_motion);
    layer.tex = detail::NoiseTexture::random(rng);
  }

  // Topmost layer index at a frame-1 / frame-2 position; -1 is the background.
  auto top1 = [&](double x, double y) {
    for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l)
      if (layers[static_cast<size_t>(l)].covers(x, y)) return l;
    return -1;
  };
  auto top2 = [&](double qx, double qy) {
    for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l)
      if (layers[static_cast<size_t>(l)].covers_in_frame2(qx, qy)) return l;
    return -1;
  };

  SyntheticScene<T> scene;
  scene.margin = m;
  scene.img1_ext = Tensor<T>::zeros(Shape{eh, ew, 3});
  scene.img2_ext = Tensor<T>::zeros(Shape{eh, ew, 3});
  scene.img1 = Tensor<T>::zeros(Shape{h, w, 3});
  scene.img2 = Tensor<T>::zeros(Shape{h, w, 3});
  scene.flow_gt = Tensor<T>::zeros(Shape{h, w, 2});
  scene.occlusion = Tensor<T>::zeros(Shape{h, w, 1});

  double rgb[3];
  for (int y = 0; y < eh; ++y)
    for (int x = 0; x < ew; ++x) {
      const size_t p = (static_cast<size_t>(y) * ew + x) * 3;
      const int l1 = top1(x, y);
      if (l1 < 0)
        background.sample(x, y, rgb);
      else
        layers[static_cast<size_t>(l1)].tex.sample(x, y, rgb);
      for (int c = 0; c < 3; ++c)
        scene.img1_ext.raw_value()[p + c] = static_cast<T>(rgb[c]);

      const int l2 = top2(x, y);
      if (l2 < 0) {
        background.sample(x - bg_tx, y - bg_ty, rgb);
      } else {
        double sx, sy;
        layers[static_cast<size_t>(l2)].to_frame1(x, y, sx, sy);
        layers[static_cast<size_t>(l2)].tex.sample(sx, sy, rgb);
      }
      for (int c = 0; c < 3; ++c)
        scene.img2_ext.raw_value()[p + c] = static_cast<T>(rgb[c]);
    }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double ex = x + m, ey = y + m;
      const size_t p = static_cast<size_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) {
        scene.img1.raw_value()[p * 3 + c] =
            scene.img1_ext.data()[((static_cast<size_t>(y) + m) * ew + x + m) * 3 + c];
        scene.img2.raw_value()[p * 3 + c] =
            scene.img2_ext.data()[((static_cast<size_t>(y) + m) * ew + x + m) * 3 + c];
      }

      const int l1 = top1(ex, ey);
      double dx = bg_tx, dy = bg_ty;
      if (l1 >= 0) layers[static_cast<size_t>(l1)].displacement(ex, ey, dx, dy);
      scene.flow_gt.raw_value()[p * 2] = static_cast<T>(dx);
      scene.flow_gt.raw_value()[p * 2 + 1] = static_cast<T>(dy);

      // Visible iff the target stays inside the crop and every bilinear
      // neighbor of the target still belongs to this pixel's layer.
      const double qx = ex + dx, qy = ey + dy;
      bool visible = qx - m >= 0 && qx - m <= w - 1 && qy - m >= 0 && qy - m <= h - 1;
      if (visible) {
        const int x0 = static_cast<int>(std::floor(qx));
        const int y0 = static_cast<int>(std::floor(qy));
        for (int ny = y0; ny <= y0 + 1 && visible; ++ny)
          for (int nx = x0; nx <= x0 + 1 && visible; ++nx)
            visible = top2(nx, ny) == l1;
      }
      scene.occlusion.raw_value()[p] = visible ? T(1) : T(0);
    }
  return scene;
}

// Deterministic synthetic corpus: scene k of a dataset is a pure function of
// (seed, k), so nothing needs materializing for training.
struct SceneDataset {
  uint64_t seed = 1;
  int count = 0;
  SceneParams params;

  void validate() const {
    APSFLOW_CHECK(count > 0, ContractError, "dataset: empty");
    params.validate();
  }

  template <typename T>
  SyntheticScene<T> scene(int index) const {
    APSFLOW_CHECK(index >= 0 && index < count, ContractError,
                  "dataset: index " << index << " out of range [0, " << count << ")");
    return generate_scene<T>(Rng::mix(seed, static_cast<uint64_t>(index)), params);
  }
};

}  // namespace apsflow
