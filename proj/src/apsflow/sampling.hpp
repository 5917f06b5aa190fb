#pragma once

// Adaptive pyramid sampling: probability-kernel generation, content-aware
// pooling (scatter semantics), adaptive flow upsampling (gather semantics)
// and the conventional baselines they replace.
//
// Kernel geometry, shared by every operator here: the 9 kernel channels of a
// pixel p index the 3x3 low-res window centered on floor(p/r), scanned
// row-major, so channel j = (jy*3 + jx) addresses low-res cell
// (floor(py/r) + jy - 1, floor(px/r) + jx - 1).

#include <cmath>
#include <vector>

#include "nn_ops.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace apsflow {

enum class MapRole { kCapG, kAfuU };

// Per-pixel sampling controls split out of an 11-channel prediction:
// 9 kernel scores, a score shift sigma and a temperature control tau.
template <typename T>
struct SamplingMap {
  Tensor<T> scores;  // (H, W, 9)
  Tensor<T> sigma;   // (H, W, 1)
  Tensor<T> tau;     // (H, W, 1)
  MapRole role = MapRole::kCapG;
};

template <typename T>
SamplingMap<T> split_sampling_map(const Tensor<T>& raw, MapRole role) {
  APSFLOW_CHECK(raw.rank() == 3 && raw.dim(2) == 11, ShapeError,
                "sampling map must have 11 channels, got " << shape_str(raw.shape()));
  SamplingMap<T> m;
  m.scores = slice_channels(raw, 0, 9);
  m.sigma = slice_channels(raw, 9, 1);
  m.tau = slice_channels(raw, 10, 1);
  m.role = role;
  return m;
}

// Probability kernels k_p(j) = softmax_j((scores(j,p) - |sigma(p)|) /
// (sigmoid(tau(p)) + rho)). Deterministic: no noise term, the temperature
// alone controls sharpness. Composed from primitives so gradients w.r.t.
// scores and tau come from the op layer.
template <typename T>
Tensor<T> adaptive_gumbel_softmax(const SamplingMap<T>& map, T rho = T(0.01)) {
  APSFLOW_CHECK(rho > T(0), ContractError, "adaptive_gumbel_softmax: rho <= 0");
  auto shifted = sub(map.scores, broadcast_channel(abs(map.sigma), 9));
  auto temperature = broadcast_channel(add_scalar(sigmoid(map.tau), rho), 9);
  return softmax_channel(div(shifted, temperature));
}

// Validation helper for kernel fields built outside adaptive_gumbel_softmax.
template <typename T>
void check_kernel_field(const Tensor<T>& kernels, T tol = T(1e-6)) {
  APSFLOW_CHECK(kernels.rank() == 3 && kernels.dim(2) == 9, ShapeError,
                "kernel field must be (H, W, 9), got " << shape_str(kernels.shape()));
  const T* k = kernels.data();
  const size_t rows = kernels.size() / 9;
  for (size_t r = 0; r < rows; ++r) {
    T sum = T(0);
    for (int j = 0; j < 9; ++j) {
      const T v = k[r * 9 + j];
      APSFLOW_CHECK(v >= T(0) && v <= T(1), ContractError,
                    "kernel entry " << v << " outside [0, 1] at row " << r);
      sum += v;
    }
    APSFLOW_CHECK(std::abs(sum - T(1)) <= tol, ContractError,
                  "kernel row " << r << " sums to " << sum);
  }
}

// Content-aware pooling. Semantics are a scatter: every high-res pixel p
// distributes kernels(p, j) * feature(p) into its 3x3 low-res neighborhood,
// out-of-bounds targets dropped, no renormalization. Implemented as a gather
// per output cell that visits contributing pixels in increasing row-major
// order, which reproduces the scatter's per-cell accumulation order exactly.
template <typename T>
Tensor<T> cap_pool(const Tensor<T>& feature, const Tensor<T>& kernels, int r) {
  APSFLOW_CHECK(feature.rank() == 3, ShapeError,
                "cap_pool: feature must be HWC, got " << shape_str(feature.shape()));
  APSFLOW_CHECK(kernels.rank() == 3 && kernels.dim(2) == 9, ShapeError,
                "cap_pool: kernels must be (H, W, 9), got " << shape_str(kernels.shape()));
  const int h = feature.dim(0), w = feature.dim(1), c = feature.dim(2);
  APSFLOW_CHECK(kernels.dim(0) == h && kernels.dim(1) == w, ContractError,
                "cap_pool: kernel field " << shape_str(kernels.shape())
                                          << " does not match feature "
                                          << shape_str(feature.shape()));
  APSFLOW_CHECK(r >= 1, ContractError, "cap_pool: r < 1");
  APSFLOW_CHECK(h % r == 0 && w % r == 0, ContractError,
                "cap_pool: " << h << "x" << w << " not divisible by r=" << r);
  const int oh = h / r, ow = w / r;
  const T* f = feature.data();
  const T* kf = kernels.data();
  std::vector<T> value(static_cast<size_t>(oh) * ow * c, T(0));
  for (int qy = 0; qy < oh; ++qy) {
    const int py0 = std::max(0, r * (qy - 1));
    const int py1 = std::min(h, r * (qy + 2));
    for (int qx = 0; qx < ow; ++qx) {
      const int px0 = std::max(0, r * (qx - 1));
      const int px1 = std::min(w, r * (qx + 2));
      T* dst = value.data() + (static_cast<size_t>(qy) * ow + qx) * c;
      for (int py = py0; py < py1; ++py) {
        const int jy = qy - py / r + 1;
        for (int px = px0; px < px1; ++px) {
          const int j = jy * 3 + (qx - px / r + 1);
          const size_t p = static_cast<size_t>(py) * w + px;
          const T wgt = kf[p * 9 + j];
          const T* src = f + p * c;
          for (int k = 0; k < c; ++k) dst[k] += wgt * src[k];
        }
      }
    }
  }
  auto fi = feature.impl();
  auto ki = kernels.impl();
  return make_result<T>(
      "cap_pool", Shape{oh, ow, c}, std::move(value), {feature, kernels},
      [fi, ki, h, w, c, r, oh, ow](TensorImpl<T>& out) {
        const T* g = out.grad.data();
        const T* f = fi->value.data();
        const T* kf = ki->value.data();
        T* gf = fi->requires_grad ? fi->ensure_grad() : nullptr;
        T* gk = ki->requires_grad ? ki->ensure_grad() : nullptr;
        for (int py = 0; py < h; ++py) {
          const int p0y = py / r;
          for (int px = 0; px < w; ++px) {
            const int p0x = px / r;
            const size_t p = static_cast<size_t>(py) * w + px;
            for (int j = 0; j < 9; ++j) {
              const int qy = p0y + j / 3 - 1;
              const int qx = p0x + j % 3 - 1;
              if (qy < 0 || qy >= oh || qx < 0 || qx >= ow) continue;
              const T* gq = g + (static_cast<size_t>(qy) * ow + qx) * c;
              if (gf) {
                const T wgt = kf[p * 9 + j];
                for (int k = 0; k < c; ++k) gf[p * c + k] += wgt * gq[k];
              }
              if (gk) {
                T dot = T(0);
                for (int k = 0; k < c; ++k) dot += f[p * c + k] * gq[k];
                gk[p * 9 + j] += dot;
              }
            }
          }
        }
      });
}

// CAP variant whose per-cell output is divided by the total kernel mass the
// cell received (experiments only). Composed as cap_pool(F) / cap_pool(1).
template <typename T>
Tensor<T> cap_pool_normalized(const Tensor<T>& feature, const Tensor<T>& kernels,
                              int r) {
  auto ones = Tensor<T>::full(Shape{feature.dim(0), feature.dim(1), 1}, T(1));
  auto mass = cap_pool(ones, kernels, r);
  return div(cap_pool(feature, kernels, r),
             broadcast_channel(mass, feature.dim(2)));
}

// Adaptive flow upsampling. Gather: out(p) = sum_j u_p(j) * flow(q_j) over the
// in-bounds cells of the 3x3 low-res neighborhood of floor(p/r), with the
// kernel renormalized over those cells. scale_values multiplies the result by
// r so flow magnitudes track the resolution change.
template <typename T>
Tensor<T> afu_upsample(const Tensor<T>& flow, const Tensor<T>& kernels, int r,
                       bool scale_values) {
  APSFLOW_CHECK(flow.rank() == 3, ShapeError,
                "afu_upsample: flow must be HWC, got " << shape_str(flow.shape()));
  APSFLOW_CHECK(kernels.rank() == 3 && kernels.dim(2) == 9, ShapeError,
                "afu_upsample: kernels must be (H, W, 9), got "
                    << shape_str(kernels.shape()));
  APSFLOW_CHECK(r >= 1, ContractError, "afu_upsample: r < 1");
  const int lh = flow.dim(0), lw = flow.dim(1), c = flow.dim(2);
  const int h = kernels.dim(0), w = kernels.dim(1);
  APSFLOW_CHECK(h == lh * r && w == lw * r, ContractError,
                "afu_upsample: kernel field " << shape_str(kernels.shape())
                                              << " does not match flow "
                                              << shape_str(flow.shape())
                                              << " at r=" << r);
  const T* fv = flow.data();
  const T* kf = kernels.data();
  std::vector<T> value(static_cast<size_t>(h) * w * c);
  std::vector<T> acc(static_cast<size_t>(c));
  for (int y = 0; y < h; ++y) {
    const int p0y = y / r;
    for (int x = 0; x < w; ++x) {
      const int p0x = x / r;
      const size_t p = static_cast<size_t>(y) * w + x;
      std::fill(acc.begin(), acc.end(), T(0));
      T wsum = T(0);
      for (int j = 0; j < 9; ++j) {
        const int qy = p0y + j / 3 - 1;
        const int qx = p0x + j % 3 - 1;
        if (qy < 0 || qy >= lh || qx < 0 || qx >= lw) continue;
        const T wgt = kf[p * 9 + j];
        wsum += wgt;
        const T* src = fv + (static_cast<size_t>(qy) * lw + qx) * c;
        for (int k = 0; k < c; ++k) acc[k] += wgt * src[k];
      }
      APSFLOW_CHECK(wsum > T(0), ContractError,
                    "afu_upsample: zero kernel mass over valid neighbors at ("
                        << y << ", " << x << ")");
      for (int k = 0; k < c; ++k) {
        T res = acc[k] / wsum;
        if (scale_values) res *= T(r);
        value[p * c + k] = res;
      }
    }
  }
  auto fi = flow.impl();
  auto ki = kernels.impl();
  return make_result<T>(
      "afu_upsample", Shape{h, w, c}, std::move(value), {flow, kernels},
      [fi, ki, lh, lw, c, h, w, r, scale_values](TensorImpl<T>& out) {
        const T* g = out.grad.data();
        const T* ov = out.value.data();
        const T* fv = fi->value.data();
        const T* kf = ki->value.data();
        T* gfl = fi->requires_grad ? fi->ensure_grad() : nullptr;
        T* gk = ki->requires_grad ? ki->ensure_grad() : nullptr;
        const T s = scale_values ? T(r) : T(1);
        for (int y = 0; y < h; ++y) {
          const int p0y = y / r;
          for (int x = 0; x < w; ++x) {
            const int p0x = x / r;
            const size_t p = static_cast<size_t>(y) * w + x;
            T wsum = T(0);
            for (int j = 0; j < 9; ++j) {
              const int qy = p0y + j / 3 - 1;
              const int qx = p0x + j % 3 - 1;
              if (qy < 0 || qy >= lh || qx < 0 || qx >= lw) continue;
              wsum += kf[p * 9 + j];
            }
            for (int j = 0; j < 9; ++j) {
              const int qy = p0y + j / 3 - 1;
              const int qx = p0x + j % 3 - 1;
              if (qy < 0 || qy >= lh || qx < 0 || qx >= lw) continue;
              const size_t q = static_cast<size_t>(qy) * lw + qx;
              const T wgt = kf[p * 9 + j];
              T dk = T(0);
              for (int k = 0; k < c; ++k) {
                const T go = g[p * c + k];
                if (gfl) gfl[q * c + k] += go * wgt / wsum * s;
                dk += go * (s * fv[q * c + k] - ov[p * c + k]) / wsum;
              }
              if (gk) gk[p * 9 + j] += dk;
            }
          }
        }
      });
}

enum class PoolMode { kAverage, kMax, kStridedConv };

// Conventional pooling baselines swapped in for CAP during ablations. The
// strided-conv mode (SIC) expects learned (3, 3, C, C) weights and a bias.
template <typename T>
Tensor<T> baseline_pool(const Tensor<T>& feature, int r, PoolMode mode,
                        const Tensor<T>* sic_weight = nullptr,
                        const Tensor<T>* sic_bias = nullptr) {
  switch (mode) {
    case PoolMode::kAverage:
      return avg_pool(feature, r);
    case PoolMode::kMax:
      return max_pool(feature, r);
    case PoolMode::kStridedConv: {
      APSFLOW_CHECK(sic_weight && sic_bias, ContractError,
                    "baseline_pool: strided_conv mode needs weights");
      return conv2d(feature, *sic_weight, *sic_bias, r, 1);
    }
  }
  throw ContractError("baseline_pool: unknown mode");
}

// Conventional upsampling baseline: align-corners-false bilinear, optionally
// scaling flow magnitudes by r.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& flow, int r, bool scale_values) {
  APSFLOW_CHECK(flow.rank() == 3, ShapeError,
                "bilinear_upsample: flow must be HWC, got " << shape_str(flow.shape()));
  APSFLOW_CHECK(r >= 1, ContractError, "bilinear_upsample: r < 1");
  auto up = resize_bilinear(flow, flow.dim(0) * r, flow.dim(1) * r);
  return scale_values ? mul_scalar(up, T(r)) : up;
}

}  // namespace apsflow
