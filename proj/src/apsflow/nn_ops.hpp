#pragma once

// Structured differentiable ops: convolution, pooling, resampling, warping
// and the local correlation volume. All image tensors are HWC row-major.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "ops.hpp"
#include "tensor.hpp"

namespace apsflow {

namespace detail {

// Patch matrix for convolution: one row per output pixel, columns ordered
// (ky, kx, cin). Out-of-bounds taps are zero.
template <typename T>
void im2col(const T* x, int h, int w, int cin, int kh, int kw, int stride,
            int dilation, int pad_h, int pad_w, int oh, int ow, T* col) {
  const size_t k = static_cast<size_t>(kh) * kw * cin;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* row = col + (static_cast<size_t>(oy) * ow + ox) * k;
      size_t c = 0;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad_h + ky * dilation;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad_w + kx * dilation;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
            std::fill(row + c, row + c + cin, T(0));
          } else {
            const T* src = x + (static_cast<size_t>(iy) * w + ix) * cin;
            std::copy(src, src + cin, row + c);
          }
          c += static_cast<size_t>(cin);
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int h, int w, int cin, int kh, int kw, int stride,
            int dilation, int pad_h, int pad_w, int oh, int ow, T* dx) {
  const size_t k = static_cast<size_t>(kh) * kw * cin;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const T* row = col + (static_cast<size_t>(oy) * ow + ox) * k;
      size_t c = 0;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad_h + ky * dilation;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad_w + kx * dilation;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
            T* dst = dx + (static_cast<size_t>(iy) * w + ix) * cin;
            for (int j = 0; j < cin; ++j) dst[j] += row[c + j];
          }
          c += static_cast<size_t>(cin);
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution with zero same-padding for odd kernels.
// x: (H, W, Cin), w: (KH, KW, Cin, Cout), b: (Cout).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int dilation = 1) {
  APSFLOW_CHECK(x.rank() == 3, ShapeError,
                "conv2d: input must be HWC, got " << shape_str(x.shape()));
  APSFLOW_CHECK(w.rank() == 4, ShapeError,
                "conv2d: weight must be (KH, KW, Cin, Cout), got "
                    << shape_str(w.shape()));
  const int h = x.dim(0), iw = x.dim(1), cin = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  APSFLOW_CHECK(w.dim(2) == cin, ShapeError,
                "conv2d: weight expects " << w.dim(2) << " input channels, image has "
                                          << cin);
  APSFLOW_CHECK(kh % 2 == 1 && kw % 2 == 1, ContractError,
                "conv2d: kernel dims must be odd, got " << kh << "x" << kw);
  APSFLOW_CHECK(b.rank() == 1 && b.dim(0) == cout, ShapeError,
                "conv2d: bias must be (" << cout << "), got " << shape_str(b.shape()));
  APSFLOW_CHECK(stride >= 1 && dilation >= 1, ContractError,
                "conv2d: stride and dilation must be >= 1");
  const int eff_kh = (kh - 1) * dilation + 1;
  const int eff_kw = (kw - 1) * dilation + 1;
  const int pad_h = (eff_kh - 1) / 2;
  const int pad_w = (eff_kw - 1) / 2;
  const int oh = (h + 2 * pad_h - eff_kh) / stride + 1;
  const int ow = (iw + 2 * pad_w - eff_kw) / stride + 1;
  const size_t m = static_cast<size_t>(oh) * ow;
  const size_t k = static_cast<size_t>(kh) * kw * cin;

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  std::vector<T> col(m * k);
  detail::im2col(x.data(), h, iw, cin, kh, kw, stride, dilation, pad_h, pad_w,
                 oh, ow, col.data());
  std::vector<T> value(m * cout);
  {
    Eigen::Map<const Mat> C(col.data(), static_cast<Eigen::Index>(m),
                            static_cast<Eigen::Index>(k));
    Eigen::Map<const Mat> W(w.data(), static_cast<Eigen::Index>(k), cout);
    Eigen::Map<Mat> O(value.data(), static_cast<Eigen::Index>(m), cout);
    O.noalias() = C * W;
    O.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), cout);
  }
  auto xi = x.impl();
  auto wi = w.impl();
  auto bi = b.impl();
  return make_result<T>(
      "conv2d", Shape{oh, ow, cout}, std::move(value), {x, w, b},
      [xi, wi, bi, h, iw, cin, kh, kw, cout, stride, dilation, pad_h, pad_w, oh,
       ow, m, k](TensorImpl<T>& out) {
        Eigen::Map<const Mat> G(out.grad.data(), static_cast<Eigen::Index>(m), cout);
        if (wi->requires_grad || bi->requires_grad) {
          if (bi->requires_grad) {
            // Fixed-order accumulation: a vectorized column reduction rounds
            // differently depending on buffer alignment, which breaks replay
            // determinism.
            T* db = bi->ensure_grad();
            const T* gv = out.grad.data();
            for (size_t r = 0; r < m; ++r)
              for (int j = 0; j < cout; ++j) db[j] += gv[r * cout + j];
          }
          if (wi->requires_grad) {
            std::vector<T> col(m * k);
            detail::im2col(xi->value.data(), h, iw, cin, kh, kw, stride, dilation,
                           pad_h, pad_w, oh, ow, col.data());
            Eigen::Map<const Mat> C(col.data(), static_cast<Eigen::Index>(m),
                                    static_cast<Eigen::Index>(k));
            Eigen::Map<Mat> dW(wi->ensure_grad(), static_cast<Eigen::Index>(k), cout);
            dW.noalias() += C.transpose() * G;
          }
        }
        if (xi->requires_grad) {
          std::vector<T> dcol(m * k);
          Eigen::Map<const Mat> W(wi->value.data(), static_cast<Eigen::Index>(k), cout);
          Eigen::Map<Mat>(dcol.data(), static_cast<Eigen::Index>(m),
                          static_cast<Eigen::Index>(k))
              .noalias() = G * W.transpose();
          detail::col2im(dcol.data(), h, iw, cin, kh, kw, stride, dilation, pad_h,
                         pad_w, oh, ow, xi->ensure_grad());
        }
      });
}

// Non-overlapping factor x factor average pooling.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int factor) {
  APSFLOW_CHECK(x.rank() == 3, ShapeError,
                "avg_pool: input must be HWC, got " << shape_str(x.shape()));
  APSFLOW_CHECK(factor >= 1, ContractError, "avg_pool: factor < 1");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  APSFLOW_CHECK(h % factor == 0 && w % factor == 0, ShapeError,
                "avg_pool: " << h << "x" << w << " not divisible by " << factor);
  const int oh = h / factor, ow = w / factor;
  const T inv = T(1) / T(factor * factor);
  const T* xv = x.data();
  std::vector<T> value(static_cast<size_t>(oh) * ow * c, T(0));
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      T* dst = value.data() + (static_cast<size_t>(oy) * ow + ox) * c;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) {
          const T* src =
              xv + (static_cast<size_t>(oy * factor + dy) * w + ox * factor + dx) * c;
          for (int k = 0; k < c; ++k) dst[k] += src[k];
        }
      for (int k = 0; k < c; ++k) dst[k] *= inv;
    }
  auto xi = x.impl();
  return make_result<T>("avg_pool", Shape{oh, ow, c}, std::move(value), {x},
                        [xi, w, c, factor, oh, ow, inv](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* gx = xi->ensure_grad();
                          for (int oy = 0; oy < oh; ++oy)
                            for (int ox = 0; ox < ow; ++ox) {
                              const T* go = g + (static_cast<size_t>(oy) * ow + ox) * c;
                              for (int dy = 0; dy < factor; ++dy)
                                for (int dx = 0; dx < factor; ++dx) {
                                  T* dst = gx + (static_cast<size_t>(oy * factor + dy) * w +
                                                 ox * factor + dx) *
                                                    c;
                                  for (int k = 0; k < c; ++k) dst[k] += go[k] * inv;
                                }
                            }
                        });
}

// Non-overlapping factor x factor max pooling; ties go to the first element
// in scan order.
template <typename T>
Tensor<T> max_pool(const Tensor<T>& x, int factor) {
  APSFLOW_CHECK(x.rank() == 3, ShapeError,
                "max_pool: input must be HWC, got " << shape_str(x.shape()));
  APSFLOW_CHECK(factor >= 1, ContractError, "max_pool: factor < 1");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  APSFLOW_CHECK(h % factor == 0 && w % factor == 0, ShapeError,
                "max_pool: " << h << "x" << w << " not divisible by " << factor);
  const int oh = h / factor, ow = w / factor;
  const T* xv = x.data();
  std::vector<T> value(static_cast<size_t>(oh) * ow * c);
  auto argmax = std::make_shared<std::vector<size_t>>(value.size());
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int k = 0; k < c; ++k) {
        T best = -std::numeric_limits<T>::infinity();
        size_t best_idx = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) {
            const size_t idx =
                (static_cast<size_t>(oy * factor + dy) * w + ox * factor + dx) * c + k;
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        const size_t o = (static_cast<size_t>(oy) * ow + ox) * c + k;
        value[o] = best;
        (*argmax)[o] = best_idx;
      }
  auto xi = x.impl();
  return make_result<T>("max_pool", Shape{oh, ow, c}, std::move(value), {x},
                        [xi, argmax](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* gx = xi->ensure_grad();
                          for (size_t o = 0; o < argmax->size(); ++o)
                            gx[(*argmax)[o]] += g[o];
                        });
}

// Nearest-neighbor resize to (oh, ow) with half-pixel centers.
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, int oh, int ow) {
  APSFLOW_CHECK(x.rank() == 3, ShapeError,
                "resize_nearest: input must be HWC, got " << shape_str(x.shape()));
  APSFLOW_CHECK(oh >= 1 && ow >= 1, ContractError, "resize_nearest: bad target size");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const double sy = static_cast<double>(h) / oh;
  const double sx = static_cast<double>(w) / ow;
  const T* xv = x.data();
  std::vector<T> value(static_cast<size_t>(oh) * ow * c);
  auto src_of = std::make_shared<std::vector<size_t>>(static_cast<size_t>(oh) * ow);
  for (int oy = 0; oy < oh; ++oy) {
    const int iy = std::clamp(static_cast<int>(std::floor((oy + 0.5) * sy)), 0, h - 1);
    for (int ox = 0; ox < ow; ++ox) {
      const int ix = std::clamp(static_cast<int>(std::floor((ox + 0.5) * sx)), 0, w - 1);
      const size_t src = static_cast<size_t>(iy) * w + ix;
      (*src_of)[static_cast<size_t>(oy) * ow + ox] = src;
      std::copy(xv + src * c, xv + (src + 1) * c,
                value.data() + (static_cast<size_t>(oy) * ow + ox) * c);
    }
  }
  auto xi = x.impl();
  return make_result<T>("resize_nearest", Shape{oh, ow, c}, std::move(value), {x},
                        [xi, c, src_of](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* gx = xi->ensure_grad();
                          for (size_t p = 0; p < src_of->size(); ++p)
                            for (int k = 0; k < c; ++k)
                              gx[(*src_of)[p] * c + k] += g[p * c + k];
                        });
}

// Bilinear resize to (oh, ow) with half-pixel centers and edge clamping.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int oh, int ow) {
  APSFLOW_CHECK(x.rank() == 3, ShapeError,
                "resize_bilinear: input must be HWC, got " << shape_str(x.shape()));
  APSFLOW_CHECK(oh >= 1 && ow >= 1, ContractError, "resize_bilinear: bad target size");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const T sy = T(h) / T(oh), sx = T(w) / T(ow);
  const T* xv = x.data();
  std::vector<T> value(static_cast<size_t>(oh) * ow * c);
  // (neighbor indices, weights) per output pixel, reused by the backward pass.
  struct Tap {
    int y0, y1, x0, x1;
    T fy, fx;
  };
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<size_t>(oh) * ow);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      T py = std::clamp((T(oy) + T(0.5)) * sy - T(0.5), T(0), T(h - 1));
      T px = std::clamp((T(ox) + T(0.5)) * sx - T(0.5), T(0), T(w - 1));
      Tap t;
      t.y0 = static_cast<int>(std::floor(py));
      t.x0 = static_cast<int>(std::floor(px));
      t.y1 = std::min(t.y0 + 1, h - 1);
      t.x1 = std::min(t.x0 + 1, w - 1);
      t.fy = py - T(t.y0);
      t.fx = px - T(t.x0);
      (*taps)[static_cast<size_t>(oy) * ow + ox] = t;
      T* dst = value.data() + (static_cast<size_t>(oy) * ow + ox) * c;
      const T* v00 = xv + (static_cast<size_t>(t.y0) * w + t.x0) * c;
      const T* v01 = xv + (static_cast<size_t>(t.y0) * w + t.x1) * c;
      const T* v10 = xv + (static_cast<size_t>(t.y1) * w + t.x0) * c;
      const T* v11 = xv + (static_cast<size_t>(t.y1) * w + t.x1) * c;
      for (int k = 0; k < c; ++k)
        dst[k] = (T(1) - t.fy) * ((T(1) - t.fx) * v00[k] + t.fx * v01[k]) +
                 t.fy * ((T(1) - t.fx) * v10[k] + t.fx * v11[k]);
    }
  auto xi = x.impl();
  return make_result<T>(
      "resize_bilinear", Shape{oh, ow, c}, std::move(value), {x},
      [xi, w, c, oh, ow, taps](TensorImpl<T>& out) {
        const T* g = out.grad.data();
        T* gx = xi->ensure_grad();
        for (size_t p = 0; p < taps->size(); ++p) {
          const Tap& t = (*taps)[p];
          const T* go = g + p * c;
          T* g00 = gx + (static_cast<size_t>(t.y0) * w + t.x0) * c;
          T* g01 = gx + (static_cast<size_t>(t.y0) * w + t.x1) * c;
          T* g10 = gx + (static_cast<size_t>(t.y1) * w + t.x0) * c;
          T* g11 = gx + (static_cast<size_t>(t.y1) * w + t.x1) * c;
          for (int k = 0; k < c; ++k) {
            g00[k] += go[k] * (T(1) - t.fy) * (T(1) - t.fx);
            g01[k] += go[k] * (T(1) - t.fy) * t.fx;
            g10[k] += go[k] * t.fy * (T(1) - t.fx);
            g11[k] += go[k] * t.fy * t.fx;
          }
        }
      });
}

enum class WarpBorder { kClamp, kZero };

// Samples src at (p + offset + flow(p)) with bilinear interpolation. The
// output grid comes from the flow field; src may be larger (dilated canvas
// warping passes the crop margin as offset). kClamp clamps sample positions
// to the source rect, kZero treats outside content as zero. Gradients flow to
// both src and flow; clamped positions contribute no flow gradient.
template <typename T>
Tensor<T> warp_bilinear(const Tensor<T>& src, const Tensor<T>& flow,
                        WarpBorder border = WarpBorder::kClamp, int offset = 0) {
  APSFLOW_CHECK(src.rank() == 3, ShapeError,
                "warp_bilinear: src must be HWC, got " << shape_str(src.shape()));
  APSFLOW_CHECK(flow.rank() == 3 && flow.dim(2) == 2, ShapeError,
                "warp_bilinear: flow must be (H, W, 2), got "
                    << shape_str(flow.shape()));
  const int hs = src.dim(0), ws = src.dim(1), c = src.dim(2);
  const int h = flow.dim(0), w = flow.dim(1);
  const T* sv = src.data();
  const T* fv = flow.data();
  std::vector<T> value(static_cast<size_t>(h) * w * c, T(0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t p = static_cast<size_t>(y) * w + x;
      T px = T(x + offset) + fv[p * 2 + 0];
      T py = T(y + offset) + fv[p * 2 + 1];
      // Non-finite positions contribute nothing; the flow itself still
      // reaches the loss checks, so a NaN aborts there instead of indexing
      // with an undefined cast here.
      if (!std::isfinite(static_cast<double>(px)) ||
          !std::isfinite(static_cast<double>(py)))
        continue;
      if (border == WarpBorder::kClamp) {
        px = std::clamp(px, T(0), T(ws - 1));
        py = std::clamp(py, T(0), T(hs - 1));
      } else if (px <= T(-1) || px >= T(ws) || py <= T(-1) || py >= T(hs)) {
        continue;
      }
      const int x0 = static_cast<int>(std::floor(px));
      const int y0 = static_cast<int>(std::floor(py));
      const T fx = px - T(x0), fy = py - T(y0);
      T* dst = value.data() + p * c;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          int ny = y0 + dy, nx = x0 + dx;
          if (border == WarpBorder::kClamp) {
            ny = std::clamp(ny, 0, hs - 1);
            nx = std::clamp(nx, 0, ws - 1);
          } else if (ny < 0 || ny >= hs || nx < 0 || nx >= ws) {
            continue;
          }
          const T wgt = (dy ? fy : T(1) - fy) * (dx ? fx : T(1) - fx);
          const T* nb = sv + (static_cast<size_t>(ny) * ws + nx) * c;
          for (int k = 0; k < c; ++k) dst[k] += wgt * nb[k];
        }
    }
  auto si = src.impl();
  auto fi = flow.impl();
  return make_result<T>(
      "warp_bilinear", Shape{h, w, c}, std::move(value), {src, flow},
      [si, fi, hs, ws, c, h, w, border, offset](TensorImpl<T>& out) {
        const T* g = out.grad.data();
        const T* sv = si->value.data();
        const T* fv = fi->value.data();
        T* gs = si->requires_grad ? si->ensure_grad() : nullptr;
        T* gf = fi->requires_grad ? fi->ensure_grad() : nullptr;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const size_t p = static_cast<size_t>(y) * w + x;
            const T rx = T(x + offset) + fv[p * 2 + 0];
            const T ry = T(y + offset) + fv[p * 2 + 1];
            if (!std::isfinite(static_cast<double>(rx)) ||
                !std::isfinite(static_cast<double>(ry)))
              continue;
            T px = rx, py = ry;
            bool clamped_x = false, clamped_y = false;
            if (border == WarpBorder::kClamp) {
              px = std::clamp(px, T(0), T(ws - 1));
              py = std::clamp(py, T(0), T(hs - 1));
              clamped_x = px != rx;
              clamped_y = py != ry;
            } else if (px <= T(-1) || px >= T(ws) || py <= T(-1) || py >= T(hs)) {
              continue;
            }
            const int x0 = static_cast<int>(std::floor(px));
            const int y0 = static_cast<int>(std::floor(py));
            const T fx = px - T(x0), fy = py - T(y0);
            const T* go = g + p * c;
            T dpx = T(0), dpy = T(0);
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                int ny = y0 + dy, nx = x0 + dx;
                bool valid = true;
                if (border == WarpBorder::kClamp) {
                  ny = std::clamp(ny, 0, hs - 1);
                  nx = std::clamp(nx, 0, ws - 1);
                } else if (ny < 0 || ny >= hs || nx < 0 || nx >= ws) {
                  valid = false;
                }
                const T wy = dy ? fy : T(1) - fy;
                const T wx = dx ? fx : T(1) - fx;
                const T* nb =
                    valid ? sv + (static_cast<size_t>(ny) * ws + nx) * c : nullptr;
                T dot = T(0);
                if (valid)
                  for (int k = 0; k < c; ++k) dot += go[k] * nb[k];
                dpx += dot * wy * (dx ? T(1) : T(-1));
                dpy += dot * wx * (dy ? T(1) : T(-1));
                if (gs && valid) {
                  T* dst = gs + (static_cast<size_t>(ny) * ws + nx) * c;
                  const T wgt = wy * wx;
                  for (int k = 0; k < c; ++k) dst[k] += wgt * go[k];
                }
              }
            if (gf) {
              if (!clamped_x) gf[p * 2 + 0] += dpx;
              if (!clamped_y) gf[p * 2 + 1] += dpy;
            }
          }
      });
}

// Local correlation volume: out(p, j) is the feature dot product between
// f1 at p and f2 at p + o_j for displacements |o|inf <= radius, o_j scanned
// row-major (dy outer, dx inner). Out-of-bounds pairs are zero.
template <typename T>
Tensor<T> corr_volume(const Tensor<T>& f1, const Tensor<T>& f2, int radius) {
  APSFLOW_CHECK(f1.rank() == 3 && f2.rank() == 3, ShapeError,
                "corr_volume: features must be HWC");
  APSFLOW_CHECK(f1.same_shape(f2), ShapeError,
                "corr_volume: shape mismatch " << shape_str(f1.shape()) << " vs "
                                               << shape_str(f2.shape()));
  APSFLOW_CHECK(radius >= 0, ContractError, "corr_volume: negative radius");
  const int h = f1.dim(0), w = f1.dim(1), c = f1.dim(2);
  const int side = 2 * radius + 1;
  const int nd = side * side;
  const T* a = f1.data();
  const T* b = f2.data();
  std::vector<T> value(static_cast<size_t>(h) * w * nd, T(0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const T* ap = a + (static_cast<size_t>(y) * w + x) * c;
      T* dst = value.data() + (static_cast<size_t>(y) * w + x) * nd;
      for (int dy = -radius; dy <= radius; ++dy) {
        const int qy = y + dy;
        if (qy < 0 || qy >= h) continue;
        for (int dx = -radius; dx <= radius; ++dx) {
          const int qx = x + dx;
          if (qx < 0 || qx >= w) continue;
          const T* bq = b + (static_cast<size_t>(qy) * w + qx) * c;
          T dot = T(0);
          for (int k = 0; k < c; ++k) dot += ap[k] * bq[k];
          dst[(dy + radius) * side + (dx + radius)] = dot;
        }
      }
    }
  auto ai = f1.impl();
  auto bi = f2.impl();
  return make_result<T>(
      "corr_volume", Shape{h, w, nd}, std::move(value), {f1, f2},
      [ai, bi, h, w, c, radius, side, nd](TensorImpl<T>& out) {
        const T* g = out.grad.data();
        const T* a = ai->value.data();
        const T* b = bi->value.data();
        T* ga = ai->requires_grad ? ai->ensure_grad() : nullptr;
        T* gb = bi->requires_grad ? bi->ensure_grad() : nullptr;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const size_t p = static_cast<size_t>(y) * w + x;
            const T* gp = g + p * nd;
            for (int dy = -radius; dy <= radius; ++dy) {
              const int qy = y + dy;
              if (qy < 0 || qy >= h) continue;
              for (int dx = -radius; dx <= radius; ++dx) {
                const int qx = x + dx;
                if (qx < 0 || qx >= w) continue;
                const T gj = gp[(dy + radius) * side + (dx + radius)];
                if (gj == T(0)) continue;
                const size_t q = static_cast<size_t>(qy) * w + qx;
                if (ga)
                  for (int k = 0; k < c; ++k) ga[p * c + k] += gj * b[q * c + k];
                if (gb)
                  for (int k = 0; k < c; ++k) gb[q * c + k] += gj * a[p * c + k];
              }
            }
          }
      });
}

// Per-pixel L2 feature normalization composed from primitives.
template <typename T>
Tensor<T> normalize_l2(const Tensor<T>& x, T eps = T(1e-8)) {
  auto inv_norm = pow_scalar(add_scalar(channel_sum(square(x)), eps), T(-0.5));
  return mul(x, broadcast_channel(inv_norm, x.shape().back()));
}

}  // namespace apsflow
