#pragma once

// Differentiable elementwise, reduction, shape and matmul primitives plus a
// string-keyed dispatcher. Every op builds its forward value eagerly and, when
// a tape is active and an input wants gradients, registers a closure that
// accumulates input partials from the output gradient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tensor.hpp"

namespace apsflow {

namespace detail {

// Elementwise binary op over same-shape operands or a scalar (size-1) second
// operand broadcast over the first.
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b,
                    F fwd, DA da, DB db) {
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  if (!a_scalar && !b_scalar) {
    APSFLOW_CHECK(a.same_shape(b), ShapeError,
                  op << ": shape mismatch " << shape_str(a.shape()) << " vs "
                     << shape_str(b.shape()));
  }
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  const size_t n = shape_numel(out_shape);
  const T* av = a.data();
  const T* bv = b.data();
  std::vector<T> value(n);
  for (size_t i = 0; i < n; ++i) {
    const T x = a_scalar ? av[0] : av[i];
    const T y = b_scalar ? bv[0] : bv[i];
    value[i] = fwd(x, y);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result<T>(op, out_shape, std::move(value), {a, b},
                        [ai, bi, a_scalar, b_scalar, da, db, n](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          const T* ov = out.value.data();
                          const T* av = ai->value.data();
                          const T* bv = bi->value.data();
                          T* ga = ai->requires_grad ? ai->ensure_grad() : nullptr;
                          T* gb = bi->requires_grad ? bi->ensure_grad() : nullptr;
                          for (size_t i = 0; i < n; ++i) {
                            const T x = a_scalar ? av[0] : av[i];
                            const T y = b_scalar ? bv[0] : bv[i];
                            if (ga) ga[a_scalar ? 0 : i] += g[i] * da(x, y, ov[i]);
                            if (gb) gb[b_scalar ? 0 : i] += g[i] * db(x, y, ov[i]);
                          }
                        });
}

// Elementwise unary op; dfdx receives (x, fx).
template <typename T, typename F, typename D>
Tensor<T> unary_op(const char* op, const Tensor<T>& a, F fwd, D dfdx) {
  const size_t n = a.size();
  const T* av = a.data();
  std::vector<T> value(n);
  for (size_t i = 0; i < n; ++i) value[i] = fwd(av[i]);
  auto ai = a.impl();
  return make_result<T>(op, a.shape(), std::move(value), {a},
                        [ai, dfdx, n](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          const T* ov = out.value.data();
                          const T* av = ai->value.data();
                          T* ga = ai->ensure_grad();
                          for (size_t i = 0; i < n; ++i)
                            ga[i] += g[i] * dfdx(av[i], ov[i]);
                        });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>("add", a, b,
                              [](T x, T y) { return x + y; },
                              [](T, T, T) { return T(1); },
                              [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>("sub", a, b,
                              [](T x, T y) { return x - y; },
                              [](T, T, T) { return T(1); },
                              [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>("mul", a, b,
                              [](T x, T y) { return x * y; },
                              [](T, T y, T) { return y; },
                              [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>("div", a, b,
                              [](T x, T y) { return x / y; },
                              [](T, T y, T) { return T(1) / y; },
                              [](T, T y, T fx) { return -fx / y; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary_op<T>("add_scalar", a,
                             [c](T x) { return x + c; },
                             [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return detail::unary_op<T>("mul_scalar", a,
                             [c](T x) { return x * c; },
                             [c](T, T) { return c; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  // Subgradient 0 at the kink.
  return detail::unary_op<T>("abs", a,
                             [](T x) { return std::abs(x); },
                             [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary_op<T>("square", a,
                             [](T x) { return x * x; },
                             [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary_op<T>("sqrt", a,
                             [](T x) { return std::sqrt(x); },
                             [](T, T fx) { return T(0.5) / fx; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op<T>("exp", a,
                             [](T x) { return std::exp(x); },
                             [](T, T fx) { return fx; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary_op<T>("log", a,
                             [](T x) { return std::log(x); },
                             [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op<T>("sigmoid", a,
                             [](T x) {
                               return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                                : std::exp(x) / (T(1) + std::exp(x));
                             },
                             [](T, T fx) { return fx * (T(1) - fx); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return detail::unary_op<T>("leaky_relu", a,
                             [slope](T x) { return x >= T(0) ? x : slope * x; },
                             [slope](T x, T) { return x >= T(0) ? T(1) : slope; });
}

// x^p for x >= 0 (used by the robust penalty where the base is |x| + eps > 0).
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T p) {
  return detail::unary_op<T>("pow_scalar", a,
                             [p](T x) { return std::pow(x, p); },
                             [p](T x, T fx) { return p * fx / x; });
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a) {
  const size_t n = a.size();
  const T* av = a.data();
  T acc = T(0);
  for (size_t i = 0; i < n; ++i) acc += av[i];
  auto ai = a.impl();
  return make_result<T>("reduce_sum", Shape{1}, std::vector<T>{acc}, {a},
                        [ai, n](TensorImpl<T>& out) {
                          const T g = out.grad[0];
                          T* ga = ai->ensure_grad();
                          for (size_t i = 0; i < n; ++i) ga[i] += g;
                        });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a) {
  APSFLOW_CHECK(a.size() > 0, ContractError, "reduce_mean: empty tensor");
  return mul_scalar(reduce_sum(a), T(1) / T(a.size()));
}

namespace detail {

// Interprets a tensor as rows x channels where channels is the innermost
// dimension, i.e. HWC maps to (H*W) x C.
template <typename T>
std::pair<size_t, size_t> rows_channels(const Tensor<T>& a) {
  APSFLOW_CHECK(a.rank() >= 1, ShapeError, "expected rank >= 1, got rank 0");
  const size_t c = static_cast<size_t>(a.shape().back());
  return {a.size() / c, c};
}

}  // namespace detail

// Sum over the innermost (channel) dimension; output keeps one channel.
template <typename T>
Tensor<T> channel_sum(const Tensor<T>& a) {
  auto [rows, c] = detail::rows_channels(a);
  Shape out_shape = a.shape();
  out_shape.back() = 1;
  const T* av = a.data();
  std::vector<T> value(rows);
  for (size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (size_t j = 0; j < c; ++j) acc += av[r * c + j];
    value[r] = acc;
  }
  auto ai = a.impl();
  return make_result<T>("channel_sum", std::move(out_shape), std::move(value), {a},
                        [ai, rows, c = c](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* ga = ai->ensure_grad();
                          for (size_t r = 0; r < rows; ++r)
                            for (size_t j = 0; j < c; ++j) ga[r * c + j] += g[r];
                        });
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& a) {
  auto [rows, c] = detail::rows_channels(a);
  (void)rows;
  return mul_scalar(channel_sum(a), T(1) / T(c));
}

// Softmax over the innermost (channel) dimension, numerically shifted.
template <typename T>
Tensor<T> softmax_channel(const Tensor<T>& a) {
  auto [rows, c] = detail::rows_channels(a);
  const T* av = a.data();
  std::vector<T> value(a.size());
  for (size_t r = 0; r < rows; ++r) {
    const T* x = av + r * c;
    T m = x[0];
    for (size_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    T z = T(0);
    for (size_t j = 0; j < c; ++j) {
      value[r * c + j] = std::exp(x[j] - m);
      z += value[r * c + j];
    }
    const T inv = T(1) / z;
    for (size_t j = 0; j < c; ++j) value[r * c + j] *= inv;
  }
  auto ai = a.impl();
  return make_result<T>("softmax_channel", a.shape(), std::move(value), {a},
                        [ai, rows, c = c](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          const T* s = out.value.data();
                          T* ga = ai->ensure_grad();
                          for (size_t r = 0; r < rows; ++r) {
                            const T* gr = g + r * c;
                            const T* sr = s + r * c;
                            T dot = T(0);
                            for (size_t j = 0; j < c; ++j) dot += gr[j] * sr[j];
                            for (size_t j = 0; j < c; ++j)
                              ga[r * c + j] += sr[j] * (gr[j] - dot);
                          }
                        });
}

// Repeats a single-channel tensor across `channels` output channels.
template <typename T>
Tensor<T> broadcast_channel(const Tensor<T>& a, int channels) {
  auto [rows, c] = detail::rows_channels(a);
  APSFLOW_CHECK(c == 1, ShapeError,
                "broadcast_channel: expected 1 input channel, got " << c);
  APSFLOW_CHECK(channels >= 1, ContractError, "broadcast_channel: channels < 1");
  Shape out_shape = a.shape();
  out_shape.back() = channels;
  const T* av = a.data();
  const size_t cc = static_cast<size_t>(channels);
  std::vector<T> value(rows * cc);
  for (size_t r = 0; r < rows; ++r)
    for (size_t j = 0; j < cc; ++j) value[r * cc + j] = av[r];
  auto ai = a.impl();
  return make_result<T>("broadcast_channel", std::move(out_shape), std::move(value), {a},
                        [ai, rows, cc](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* ga = ai->ensure_grad();
                          for (size_t r = 0; r < rows; ++r) {
                            T acc = T(0);
                            for (size_t j = 0; j < cc; ++j) acc += g[r * cc + j];
                            ga[r] += acc;
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  APSFLOW_CHECK(shape_numel(new_shape) == a.size(), ShapeError,
                "reshape: numel mismatch " << shape_str(a.shape()) << " -> "
                                           << shape_str(new_shape));
  auto ai = a.impl();
  std::vector<T> value(a.data(), a.data() + a.size());
  return make_result<T>("reshape", std::move(new_shape), std::move(value), {a},
                        [ai](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* ga = ai->ensure_grad();
                          const size_t n = out.value.size();
                          for (size_t i = 0; i < n; ++i) ga[i] += g[i];
                        });
}

// Channel slice [c0, c0+count) of an HWC tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int c0, int count) {
  auto [rows, c] = detail::rows_channels(a);
  APSFLOW_CHECK(c0 >= 0 && count >= 1 && static_cast<size_t>(c0 + count) <= c,
                ShapeError, "slice_channels: range [" << c0 << ", " << c0 + count
                                                      << ") out of " << c);
  Shape out_shape = a.shape();
  out_shape.back() = count;
  const T* av = a.data();
  const size_t cnt = static_cast<size_t>(count);
  std::vector<T> value(rows * cnt);
  for (size_t r = 0; r < rows; ++r)
    for (size_t j = 0; j < cnt; ++j) value[r * cnt + j] = av[r * c + c0 + j];
  auto ai = a.impl();
  return make_result<T>("slice_channels", std::move(out_shape), std::move(value), {a},
                        [ai, rows, c = c, c0, cnt](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* ga = ai->ensure_grad();
                          for (size_t r = 0; r < rows; ++r)
                            for (size_t j = 0; j < cnt; ++j)
                              ga[r * c + c0 + j] += g[r * cnt + j];
                        });
}

// Concatenates along the innermost (channel) dimension.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  APSFLOW_CHECK(!parts.empty(), ContractError, "concat_channels: no inputs");
  Shape base = parts[0].shape();
  size_t total_c = 0;
  for (const auto& p : parts) {
    APSFLOW_CHECK(p.rank() == parts[0].rank(), ShapeError,
                  "concat_channels: rank mismatch");
    for (int d = 0; d + 1 < p.rank(); ++d)
      APSFLOW_CHECK(p.dim(d) == base[static_cast<size_t>(d)], ShapeError,
                    "concat_channels: leading dims mismatch "
                        << shape_str(p.shape()) << " vs " << shape_str(base));
    total_c += static_cast<size_t>(p.shape().back());
  }
  Shape out_shape = base;
  out_shape.back() = static_cast<int>(total_c);
  const size_t rows = shape_numel(out_shape) / total_c;
  std::vector<T> value(rows * total_c);
  std::vector<size_t> widths;
  widths.reserve(parts.size());
  size_t off = 0;
  for (const auto& p : parts) {
    const size_t pc = static_cast<size_t>(p.shape().back());
    const T* pv = p.data();
    for (size_t r = 0; r < rows; ++r)
      for (size_t j = 0; j < pc; ++j) value[r * total_c + off + j] = pv[r * pc + j];
    widths.push_back(pc);
    off += pc;
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  impls.reserve(parts.size());
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_result<T>("concat_channels", std::move(out_shape), std::move(value), parts,
                        [impls, widths, rows, total_c](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          size_t off = 0;
                          for (size_t k = 0; k < impls.size(); ++k) {
                            const size_t pc = widths[k];
                            if (impls[k]->requires_grad) {
                              T* ga = impls[k]->ensure_grad();
                              for (size_t r = 0; r < rows; ++r)
                                for (size_t j = 0; j < pc; ++j)
                                  ga[r * pc + j] += g[r * total_c + off + j];
                            }
                            off += pc;
                          }
                        });
}

// Mirrors an HWC tensor left-right (used by horizontal-flip augmentation).
template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& a) {
  APSFLOW_CHECK(a.rank() == 3, ShapeError,
                "flip_horizontal: expected HWC, got " << shape_str(a.shape()));
  const int h = a.dim(0), w = a.dim(1), c = a.dim(2);
  const T* av = a.data();
  std::vector<T> value(a.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k)
        value[(static_cast<size_t>(y) * w + x) * c + k] =
            av[(static_cast<size_t>(y) * w + (w - 1 - x)) * c + k];
  auto ai = a.impl();
  return make_result<T>("flip_horizontal", a.shape(), std::move(value), {a},
                        [ai, h, w, c](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* ga = ai->ensure_grad();
                          for (int y = 0; y < h; ++y)
                            for (int x = 0; x < w; ++x)
                              for (int k = 0; k < c; ++k)
                                ga[(static_cast<size_t>(y) * w + (w - 1 - x)) * c + k] +=
                                    g[(static_cast<size_t>(y) * w + x) * c + k];
                        });
}

// Shifts an HWC tensor by (dy, dx); vacated cells are zero. Used for finite
// spatial differences: shift2d(V, 0, -1) aligns V(x+1) with V(x).
template <typename T>
Tensor<T> shift2d(const Tensor<T>& a, int dy, int dx) {
  APSFLOW_CHECK(a.rank() == 3, ShapeError,
                "shift2d: expected HWC, got " << shape_str(a.shape()));
  const int h = a.dim(0), w = a.dim(1), c = a.dim(2);
  const T* av = a.data();
  std::vector<T> value(a.size(), T(0));
  for (int y = 0; y < h; ++y) {
    const int sy = y - dy;
    if (sy < 0 || sy >= h) continue;
    for (int x = 0; x < w; ++x) {
      const int sx = x - dx;
      if (sx < 0 || sx >= w) continue;
      for (int k = 0; k < c; ++k)
        value[(static_cast<size_t>(y) * w + x) * c + k] =
            av[(static_cast<size_t>(sy) * w + sx) * c + k];
    }
  }
  auto ai = a.impl();
  return make_result<T>("shift2d", a.shape(), std::move(value), {a},
                        [ai, h, w, c, dy, dx](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* ga = ai->ensure_grad();
                          for (int y = 0; y < h; ++y) {
                            const int sy = y - dy;
                            if (sy < 0 || sy >= h) continue;
                            for (int x = 0; x < w; ++x) {
                              const int sx = x - dx;
                              if (sx < 0 || sx >= w) continue;
                              for (int k = 0; k < c; ++k)
                                ga[(static_cast<size_t>(sy) * w + sx) * c + k] +=
                                    g[(static_cast<size_t>(y) * w + x) * c + k];
                            }
                          }
                        });
}

// Replicate-pads an HWC tensor by `pad` pixels on each side.
template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& a, int pad) {
  APSFLOW_CHECK(a.rank() == 3, ShapeError,
                "pad_replicate: expected HWC, got " << shape_str(a.shape()));
  APSFLOW_CHECK(pad >= 0, ContractError, "pad_replicate: negative pad");
  if (pad == 0) return reshape(a, a.shape());
  const int h = a.dim(0), w = a.dim(1), c = a.dim(2);
  const int oh = h + 2 * pad, ow = w + 2 * pad;
  const T* av = a.data();
  std::vector<T> value(static_cast<size_t>(oh) * ow * c);
  for (int y = 0; y < oh; ++y) {
    const int sy = std::clamp(y - pad, 0, h - 1);
    for (int x = 0; x < ow; ++x) {
      const int sx = std::clamp(x - pad, 0, w - 1);
      for (int k = 0; k < c; ++k)
        value[(static_cast<size_t>(y) * ow + x) * c + k] =
            av[(static_cast<size_t>(sy) * w + sx) * c + k];
    }
  }
  auto ai = a.impl();
  return make_result<T>("pad_replicate", Shape{oh, ow, c}, std::move(value), {a},
                        [ai, h, w, c, pad, oh, ow](TensorImpl<T>& out) {
                          const T* g = out.grad.data();
                          T* ga = ai->ensure_grad();
                          for (int y = 0; y < oh; ++y) {
                            const int sy = std::clamp(y - pad, 0, h - 1);
                            for (int x = 0; x < ow; ++x) {
                              const int sx = std::clamp(x - pad, 0, w - 1);
                              for (int k = 0; k < c; ++k)
                                ga[(static_cast<size_t>(sy) * w + sx) * c + k] +=
                                    g[(static_cast<size_t>(y) * ow + x) * c + k];
                            }
                          }
                        });
}

// Dense (M x K) * (K x N) product via Eigen; tensors are row-major 2-D.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  APSFLOW_CHECK(a.rank() == 2 && b.rank() == 2, ShapeError,
                "matmul: expected 2-D operands, got " << shape_str(a.shape())
                                                      << " and " << shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  APSFLOW_CHECK(k == k2, ShapeError,
                "matmul: inner dims " << k << " vs " << k2);
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  std::vector<T> value(static_cast<size_t>(m) * n);
  {
    CMap A(a.data(), m, k), B(b.data(), k, n);
    Eigen::Map<Mat>(value.data(), m, n).noalias() = A * B;
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result<T>("matmul", Shape{m, n}, std::move(value), {a, b},
                        [ai, bi, m, k, n](TensorImpl<T>& out) {
                          CMap G(out.grad.data(), m, n);
                          CMap A(ai->value.data(), m, k), B(bi->value.data(), k, n);
                          if (ai->requires_grad)
                            Eigen::Map<Mat>(ai->ensure_grad(), m, k).noalias() +=
                                G * B.transpose();
                          if (bi->requires_grad)
                            Eigen::Map<Mat>(bi->ensure_grad(), k, n).noalias() +=
                                A.transpose() * G;
                        });
}

// Identity in value, blocks gradient flow.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return Tensor<T>(a.shape(), std::vector<T>(a.data(), a.data() + a.size()), false);
}

// Key-value attributes for the string dispatcher (dispatch.hpp).
struct OpAttrs {
  std::map<std::string, double> values;

  double get(const std::string& key, double fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
  }
  double require(const std::string& key) const {
    auto it = values.find(key);
    APSFLOW_CHECK(it != values.end(), ContractError,
                  "missing op attribute '" << key << "'");
    return it->second;
  }
  int get_int(const std::string& key, int fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : static_cast<int>(it->second);
  }
};

}  // namespace apsflow
