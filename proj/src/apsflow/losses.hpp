#pragma once

// Unsupervised objective: occlusion-masked photometric loss (optionally
// sampling a dilated canvas), census loss, edge-aware smoothness,
// augmentation-consistency loss and the kernel reconstruction loss, combined
// by fixed weights. Everything is composed from tape ops, so each term is
// differentiable end to end.

#include <cmath>
#include <string>
#include <vector>

#include "nn_ops.hpp"
#include "ops.hpp"
#include "sampling.hpp"
#include "tensor.hpp"

namespace apsflow {

struct PenaltyParams {
  double q = 0.4;
  double epsilon = 0.01;

  void validate() const {
    APSFLOW_CHECK(q > 0 && q <= 1, ContractError, "penalty: q must be in (0, 1]");
    APSFLOW_CHECK(epsilon > 0, ContractError, "penalty: epsilon must be positive");
  }
  double floor() const { return std::pow(epsilon, q); }  // value at x = 0
};

struct LossWeights {
  double smooth = 0.05;
  double census = 1.0;
  double aug_reg = 0.5;
  double sampling_reg = 0.1;
};

// Elementwise (|x| + eps)^q.
template <typename T>
Tensor<T> robust_penalty(const Tensor<T>& x, const PenaltyParams& params = {}) {
  params.validate();
  return pow_scalar(add_scalar(abs(x), static_cast<T>(params.epsilon)),
                    static_cast<T>(params.q));
}

// Scalar loss plus the empty-mask flag required by the division guard.
template <typename T>
struct MaskedLoss {
  Tensor<T> value;
  bool empty_mask = false;
};

namespace detail {

// sum(term * mask) / sum(mask); zero (flagged) when the mask is empty.
template <typename T>
MaskedLoss<T> masked_mean(const Tensor<T>& term, const Tensor<T>& mask) {
  APSFLOW_CHECK(term.same_shape(mask), ShapeError,
                "masked_mean: term " << shape_str(term.shape()) << " vs mask "
                                     << shape_str(mask.shape()));
  T count = T(0);
  for (int64_t i = 0; i < mask.size(); ++i) count += mask.data()[i];
  if (count == T(0)) return {Tensor<T>::scalar(T(0)), true};
  return {mul_scalar(reduce_sum(mul(term, mask)), T(1) / count), false};
}

// Constant (no-grad) mask that zeroes the last `border` rows/cols in the
// direction of a forward difference, or a symmetric frame when both = true.
template <typename T>
Tensor<T> valid_mask(int h, int w, int skip_right, int skip_bottom, int frame = 0) {
  auto m = Tensor<T>::zeros(Shape{h, w, 1});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool ok = x < w - skip_right && y < h - skip_bottom && x >= frame &&
                      y >= frame && x < w - frame && y < h - frame;
      m.raw_value()[static_cast<size_t>(y) * w + x] = ok ? T(1) : T(0);
    }
  return m;
}

}  // namespace detail

// Forward-backward consistency occlusion mask: 1 marks visible pixels. The
// backward flow is bilinearly sampled at p + V_fwd. Non-differentiable by
// construction (comparisons), evaluated off the tape.
template <typename T>
Tensor<T> occlusion_mask(const Tensor<T>& v_fwd, const Tensor<T>& v_bwd,
                         double alpha1 = 0.01, double alpha2 = 0.5) {
  APSFLOW_CHECK(v_fwd.same_shape(v_bwd), ShapeError,
                "occlusion_mask: flow shapes differ");
  APSFLOW_CHECK(v_fwd.rank() == 3 && v_fwd.dim(2) == 2, ShapeError,
                "occlusion_mask: flows must be (H, W, 2)");
  NoGradScope<T> no_grad;
  auto vb = warp_bilinear(v_bwd, v_fwd, WarpBorder::kClamp);
  const int h = v_fwd.dim(0), w = v_fwd.dim(1);
  auto mask = Tensor<T>::zeros(Shape{h, w, 1});
  for (int p = 0; p < h * w; ++p) {
    const T fu = v_fwd.data()[p * 2], fv = v_fwd.data()[p * 2 + 1];
    const T bu = vb.data()[p * 2], bv = vb.data()[p * 2 + 1];
    const T mismatch = (fu + bu) * (fu + bu) + (fv + bv) * (fv + bv);
    const T bound = static_cast<T>(alpha1) * (fu * fu + fv * fv + bu * bu + bv * bv) +
                    static_cast<T>(alpha2);
    mask.raw_value()[static_cast<size_t>(p)] = mismatch < bound ? T(1) : T(0);
  }
  return mask;
}

// Occlusion-masked photometric loss. The residual is channel-averaged before
// the penalty. When a dilated canvas is supplied (margin > 0), warping reads
// it with the crop offset so motion toward the frame edge lands on real
// content; sampling clamps at the canvas border either way.
template <typename T>
MaskedLoss<T> photometric_loss(const Tensor<T>& img1, const Tensor<T>& img2_canvas,
                               const Tensor<T>& flow, const Tensor<T>& occ_mask,
                               const PenaltyParams& params = {}, int margin = 0) {
  APSFLOW_CHECK(img2_canvas.dim(0) == img1.dim(0) + 2 * margin &&
                    img2_canvas.dim(1) == img1.dim(1) + 2 * margin,
                ContractError,
                "photometric_loss: canvas " << shape_str(img2_canvas.shape())
                                            << " does not fit margin " << margin);
  auto warped = warp_bilinear(img2_canvas, flow, WarpBorder::kClamp, margin);
  auto residual = channel_mean(sub(img1, warped));
  return detail::masked_mean(robust_penalty(residual, params), occ_mask);
}

// Warping half of the dilated-canvas photometric loss, exposed on its own.
template <typename T>
Tensor<T> boundary_dilated_warp(const Tensor<T>& img2_canvas, const Tensor<T>& flow,
                                int margin) {
  return warp_bilinear(img2_canvas, flow, WarpBorder::kClamp, margin);
}

namespace detail {

// Luma in [0, 255] from an RGB image in [0, 1].
template <typename T>
Tensor<T> luma255(const Tensor<T>& img) {
  auto r = slice_channels(img, 0, 1);
  auto g = slice_channels(img, 1, 1);
  auto b = slice_channels(img, 2, 1);
  return add(add(mul_scalar(r, T(0.299 * 255)), mul_scalar(g, T(0.587 * 255))),
             mul_scalar(b, T(0.114 * 255)));
}

template <typename T>
Tensor<T> soft_sign(const Tensor<T>& d) {
  return div(d, sqrt(add_scalar(square(d), T(0.81))));
}

}  // namespace detail

// Census loss between I1 and the already-warped I2: soft ternary transform on
// 7x7 patches of 255-scaled luma, soft Hamming distance, robust penalty and
// occlusion-masked averaging. Pixels whose patch leaves the frame are
// excluded from the mask.
template <typename T>
MaskedLoss<T> census_loss(const Tensor<T>& img1, const Tensor<T>& img2_warped,
                          const Tensor<T>& occ_mask, int patch_radius = 3,
                          const PenaltyParams& params = {}) {
  APSFLOW_CHECK(img1.same_shape(img2_warped), ShapeError,
                "census_loss: image shapes differ");
  const int h = img1.dim(0), w = img1.dim(1);
  auto g1 = detail::luma255(img1);
  auto g2 = detail::luma255(img2_warped);
  Tensor<T> hamming = Tensor<T>::zeros(Shape{h, w, 1});
  bool first = true;
  for (int dy = -patch_radius; dy <= patch_radius; ++dy) {
    for (int dx = -patch_radius; dx <= patch_radius; ++dx) {
      if (dy == 0 && dx == 0) continue;  // zero difference, zero term
      auto f1 = detail::soft_sign(sub(shift2d(g1, -dy, -dx), g1));
      auto f2 = detail::soft_sign(sub(shift2d(g2, -dy, -dx), g2));
      auto d = sub(f1, f2);
      auto sq = square(d);
      auto term = div(sq, add_scalar(sq, T(0.1)));
      hamming = first ? term : add(hamming, term);
      first = false;
    }
  }
  auto border = detail::valid_mask<T>(h, w, 0, 0, patch_radius);
  auto mask = mul(occ_mask, border);  // occ_mask is constant, product stays 0/1
  return detail::masked_mean(robust_penalty(hamming, params), mask);
}

// First-order edge-aware smoothness: per direction, the channel-mean absolute
// flow gradient damped by exp(-lambda * channel-mean image gradient), averaged
// over pixels with a defined forward difference; the two directions add.
template <typename T>
Tensor<T> smooth_loss(const Tensor<T>& flow, const Tensor<T>& img1,
                      double edge_weight = 10.0) {
  APSFLOW_CHECK(flow.dim(0) == img1.dim(0) && flow.dim(1) == img1.dim(1),
                ShapeError, "smooth_loss: flow and image sizes differ");
  const int h = flow.dim(0), w = flow.dim(1);
  auto dir_term = [&](int dy, int dx, const Tensor<T>& mask) {
    auto dv = channel_mean(abs(sub(shift2d(flow, -dy, -dx), flow)));
    auto di = channel_mean(abs(sub(shift2d(img1, -dy, -dx), img1)));
    auto damp = exp(mul_scalar(di, static_cast<T>(-edge_weight)));
    auto res = detail::masked_mean(mul(dv, damp), mask);
    return res.value;
  };
  auto mx = detail::valid_mask<T>(h, w, 1, 0);
  auto my = detail::valid_mask<T>(h, w, 0, 1);
  return add(dir_term(0, 1, mx), dir_term(1, 0, my));
}

// Affine map from student pixel coordinates to teacher coordinates:
// phi(p') = M p' + t, with M carrying scale, rotation and horizontal flip.
struct AffineTransform {
  int out_h = 0, out_w = 0;
  double m00 = 1, m01 = 0, m10 = 0, m11 = 1;
  double tx = 0, ty = 0;

  static AffineTransform identity(int h, int w) {
    AffineTransform t;
    t.out_h = h;
    t.out_w = w;
    return t;
  }

  // Random crop + flip + small rotation/scale, fully determined by rng state.
  static AffineTransform random(Rng& rng, int in_h, int in_w, int crop_h,
                                int crop_w) {
    APSFLOW_CHECK(crop_h >= 1 && crop_w >= 1 && crop_h <= in_h && crop_w <= in_w,
                  ContractError,
                  "transform: crop " << crop_h << "x" << crop_w
                                     << " does not fit " << in_h << "x" << in_w);
    AffineTransform t;
    t.out_h = crop_h;
    t.out_w = crop_w;
    const bool flip = rng.bernoulli(0.5);
    const double angle = rng.uniform(-0.08, 0.08);
    const double scale = rng.uniform(0.97, 1.03);
    const double fx = flip ? -1.0 : 1.0;
    const double c = std::cos(angle) * scale, s = std::sin(angle) * scale;
    t.m00 = c * fx;
    t.m01 = -s;
    t.m10 = s * fx;
    t.m11 = c;
    // Place the crop center so the sampled quad stays inside the teacher.
    const double half_w = crop_w / 2.0, half_h = crop_h / 2.0;
    const double reach = scale * std::hypot(half_w, half_h);
    const double lo_x = std::min(reach, in_w / 2.0), lo_y = std::min(reach, in_h / 2.0);
    const double cx = rng.uniform(lo_x, std::max(lo_x, in_w - 1 - lo_x));
    const double cy = rng.uniform(lo_y, std::max(lo_y, in_h - 1 - lo_y));
    t.tx = cx - (t.m00 * (half_w - 0.5) + t.m01 * (half_h - 0.5));
    t.ty = cy - (t.m10 * (half_w - 0.5) + t.m11 * (half_h - 0.5));
    return t;
  }

  bool is_identity() const {
    return m00 == 1 && m01 == 0 && m10 == 0 && m11 == 1 && tx == 0 && ty == 0;
  }

  void invert_linear(double inv[4]) const {
    const double det = m00 * m11 - m01 * m10;
    APSFLOW_CHECK(std::abs(det) > 1e-12, ContractError,
                  "transform: degenerate linear part");
    inv[0] = m11 / det;
    inv[1] = -m01 / det;
    inv[2] = -m10 / det;
    inv[3] = m00 / det;
  }
};

namespace detail {

// Displacement field p' -> phi(p') - p' used to drive warp_bilinear, plus the
// in-bounds validity mask of the sample positions.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> transform_field(const AffineTransform& t, int in_h,
                                                int in_w) {
  auto field = Tensor<T>::zeros(Shape{t.out_h, t.out_w, 2});
  auto valid = Tensor<T>::zeros(Shape{t.out_h, t.out_w, 1});
  for (int y = 0; y < t.out_h; ++y)
    for (int x = 0; x < t.out_w; ++x) {
      const double sx = t.m00 * x + t.m01 * y + t.tx;
      const double sy = t.m10 * x + t.m11 * y + t.ty;
      const size_t p = static_cast<size_t>(y) * t.out_w + x;
      field.raw_value()[p * 2] = static_cast<T>(sx - x);
      field.raw_value()[p * 2 + 1] = static_cast<T>(sy - y);
      const bool ok = sx >= 0 && sx <= in_w - 1 && sy >= 0 && sy <= in_h - 1;
      valid.raw_value()[p] = ok ? T(1) : T(0);
    }
  return {field, valid};
}

}  // namespace detail

// Applies the transform to an image: out(p') = img(phi(p')), edge-clamped.
template <typename T>
Tensor<T> apply_transform(const Tensor<T>& img, const AffineTransform& t) {
  NoGradScope<T> no_grad;
  auto [field, valid] = detail::transform_field<T>(t, img.dim(0), img.dim(1));
  return warp_bilinear(img, field, WarpBorder::kClamp);
}

// Consistency loss between the student flow (computed on transformed images)
// and the re-mapped teacher flow. The teacher must already be detached; the
// target is J^-1 V(phi(p')) where J is the transform's linear part. The
// penalty floor is subtracted so a perfect match scores exactly zero.
template <typename T>
MaskedLoss<T> augmentation_consistency_loss(const Tensor<T>& student_flow,
                                            const Tensor<T>& teacher_flow,
                                            const AffineTransform& t,
                                            const PenaltyParams& params = {}) {
  APSFLOW_CHECK(!teacher_flow.requires_grad(), ContractError,
                "augmentation_consistency_loss: teacher must be detached");
  APSFLOW_CHECK(student_flow.dim(0) == t.out_h && student_flow.dim(1) == t.out_w,
                ShapeError, "augmentation_consistency_loss: student flow is "
                                << shape_str(student_flow.shape())
                                << ", transform output is " << t.out_h << "x"
                                << t.out_w);
  auto [field, valid] = detail::transform_field<T>(t, teacher_flow.dim(0),
                                                   teacher_flow.dim(1));
  Tensor<T> sampled;
  {
    NoGradScope<T> no_grad;
    sampled = warp_bilinear(teacher_flow, field, WarpBorder::kClamp);
  }
  double inv[4];
  t.invert_linear(inv);
  auto u = slice_channels(sampled, 0, 1);
  auto v = slice_channels(sampled, 1, 1);
  auto target = concat_channels<T>(
      {add(mul_scalar(u, static_cast<T>(inv[0])), mul_scalar(v, static_cast<T>(inv[1]))),
       add(mul_scalar(u, static_cast<T>(inv[2])), mul_scalar(v, static_cast<T>(inv[3])))});
  auto diff = sub(student_flow, target);
  auto pen = channel_mean(
      add_scalar(robust_penalty(diff, params), static_cast<T>(-params.floor())));
  return detail::masked_mean(pen, valid);
}

// Kernel reconstruction loss: area-downscale I1 by 2^N, upsample back through
// the AFU kernels of levels 1..N (value scaling off), penalize the residual.
// Sum mode adds residual penalties over all elements; mean mode divides by
// the element count.
template <typename T>
Tensor<T> sampling_reconstruction_loss(const Tensor<T>& img1,
                                       const std::vector<Tensor<T>>& u_kernels,
                                       bool mean_reduction = true,
                                       const PenaltyParams& params = {}) {
  const int n = static_cast<int>(u_kernels.size()) - 1;
  APSFLOW_CHECK(n >= 1, ContractError,
                "sampling_reconstruction_loss: need kernels for levels 1..N");
  auto rec = avg_pool(img1, 1 << n);
  for (int i = 1; i <= n; ++i)
    rec = afu_upsample(rec, u_kernels[static_cast<size_t>(i)], 2, false);
  auto pen = robust_penalty(sub(img1, rec), params);
  return mean_reduction ? reduce_mean(pen) : reduce_sum(pen);
}

// Weighted sum of the five terms plus a named-scalar report.
struct LossReport {
  double photometric = 0;
  double census = 0;
  double smooth = 0;
  double aug_reg = 0;
  double sampling_reg = 0;
  double total = 0;
  bool empty_photometric_mask = false;
  bool empty_census_mask = false;
};

template <typename T>
Tensor<T> total_loss(const Tensor<T>& photometric, const Tensor<T>& smooth,
                     const Tensor<T>& census, const Tensor<T>& aug_reg,
                     const Tensor<T>& sampling_reg, const LossWeights& weights,
                     LossReport* report = nullptr) {
  auto check_term = [](const Tensor<T>& t, const char* name) {
    APSFLOW_CHECK(std::isfinite(static_cast<double>(t.item())), NumericError,
                  "total_loss: term '" << name << "' is not finite");
  };
  check_term(photometric, "photometric");
  check_term(smooth, "smooth");
  check_term(census, "census");
  check_term(aug_reg, "aug_reg");
  check_term(sampling_reg, "sampling_reg");
  auto total = add(
      add(add(photometric, mul_scalar(smooth, static_cast<T>(weights.smooth))),
          add(mul_scalar(census, static_cast<T>(weights.census)),
              mul_scalar(aug_reg, static_cast<T>(weights.aug_reg)))),
      mul_scalar(sampling_reg, static_cast<T>(weights.sampling_reg)));
  if (report) {
    report->photometric = static_cast<double>(photometric.item());
    report->smooth = static_cast<double>(smooth.item());
    report->census = static_cast<double>(census.item());
    report->aug_reg = static_cast<double>(aug_reg.item());
    report->sampling_reg = static_cast<double>(sampling_reg.item());
    report->total = static_cast<double>(total.item());
  }
  return total;
}

}  // namespace apsflow
