#pragma once

// Central finite-difference verification of analytic gradients. Always run
// in double; float rounding drowns the h^2 truncation term.

#include <functional>
#include <string>
#include <vector>

#include "dispatch.hpp"
#include "losses.hpp"
#include "network.hpp"
#include "tensor.hpp"

namespace apsflow {

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool pass = true;
};

// Relative error with a floor so near-zero gradient pairs compare absolutely.
inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Compares the tape gradient of f w.r.t. x against central differences at
// every element of x. f must be deterministic and scalar-valued; it is
// re-evaluated 2*numel(x) times.
inline FiniteDiffReport finite_diff_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f,
    Tensor<double> x, double step = 1e-5, double tol = 1e-4) {
  const bool prev_finite = finite_check_mode();
  finite_check_mode() = true;

  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<double> analytic;
  {
    GradientTape<double> tape;
    TapeScope<double> scope(tape);
    auto y = f(x);
    APSFLOW_CHECK(y.size() == 1, ContractError,
                  "finite_diff_check: f must return a scalar, got "
                      << shape_str(y.shape()));
    tape.backward(y);
    analytic = x.has_grad() ? x.grad() : std::vector<double>(x.size(), 0.0);
  }

  FiniteDiffReport report;
  auto& xv = x.raw_value();
  {
    NoGradScope<double> no_grad;
    for (size_t i = 0; i < xv.size(); ++i) {
      const double saved = xv[i];
      xv[i] = saved + step;
      const double up = f(x).item();
      xv[i] = saved - step;
      const double down = f(x).item();
      xv[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double e = rel_err(analytic[i], numeric);
      if (e > report.max_rel_err) {
        report.max_rel_err = e;
        report.worst_index = i;
        report.analytic_at_worst = analytic[i];
        report.numeric_at_worst = numeric;
      }
    }
  }
  report.pass = report.max_rel_err < tol;
  finite_check_mode() = prev_finite;
  return report;
}

// Same check restricted to chosen elements of x. Used where a full sweep is
// too expensive (whole-network weight tensors): one backward gives every
// analytic entry, finite differences probe only the sampled ones.
inline FiniteDiffReport finite_diff_check_sampled(
    const std::function<Tensor<double>(const Tensor<double>&)>& f,
    Tensor<double> x, const std::vector<int64_t>& indices, double step = 1e-5,
    double tol = 1e-4) {
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<double> analytic;
  {
    GradientTape<double> tape;
    TapeScope<double> scope(tape);
    auto y = f(x);
    APSFLOW_CHECK(y.size() == 1, ContractError,
                  "finite_diff_check_sampled: f must return a scalar, got "
                      << shape_str(y.shape()));
    tape.backward(y);
    analytic = x.has_grad() ? x.grad() : std::vector<double>(x.size(), 0.0);
  }

  FiniteDiffReport report;
  auto& xv = x.raw_value();
  NoGradScope<double> no_grad;
  for (int64_t idx : indices) {
    APSFLOW_CHECK(idx >= 0 && idx < static_cast<int64_t>(xv.size()), ContractError,
                  "finite_diff_check_sampled: index " << idx << " out of range");
    const auto i = static_cast<size_t>(idx);
    const double saved = xv[i];
    xv[i] = saved + step;
    const double up = f(x).item();
    xv[i] = saved - step;
    const double down = f(x).item();
    xv[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double e = rel_err(analytic[i], numeric);
    if (e > report.max_rel_err) {
      report.max_rel_err = e;
      report.worst_index = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

// One randomized gradient-check case: an op driven through forward_op, with a
// sampler producing valid inputs away from non-differentiable points, and a
// mask of which inputs to differentiate.
struct OpGradCase {
  std::string op;
  OpAttrs attrs;
  std::function<std::vector<Tensor<double>>(Rng&)> sample;
  std::vector<int> check_inputs;
};

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  auto n = shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Values bounded away from zero (for abs/leaky kinks and division).
inline Tensor<double> random_signed_offzero(Rng& rng, Shape shape, double min_mag) {
  auto t = random_tensor(rng, std::move(shape), min_mag, 1.0);
  for (auto& x : t.raw_value())
    if (rng.bernoulli(0.5)) x = -x;
  return t;
}

// Probability kernels from a softmax over random scores.
inline Tensor<double> random_kernels(Rng& rng, int h, int w) {
  auto scores = random_tensor(rng, Shape{h, w, 9}, -1.5, 1.5);
  NoGradScope<double> no_grad;
  return softmax_channel(scores);
}

// Flow whose sample positions stay clear of integer grid lines and borders.
inline Tensor<double> random_fractional_flow(Rng& rng, int h, int w, double mag) {
  auto t = Tensor<double>::zeros(Shape{h, w, 2});
  auto& v = t.raw_value();
  for (size_t i = 0; i < v.size(); ++i) {
    const double whole = std::floor(rng.uniform(-mag, mag));
    v[i] = whole + rng.uniform(0.25, 0.75);
  }
  return t;
}

}  // namespace detail

// Registry of every differentiable op with a sampler over its valid domain.
inline std::vector<OpGradCase> op_gradcheck_registry() {
  using detail::random_fractional_flow;
  using detail::random_kernels;
  using detail::random_signed_offzero;
  using detail::random_tensor;
  std::vector<OpGradCase> cases;
  auto add_case = [&](std::string op, OpAttrs attrs,
                      std::function<std::vector<Tensor<double>>(Rng&)> sample,
                      std::vector<int> check_inputs) {
    cases.push_back({std::move(op), std::move(attrs), std::move(sample),
                     std::move(check_inputs)});
  };

  auto pair_sampler = [](double lo, double hi) {
    return [lo, hi](Rng& rng) {
      return std::vector{detail::random_tensor(rng, {3, 4, 2}, lo, hi),
                         detail::random_tensor(rng, {3, 4, 2}, lo, hi)};
    };
  };
  auto single = [](Shape shape, double lo, double hi) {
    return [shape, lo, hi](Rng& rng) {
      return std::vector{detail::random_tensor(rng, shape, lo, hi)};
    };
  };

  add_case("add", {}, pair_sampler(-1, 1), {0, 1});
  add_case("sub", {}, pair_sampler(-1, 1), {0, 1});
  add_case("mul", {}, pair_sampler(-1, 1), {0, 1});
  add_case("div", {},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {3, 4, 2}, -1, 1),
                                random_signed_offzero(rng, {3, 4, 2}, 0.5)};
           },
           {0, 1});
  add_case("add_scalar", {{{"value", 0.7}}}, single({3, 4, 2}, -1, 1), {0});
  add_case("mul_scalar", {{{"value", -1.3}}}, single({3, 4, 2}, -1, 1), {0});
  add_case("neg", {}, single({3, 4, 2}, -1, 1), {0});
  add_case("abs", {},
           [](Rng& rng) {
             return std::vector{random_signed_offzero(rng, {3, 4, 2}, 0.05)};
           },
           {0});
  add_case("square", {}, single({3, 4, 2}, -1, 1), {0});
  add_case("sqrt", {}, single({3, 4, 2}, 0.2, 2.0), {0});
  add_case("exp", {}, single({3, 4, 2}, -1, 1), {0});
  add_case("log", {}, single({3, 4, 2}, 0.2, 2.0), {0});
  add_case("sigmoid", {}, single({3, 4, 2}, -2, 2), {0});
  add_case("leaky_relu", {{{"slope", 0.1}}},
           [](Rng& rng) {
             return std::vector{random_signed_offzero(rng, {3, 4, 2}, 0.05)};
           },
           {0});
  add_case("pow_scalar", {{{"value", 0.4}}}, single({3, 4, 2}, 0.05, 1.5), {0});
  add_case("reduce_sum", {}, single({3, 4, 2}, -1, 1), {0});
  add_case("reduce_mean", {}, single({3, 4, 2}, -1, 1), {0});
  add_case("channel_sum", {}, single({3, 4, 5}, -1, 1), {0});
  add_case("channel_mean", {}, single({3, 4, 5}, -1, 1), {0});
  add_case("softmax_channel", {}, single({3, 4, 9}, -2, 2), {0});
  add_case("broadcast_channel", {{{"channels", 7}}}, single({3, 4, 1}, -1, 1), {0});
  add_case("reshape", {{{"d0", 24}} }, single({3, 4, 2}, -1, 1), {0});
  add_case("slice", {{{"c0", 1}, {"count", 3}}}, single({3, 4, 5}, -1, 1), {0});
  add_case("concat", {},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {3, 4, 2}, -1, 1),
                                random_tensor(rng, {3, 4, 3}, -1, 1)};
           },
           {0, 1});
  add_case("flip_horizontal", {}, single({3, 4, 2}, -1, 1), {0});
  add_case("shift2d", {{{"dy", 1}, {"dx", -1}}}, single({4, 4, 2}, -1, 1), {0});
  add_case("pad_replicate", {{{"pad", 2}}}, single({3, 4, 2}, -1, 1), {0});
  add_case("matmul", {},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {3, 5}, -1, 1),
                                random_tensor(rng, {5, 4}, -1, 1)};
           },
           {0, 1});
  add_case("conv2d", {{{"stride", 1}, {"dilation", 1}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {5, 6, 3}, -1, 1),
                                random_tensor(rng, {3, 3, 3, 4}, -0.5, 0.5),
                                random_tensor(rng, {4}, -0.2, 0.2)};
           },
           {0, 1, 2});
  add_case("conv2d", {{{"stride", 2}, {"dilation", 1}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {6, 6, 2}, -1, 1),
                                random_tensor(rng, {3, 3, 2, 3}, -0.5, 0.5),
                                random_tensor(rng, {3}, -0.2, 0.2)};
           },
           {0, 1, 2});
  add_case("conv2d", {{{"stride", 1}, {"dilation", 2}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {6, 6, 2}, -1, 1),
                                random_tensor(rng, {3, 3, 2, 2}, -0.5, 0.5),
                                random_tensor(rng, {2}, -0.2, 0.2)};
           },
           {0, 1, 2});
  add_case("avg_pool", {{{"factor", 2}}}, single({4, 6, 3}, -1, 1), {0});
  add_case("max_pool", {{{"factor", 2}}},
           [](Rng& rng) {
             // Stagger values so no pooling window has a near-tie.
             auto t = random_tensor(rng, {4, 4, 2}, -1, 1);
             auto& v = t.raw_value();
             for (size_t i = 0; i < v.size(); ++i)
               v[i] = std::floor(v[i] * 50.0) * 0.02 + static_cast<double>(i % 37) * 1e-3;
             return std::vector{t};
           },
           {0});
  add_case("resize_nearest", {{{"oh", 6}, {"ow", 8}}}, single({3, 4, 2}, -1, 1), {0});
  add_case("resize_bilinear", {{{"oh", 6}, {"ow", 8}}}, single({3, 4, 2}, -1, 1), {0});
  add_case("resize_bilinear", {{{"oh", 2}, {"ow", 3}}}, single({4, 6, 2}, -1, 1), {0});
  add_case("warp_bilinear", {{{"zero_border", 0}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {5, 5, 3}, -1, 1),
                                random_fractional_flow(rng, 5, 5, 2.0)};
           },
           {0, 1});
  add_case("warp_bilinear", {{{"zero_border", 1}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {5, 5, 3}, -1, 1),
                                random_fractional_flow(rng, 5, 5, 2.0)};
           },
           {0, 1});
  add_case("warp_bilinear", {{{"zero_border", 0}, {"offset", 2}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {8, 8, 2}, -1, 1),
                                random_fractional_flow(rng, 4, 4, 1.0)};
           },
           {0, 1});
  add_case("corr_volume", {{{"radius", 2}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {4, 5, 3}, -1, 1),
                                random_tensor(rng, {4, 5, 3}, -1, 1)};
           },
           {0, 1});
  add_case("normalize_l2", {}, single({3, 4, 4}, 0.2, 1.0), {0});
  add_case("adaptive_gumbel_softmax", {{{"rho", 0.01}}},
           [](Rng& rng) {
             // Moderate temperature range keeps the softmax out of hard
             // saturation where finite differences underflow.
             auto t = random_tensor(rng, {3, 3, 11}, -1, 1);
             return std::vector{t};
           },
           {0});
  add_case("cap_pool", {{{"r", 2}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {6, 4, 3}, -1, 1),
                                random_kernels(rng, 6, 4)};
           },
           {0, 1});
  add_case("cap_pool_normalized", {{{"r", 2}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {4, 4, 2}, -1, 1),
                                random_kernels(rng, 4, 4)};
           },
           {0, 1});
  add_case("afu_upsample", {{{"r", 2}, {"scale_values", 0}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {3, 2, 2}, -2, 2),
                                random_kernels(rng, 6, 4)};
           },
           {0, 1});
  add_case("afu_upsample", {{{"r", 2}, {"scale_values", 1}}},
           [](Rng& rng) {
             return std::vector{random_tensor(rng, {2, 3, 2}, -2, 2),
                                random_kernels(rng, 4, 6)};
           },
           {0, 1});
  add_case("bilinear_upsample", {{{"r", 2}, {"scale_values", 1}}},
           single({3, 3, 2}, -2, 2), {0});
  return cases;
}

struct OpGradResult {
  std::string op;
  int seeds = 0;
  double max_rel_err = 0.0;
  bool pass = true;
};

// Runs every registry case over `seeds` sampled inputs, checking the tape
// gradient of sum(op(...)) w.r.t. each flagged input.
inline std::vector<OpGradResult> run_op_gradchecks(int seeds = 20,
                                                   double step = 1e-5,
                                                   double tol = 1e-4,
                                                   uint64_t base_seed = 7) {
  std::vector<OpGradResult> results;
  for (const auto& c : op_gradcheck_registry()) {
    OpGradResult res;
    res.op = c.op;
    for (const auto& [k, v] : c.attrs.values)
      res.op += " " + k + "=" + std::to_string(v).substr(0, 4);
    res.seeds = seeds;
    for (int s = 0; s < seeds; ++s) {
      Rng rng(Rng::mix(base_seed, (static_cast<uint64_t>(s) << 16) ^
                                      std::hash<std::string>{}(res.op)));
      auto inputs = c.sample(rng);
      for (int idx : c.check_inputs) {
        auto f = [&](const Tensor<double>& x) {
          auto args = inputs;
          args[static_cast<size_t>(idx)] = x;
          return reduce_sum(forward_op(c.op, args, c.attrs));
        };
        auto rep = finite_diff_check(f, inputs[static_cast<size_t>(idx)], step, tol);
        res.max_rel_err = std::max(res.max_rel_err, rep.max_rel_err);
        res.pass = res.pass && rep.pass;
      }
    }
    results.push_back(std::move(res));
  }
  return results;
}

// Each scalar loss differentiated w.r.t. one argument with everything else
// held fixed. Inputs are drawn off the bilinear and absolute-value kinks the
// same way the op-level samplers are, so the central difference stays on one
// smooth branch.
inline std::vector<OpGradResult> run_loss_gradchecks(int seeds = 5,
                                                     double step = 1e-5,
                                                     double tol = 1e-4,
                                                     uint64_t base_seed = 11) {
  auto image = [](Rng& rng, int h, int w) {
    return detail::random_tensor(rng, Shape{h, w, 3}, 0.0, 1.0);
  };
  auto ones = [](int h, int w) {
    return Tensor<double>::full(Shape{h, w, 1}, 1.0);
  };

  struct LossCase {
    const char* name;
    std::function<FiniteDiffReport(Rng&, double, double)> check;
  };
  std::vector<LossCase> cases;

  cases.push_back({"photometric_loss(flow)", [&](Rng& rng, double st, double tl) {
    auto i1 = image(rng, 8, 8);
    auto i2 = image(rng, 8, 8);
    auto occ = ones(8, 8);
    auto flow = detail::random_fractional_flow(rng, 8, 8, 2.0);
    auto f = [&](const Tensor<double>& x) {
      return photometric_loss(i1, i2, x, occ).value;
    };
    return finite_diff_check(f, flow, st, tl);
  }});

  cases.push_back({"photometric_loss(canvas)", [&](Rng& rng, double st, double tl) {
    auto i1 = image(rng, 8, 8);
    auto canvas = image(rng, 12, 12);
    auto occ = ones(8, 8);
    auto flow = detail::random_fractional_flow(rng, 8, 8, 2.0);
    auto f = [&](const Tensor<double>& x) {
      return photometric_loss(i1, x, flow, occ, {}, 2).value;
    };
    return finite_diff_check(f, canvas, st, tl);
  }});

  cases.push_back({"census_loss(flow)", [&](Rng& rng, double st, double tl) {
    auto i1 = image(rng, 8, 8);
    auto i2 = image(rng, 8, 8);
    auto occ = ones(8, 8);
    auto flow = detail::random_fractional_flow(rng, 8, 8, 1.5);
    auto f = [&](const Tensor<double>& x) {
      return census_loss(i1, boundary_dilated_warp(i2, x, 0), occ, 2).value;
    };
    return finite_diff_check(f, flow, st, tl);
  }});

  cases.push_back({"smooth_loss(flow)", [&](Rng& rng, double st, double tl) {
    auto i1 = image(rng, 8, 8);
    auto flow = detail::random_fractional_flow(rng, 8, 8, 1.5);
    auto f = [&](const Tensor<double>& x) { return smooth_loss(x, i1); };
    return finite_diff_check(f, flow, st, tl);
  }});

  cases.push_back({"augmentation_consistency_loss(student)",
                   [&](Rng& rng, double st, double tl) {
    auto teacher = detail::random_fractional_flow(rng, 8, 8, 1.5);
    auto t = AffineTransform::random(rng, 8, 8, 8, 8);
    auto student = detail::random_fractional_flow(rng, 8, 8, 1.5);
    auto f = [&](const Tensor<double>& x) {
      return augmentation_consistency_loss(x, teacher, t).value;
    };
    return finite_diff_check(f, student, st, tl);
  }});

  cases.push_back({"sampling_reconstruction_loss(image)",
                   [&](Rng& rng, double st, double tl) {
    auto i1 = image(rng, 8, 8);
    std::vector<Tensor<double>> u = {Tensor<double>(),
                                     detail::random_kernels(rng, 8, 8)};
    auto f = [&](const Tensor<double>& x) {
      return sampling_reconstruction_loss(x, u);
    };
    return finite_diff_check(f, i1, st, tl);
  }});

  cases.push_back({"sampling_reconstruction_loss(kernels)",
                   [&](Rng& rng, double st, double tl) {
    auto i1 = image(rng, 8, 8);
    auto k = detail::random_kernels(rng, 8, 8);
    auto f = [&](const Tensor<double>& x) {
      std::vector<Tensor<double>> u = {Tensor<double>(), x};
      return sampling_reconstruction_loss(i1, u);
    };
    return finite_diff_check(f, k, st, tl);
  }});

  std::vector<OpGradResult> results;
  for (const auto& c : cases) {
    OpGradResult res;
    res.op = c.name;
    res.seeds = seeds;
    for (int s = 0; s < seeds; ++s) {
      Rng rng(Rng::mix(base_seed, (static_cast<uint64_t>(s) << 16) ^
                                      std::hash<std::string>{}(res.op)));
      auto rep = c.check(rng, step, tol);
      res.max_rel_err = std::max(res.max_rel_err, rep.max_rel_err);
      res.pass = res.pass && rep.pass;
    }
    results.push_back(std::move(res));
  }
  return results;
}

// Whole-pipeline probe: a small double-precision model, both flow directions,
// every loss term, gradients of sampled weights against central differences.
// Occlusion masks are frozen from the unperturbed weights so the perturbed
// evaluations differentiate a fixed composition. One row per parameter.
inline std::vector<OpGradResult> run_end2end_gradcheck(int samples_per_param = 3,
                                                       double step = 1e-6,
                                                       double tol = 1e-3,
                                                       uint64_t seed = 112) {
  NetworkConfig cfg;
  cfg.num_levels = 2;
  cfg.channels = {8, 12, 12};
  cfg.corr_radius = 2;
  cfg.est_widths = {12, 12};
  cfg.subnet_base = 8;
  Model<double> model(cfg, 13);

  Rng rng(seed);
  auto i1 = detail::random_tensor(rng, Shape{16, 16, 3}, 0.0, 1.0);
  auto i2 = detail::random_tensor(rng, Shape{16, 16, 3}, 0.0, 1.0);

  Tensor<double> occ_f, occ_b;
  {
    NoGradScope<double> no_grad;
    auto fwd = model.forward(i1, i2);
    auto bwd = model.forward(i2, i1);
    occ_f = occlusion_mask(fwd.flow, bwd.flow);
    occ_b = occlusion_mask(bwd.flow, fwd.flow);
  }

  auto objective = [&]() {
    auto fwd = model.forward(i1, i2);
    auto bwd = model.forward(i2, i1);
    auto photo = add(photometric_loss(i1, i2, fwd.flow, occ_f).value,
                     photometric_loss(i2, i1, bwd.flow, occ_b).value);
    auto census = census_loss(i1, warp_bilinear(i2, fwd.flow, WarpBorder::kClamp),
                              occ_f, 2);
    auto smooth = smooth_loss(fwd.flow, i1);
    auto rec = sampling_reconstruction_loss(i1, fwd.u_kernels);
    return total_loss(photo, smooth, census.value, Tensor<double>::scalar(0.0),
                      rec, LossWeights{});
  };

  GradientTape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(objective());
  }

  const std::vector<std::string> names = {"est.level0.head.w", "subnet.head_u.2.w",
                                          "enc.level1.c1.w", "subnet.dec0.c2.w",
                                          "est.level1.dense0.b"};
  Rng pick(Rng::mix(seed, 0x9D5));
  std::vector<OpGradResult> results;
  for (const auto& name : names) {
    auto w = model.params().find(name);
    const auto& analytic = w.grad();
    OpGradResult res;
    res.op = name;
    res.seeds = samples_per_param;
    for (int trial = 0; trial < samples_per_param; ++trial) {
      const auto idx =
          static_cast<size_t>(pick.uniform_int(static_cast<int64_t>(w.size())));
      auto& values = w.raw_value();
      const double saved = values[idx];
      values[idx] = saved + step;
      const double up = objective().item();
      values[idx] = saved - step;
      const double down = objective().item();
      values[idx] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = rel_err(analytic[idx], numeric);
      res.max_rel_err = std::max(res.max_rel_err, err);
      res.pass = res.pass && err < tol;
    }
    results.push_back(std::move(res));
  }
  return results;
}

}  // namespace apsflow
