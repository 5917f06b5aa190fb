#pragma once

// Endpoint-error metrics with occlusion splits. Splits with no pixels are
// reported as absent rather than zero.

#include <cmath>
#include <optional>

#include "common.hpp"
#include "tensor.hpp"

namespace apsflow {

struct Metrics {
  double epe_all = 0;
  double f1_all = 0;  // fraction with error > 3 px and > 5% of true magnitude
  std::optional<double> epe_noc;
  std::optional<double> epe_occ;
  int64_t count_all = 0;
  int64_t count_noc = 0;
  int64_t count_occ = 0;

  Metrics& accumulate(const Metrics& other) {
    auto merge = [](std::optional<double>& into, int64_t n_into,
                    const std::optional<double>& from, int64_t n_from) {
      if (!from) return;
      const double sum = into.value_or(0.0) * static_cast<double>(n_into) +
                         *from * static_cast<double>(n_from);
      into = sum / static_cast<double>(n_into + n_from);
    };
    merge(epe_noc, count_noc, other.epe_noc, other.count_noc);
    merge(epe_occ, count_occ, other.epe_occ, other.count_occ);
    const auto n = static_cast<double>(count_all), o = static_cast<double>(other.count_all);
    if (count_all + other.count_all > 0) {
      epe_all = (epe_all * n + other.epe_all * o) / (n + o);
      f1_all = (f1_all * n + other.f1_all * o) / (n + o);
    }
    count_all += other.count_all;
    count_noc += other.count_noc;
    count_occ += other.count_occ;
    return *this;
  }
};

// With a default-constructed occlusion tensor only the ALL split is produced.
// Mask value 1 marks visible (non-occluded) pixels.
template <typename T>
Metrics compute_metrics(const Tensor<T>& pred, const Tensor<T>& gt,
                        const Tensor<T>& occlusion = Tensor<T>()) {
  APSFLOW_CHECK(pred.same_shape(gt), ShapeError,
                "metrics: prediction " << shape_str(pred.shape()) << " vs truth "
                                       << shape_str(gt.shape()));
  APSFLOW_CHECK(pred.rank() == 3 && pred.dim(2) == 2, ShapeError,
                "metrics: flows must be (H, W, 2)");
  const bool has_mask = occlusion.defined();
  if (has_mask)
    APSFLOW_CHECK(occlusion.size() == pred.size() / 2, ShapeError,
                  "metrics: occlusion mask " << shape_str(occlusion.shape())
                                             << " does not match flow "
                                             << shape_str(pred.shape()));
  const int64_t n = pred.size() / 2;

  Metrics out;
  double sum_all = 0, sum_noc = 0, sum_occ = 0, bad = 0;
  for (int64_t p = 0; p < n; ++p) {
    const double du = static_cast<double>(pred.data()[p * 2]) - gt.data()[p * 2];
    const double dv = static_cast<double>(pred.data()[p * 2 + 1]) - gt.data()[p * 2 + 1];
    const double err = std::hypot(du, dv);
    const double mag = std::hypot(static_cast<double>(gt.data()[p * 2]),
                                  static_cast<double>(gt.data()[p * 2 + 1]));
    sum_all += err;
    if (err > 3.0 && err > 0.05 * mag) bad += 1;
    out.count_all += 1;
    if (has_mask) {
      if (occlusion.data()[p] != T(0)) {
        sum_noc += err;
        out.count_noc += 1;
      } else {
        sum_occ += err;
        out.count_occ += 1;
      }
    }
  }
  APSFLOW_CHECK(out.count_all > 0, ContractError, "metrics: empty flow");
  out.epe_all = sum_all / static_cast<double>(out.count_all);
  out.f1_all = bad / static_cast<double>(out.count_all);
  if (out.count_noc > 0) out.epe_noc = sum_noc / static_cast<double>(out.count_noc);
  if (out.count_occ > 0) out.epe_occ = sum_occ / static_cast<double>(out.count_occ);
  return out;
}

}  // namespace apsflow
