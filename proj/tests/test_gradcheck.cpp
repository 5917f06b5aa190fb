#include <doctest.h>

#include "apsflow/gradcheck.hpp"
#include "oracles.hpp"

using namespace apsflow;

TEST_CASE("every registered op passes finite-difference checks over 20 seeds") {
  auto results = run_op_gradchecks(20, 1e-5, 1e-4);
  CHECK(results.size() > 30);
  for (const auto& r : results) {
    INFO(r.op, " max rel err ", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("CAP-then-sum gradient w.r.t. sampling scores") {
  Rng rng(51);
  auto raw = oracles::random_tensor<double>(rng, {4, 4, 11}, -1, 1);
  auto feature = oracles::random_tensor<double>(rng, {4, 4, 3});
  auto rep = finite_diff_check(
      [&](const Tensor<double>& m) {
        auto kernels = adaptive_gumbel_softmax(split_sampling_map(m, MapRole::kCapG));
        return reduce_sum(cap_pool(feature, kernels, 2));
      },
      raw);
  INFO("max rel err ", rep.max_rel_err);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("AFU-then-sum gradient w.r.t. sampling scores") {
  Rng rng(52);
  auto raw = oracles::random_tensor<double>(rng, {6, 6, 11}, -1, 1);
  auto flow = oracles::random_tensor<double>(rng, {3, 3, 2}, -2, 2);
  auto rep = finite_diff_check(
      [&](const Tensor<double>& m) {
        auto kernels = adaptive_gumbel_softmax(split_sampling_map(m, MapRole::kAfuU));
        return reduce_sum(afu_upsample(flow, kernels, 2, true));
      },
      raw);
  INFO("max rel err ", rep.max_rel_err);
  CHECK(rep.max_rel_err < 1e-4);
}
