#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "apsflow/gradcheck.hpp"
#include "apsflow/losses.hpp"
#include "apsflow/network.hpp"
#include "oracles.hpp"

using namespace apsflow;

namespace {

NetworkConfig toy_config() {
  NetworkConfig cfg;
  cfg.num_levels = 2;
  cfg.channels = {8, 12, 12};
  cfg.corr_radius = 2;
  cfg.est_widths = {12, 12};
  cfg.subnet_base = 8;
  return cfg;
}

template <typename T>
Tensor<T> random_image(Rng& rng, int h, int w) {
  return oracles::random_tensor<T>(rng, Shape{h, w, 3}, 0.0, 1.0);
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(static_cast<double>(t.data()[i]))) return false;
  return true;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("pyramid schedule: map and feature sizes halve per level") {
  Rng rng(100);
  Model<float> model(toy_config(), 5);
  auto i1 = random_image<float>(rng, 16, 16);
  auto i2 = random_image<float>(rng, 16, 16);
  auto out = model.forward(i1, i2);

  REQUIRE(out.u_kernels.size() == 3);
  REQUIRE(out.g1_kernels.size() == 3);
  REQUIRE(out.g2_kernels.size() == 3);
  for (int i = 0; i <= 2; ++i) {
    const int side = 16 >> (2 - i);
    for (const auto* maps : {&out.u_kernels, &out.g1_kernels, &out.g2_kernels}) {
      const auto& m = (*maps)[static_cast<size_t>(i)];
      CHECK(m.dim(0) == side);
      CHECK(m.dim(1) == side);
      CHECK(m.dim(2) == 9);
    }
    const auto& f = out.f1[static_cast<size_t>(i)];
    CHECK(f.dim(0) == side);
    CHECK(f.dim(1) == side);
    CHECK(f.dim(2) == toy_config().channels[static_cast<size_t>(i)]);
  }
  REQUIRE(out.level_flows.size() == 2);
  CHECK(out.level_flows[0].dim(0) == 4);
  CHECK(out.level_flows[1].dim(0) == 8);
  CHECK(out.flow.dim(0) == 16);
  CHECK(out.flow.dim(1) == 16);
  CHECK(out.flow.dim(2) == 2);
  CHECK(all_finite(out.flow));
}

TEST_CASE("identical inputs give bitwise-identical pooling maps for both images") {
  Rng rng(101);
  Model<double> model(toy_config(), 6);
  auto img = random_image<double>(rng, 16, 16);
  auto out = model.forward(img, img);
  for (size_t i = 0; i < out.g1_kernels.size(); ++i)
    CHECK(bitwise_equal(out.g1_kernels[i], out.g2_kernels[i]));
  for (size_t i = 0; i < out.f1.size(); ++i) CHECK(bitwise_equal(out.f1[i], out.f2[i]));
}

TEST_CASE("forward is deterministic") {
  Rng rng(102);
  Model<float> model(toy_config(), 7);
  auto i1 = random_image<float>(rng, 16, 16);
  auto i2 = random_image<float>(rng, 16, 16);
  auto a = model.forward(i1, i2);
  auto b = model.forward(i1, i2);
  CHECK(bitwise_equal(a.flow, b.flow));
  CHECK(bitwise_equal(a.level_flows[0], b.level_flows[0]));
}

TEST_CASE("swapping inputs reproduces the reverse-direction flow bit-exactly") {
  Rng rng(103);
  Model<float> model(toy_config(), 8);
  auto i1 = random_image<float>(rng, 16, 16);
  auto i2 = random_image<float>(rng, 16, 16);
  auto back = model.backward_flow(i1, i2);
  auto swapped = model.forward(i2, i1);
  CHECK(bitwise_equal(back.flow, swapped.flow));
}

TEST_CASE("a single-pixel perturbation stays inside the map receptive field") {
  Rng rng(104);
  Model<float> model(NetworkConfig{}, 9);
  auto i1 = random_image<float>(rng, 64, 64);
  auto i2 = random_image<float>(rng, 64, 64);
  auto base = model.forward(i1, i2);

  auto poked = Tensor<float>(i1.shape(), std::vector<float>(i1.data(), i1.data() + i1.size()));
  poked.raw_value()[(2 * 64 + 2) * 3] += 0.25f;  // pixel (2,2), red channel
  auto moved = model.forward(poked, i2);

  // Trunk receptive field radius is under 36 input pixels, so any map cell
  // whose footprint starts at x,y >= 40 cannot see pixel (2,2).
  bool changed_near = false;
  for (size_t i = 0; i < base.g1_kernels.size(); ++i) {
    const auto& a = base.g1_kernels[i];
    const auto& b = moved.g1_kernels[i];
    const int side = a.dim(0);
    const int stride_px = 64 / side;
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        for (int ch = 0; ch < 9; ++ch) {
          const size_t idx = (static_cast<size_t>(y) * side + x) * 9 + ch;
          if (a.data()[idx] != b.data()[idx]) {
            if (y * stride_px >= 40 && x * stride_px >= 40) {
              CAPTURE(i);
              CAPTURE(y);
              CAPTURE(x);
              FAIL_CHECK("far cell changed");
            } else {
              changed_near = true;
            }
          }
        }
  }
  CHECK(changed_near);
}

TEST_CASE("zeroed encoder weights produce all-zero feature pyramids") {
  Rng rng(105);
  Model<double> model(toy_config(), 10);
  for (const auto& [name, t] : model.params().items()) {
    if (name.rfind("enc.", 0) == 0) {
      auto p = model.params().find(name);
      std::fill(p.raw_value().begin(), p.raw_value().end(), 0.0);
    }
  }
  auto img = random_image<double>(rng, 16, 16);
  auto out = model.forward(img, img);
  for (const auto& f : out.f1)
    for (int64_t i = 0; i < f.size(); ++i) CHECK(f.data()[i] == 0.0);
}

TEST_CASE("correlation volume matches a brute-force normalized-dot loop") {
  Rng rng(106);
  const int h = 5, w = 5, c = 4, d = 2;
  auto f1 = oracles::random_tensor<double>(rng, Shape{h, w, c}, -1.0, 1.0);
  auto f2 = oracles::random_tensor<double>(rng, Shape{h, w, c}, -1.0, 1.0);
  auto cv = Model<double>::correlation_volume(f1, f2, d);
  REQUIRE(cv.dim(2) == 25);

  auto normalize = [&](const Tensor<double>& f, int y, int x, int ch) {
    double ss = 0;
    for (int k = 0; k < c; ++k) {
      double v = f.data()[(static_cast<size_t>(y) * w + x) * c + k];
      ss += v * v;
    }
    return f.data()[(static_cast<size_t>(y) * w + x) * c + ch] /
           std::sqrt(ss + 1e-8);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int dy = -d; dy <= d; ++dy)
        for (int dx = -d; dx <= d; ++dx) {
          double want = 0;
          if (y + dy >= 0 && y + dy < h && x + dx >= 0 && x + dx < w)
            for (int k = 0; k < c; ++k)
              want += normalize(f1, y, x, k) * normalize(f2, y + dy, x + dx, k);
          const int ch = (dy + d) * (2 * d + 1) + (dx + d);
          const double got =
              cv.data()[(static_cast<size_t>(y) * w + x) * 25 + ch];
          CHECK(got == doctest::Approx(want).epsilon(1e-10));
        }
}

TEST_CASE("matching features maximize the zero-offset correlation channel") {
  Rng rng(107);
  const int h = 6, w = 6, c = 8, d = 1;
  auto f = oracles::random_tensor<double>(rng, Shape{h, w, c}, -1.0, 1.0);
  auto cv = Model<double>::correlation_volume(f, f, d);
  const int nd = (2 * d + 1) * (2 * d + 1);
  const int center = nd / 2;
  for (int p = 0; p < h * w; ++p) {
    const double self = cv.data()[static_cast<size_t>(p) * nd + center];
    for (int ch = 0; ch < nd; ++ch)
      CHECK(self + 1e-9 >= cv.data()[static_cast<size_t>(p) * nd + ch]);
  }
}

TEST_CASE("oversized correlation displacement is rejected") {
  Rng rng(108);
  auto f = oracles::random_tensor<double>(rng, Shape{4, 4, 3}, -1.0, 1.0);
  CHECK_THROWS_AS(Model<double>::correlation_volume(f, f, 4), ContractError);
}

TEST_CASE("pooling and upsampling substitutes run with identical output shapes") {
  Rng rng(109);
  auto i1 = random_image<float>(rng, 16, 16);
  auto i2 = random_image<float>(rng, 16, 16);
  for (auto pooling : {PoolKind::kCap, PoolKind::kAverage, PoolKind::kMax,
                       PoolKind::kStridedConv}) {
    for (auto up : {UpKind::kAfu, UpKind::kBilinear}) {
      auto cfg = toy_config();
      cfg.pooling = pooling;
      cfg.upsampling = up;
      Model<float> model(cfg, 11);
      auto out = model.forward(i1, i2);
      CHECK(out.flow.dim(0) == 16);
      CHECK(out.flow.dim(1) == 16);
      CHECK(out.flow.dim(2) == 2);
      CHECK(all_finite(out.flow));
    }
  }
}

TEST_CASE("config validation rejects malformed setups") {
  auto cfg = toy_config();
  cfg.channels = {8, 12};  // needs N+1 entries
  CHECK_THROWS_AS(Model<double>(cfg, 1), ContractError);
  auto cfg2 = toy_config();
  cfg2.num_levels = 1;
  cfg2.channels = {8, 12};
  CHECK_THROWS_AS(Model<double>(cfg2, 1), ContractError);
  Rng rng(110);
  Model<double> ok(toy_config(), 1);
  auto img = random_image<double>(rng, 10, 10);  // not divisible by 4
  CHECK_THROWS_AS(ok.forward(img, img), ContractError);
}

TEST_CASE("inference does not grow gradient state") {
  Rng rng(111);
  Model<float> model(toy_config(), 12);
  auto i1 = random_image<float>(rng, 16, 16);
  auto i2 = random_image<float>(rng, 16, 16);
  auto flow = model.infer(i1, i2);
  CHECK(!flow.requires_grad());
  CHECK(all_finite(flow));
}

namespace {

// Small but complete objective used to probe end-to-end differentiability:
// both flow directions, occlusion masks frozen from the unperturbed weights.
double toy_total_loss(Model<double>& model, const Tensor<double>& i1,
                      const Tensor<double>& i2, const Tensor<double>& occ_f,
                      const Tensor<double>& occ_b) {
  auto fwd = model.forward(i1, i2);
  auto bwd = model.forward(i2, i1);
  auto photo_f = photometric_loss(i1, i2, fwd.flow, occ_f);
  auto photo_b = photometric_loss(i2, i1, bwd.flow, occ_b);
  auto warped = warp_bilinear(i2, fwd.flow, WarpBorder::kClamp);
  auto census = census_loss(i1, warped, occ_f, 2);
  auto smooth = smooth_loss(fwd.flow, i1);
  auto rec = sampling_reconstruction_loss(i1, fwd.u_kernels);
  LossWeights weights;
  auto total = total_loss(add(photo_f.value, photo_b.value), smooth, census.value,
                          Tensor<double>::scalar(0.0), rec, weights);
  return total.item();
}

}  // namespace

TEST_CASE("sampled weight gradients of a full objective match finite differences") {
  Rng rng(112);
  Model<double> model(toy_config(), 13);
  auto i1 = random_image<double>(rng, 16, 16);
  auto i2 = random_image<double>(rng, 16, 16);

  Tensor<double> occ_f, occ_b;
  {
    NoGradScope<double> no_grad;
    auto fwd = model.forward(i1, i2);
    auto bwd = model.forward(i2, i1);
    occ_f = occlusion_mask(fwd.flow, bwd.flow);
    occ_b = occlusion_mask(bwd.flow, fwd.flow);
  }

  // One backward pass gives analytic gradients for every parameter at once.
  std::vector<std::string> names = {"est.level0.head.w", "subnet.head_u.2.w",
                                    "enc.level1.c1.w", "subnet.dec0.c2.w",
                                    "est.level1.dense0.b"};
  GradientTape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto fwd = model.forward(i1, i2);
    auto bwd = model.forward(i2, i1);
    auto photo_f = photometric_loss(i1, i2, fwd.flow, occ_f);
    auto photo_b = photometric_loss(i2, i1, bwd.flow, occ_b);
    auto warped = warp_bilinear(i2, fwd.flow, WarpBorder::kClamp);
    auto census = census_loss(i1, warped, occ_f, 2);
    auto smooth = smooth_loss(fwd.flow, i1);
    auto rec = sampling_reconstruction_loss(i1, fwd.u_kernels);
    LossWeights weights;
    auto total = total_loss(add(photo_f.value, photo_b.value), smooth, census.value,
                            Tensor<double>::scalar(0.0), rec, weights);
    tape.backward(total);
  }

  Rng pick(113);
  const double step = 1e-6, tol = 1e-3;
  for (const auto& name : names) {
    auto w = model.params().find(name);
    REQUIRE(w.has_grad());
    const auto& analytic = w.grad();
    for (int trial = 0; trial < 3; ++trial) {
      const auto idx = static_cast<size_t>(pick.uniform_int(static_cast<int>(w.size())));
      auto& values = w.raw_value();
      const double saved = values[idx];
      values[idx] = saved + step;
      const double up = toy_total_loss(model, i1, i2, occ_f, occ_b);
      values[idx] = saved - step;
      const double down = toy_total_loss(model, i1, i2, occ_f, occ_b);
      values[idx] = saved;
      const double numeric = (up - down) / (2.0 * step);
      CAPTURE(name);
      CAPTURE(idx);
      CHECK(rel_err(analytic[idx], numeric) < tol);
    }
  }
}

TEST_CASE("feature similarity maps: self map is exactly 1 at the query pixel") {
  Model<float> model(toy_config(), 21);
  Rng rng(22);
  auto i1 = random_image<float>(rng, 16, 16);
  auto i2 = random_image<float>(rng, 16, 16);
  const int x = 5, y = 9;
  auto [self_map, cross_map] = feature_similarity(model, i1, i2, x, y);
  CHECK(self_map.shape() == Shape{16, 16, 1});
  CHECK(cross_map.shape() == Shape{16, 16, 1});
  CHECK(self_map.data()[y * 16 + x] == 1.0f);
  for (int64_t i = 0; i < self_map.size(); ++i) {
    CHECK(self_map.data()[i] >= -1.0f);
    CHECK(self_map.data()[i] <= 1.0f);
    CHECK(cross_map.data()[i] >= -1.0f);
    CHECK(cross_map.data()[i] <= 1.0f);
  }
}

TEST_CASE("feature similarity maps: identical frames make both maps bitwise equal") {
  Model<float> model(toy_config(), 23);
  Rng rng(24);
  auto img = random_image<float>(rng, 16, 16);
  auto [self_map, cross_map] = feature_similarity(model, img, img, 11, 3);
  CHECK(bitwise_equal(self_map, cross_map));
}

TEST_CASE("feature similarity maps: query outside the frame is rejected") {
  Model<float> model(toy_config(), 25);
  Rng rng(26);
  auto i1 = random_image<float>(rng, 16, 16);
  auto i2 = random_image<float>(rng, 16, 16);
  CHECK_THROWS_AS(feature_similarity(model, i1, i2, 16, 0), ContractError);
  CHECK_THROWS_AS(feature_similarity(model, i1, i2, 0, -1), ContractError);
}
