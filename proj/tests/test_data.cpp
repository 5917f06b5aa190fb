#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "apsflow/colorize.hpp"
#include "apsflow/flow_io.hpp"
#include "apsflow/metrics.hpp"
#include "apsflow/png_io.hpp"
#include "apsflow/synth.hpp"
#include "oracles.hpp"

using namespace apsflow;

namespace {

std::string temp_path(const char* name) {
  return std::string("/tmp/apsflow_test_") + name;
}

template <typename T>
T bilinear_at(const Tensor<T>& img, double x, double y, int c) {
  const int w = img.dim(1), h = img.dim(0), ch = img.dim(2);
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto at = [&](int yy, int xx) {
    yy = std::clamp(yy, 0, h - 1);
    xx = std::clamp(xx, 0, w - 1);
    return static_cast<double>(
        img.data()[(static_cast<size_t>(yy) * w + xx) * ch + c]);
  };
  return static_cast<T>((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                        fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)));
}

}  // namespace

TEST_CASE("a layerless scene moves by one global translation") {
  SceneParams params;
  params.num_layers = 0;
  params.height = 32;
  params.width = 32;
  auto scene = generate_scene<double>(77, params);
  const double u = scene.flow_gt.data()[0], v = scene.flow_gt.data()[1];
  for (int p = 0; p < 32 * 32; ++p) {
    CHECK(scene.flow_gt.data()[p * 2] == u);
    CHECK(scene.flow_gt.data()[p * 2 + 1] == v);
  }
  CHECK(std::abs(u) <= params.max_motion);
  CHECK(std::abs(v) <= params.max_motion);
}

TEST_CASE("scene generation is bit-identical per seed") {
  SceneParams params;
  params.height = 24;
  params.width = 24;
  auto a = generate_scene<float>(5, params);
  auto b = generate_scene<float>(5, params);
  auto c = generate_scene<float>(6, params);
  CHECK(std::memcmp(a.img1_ext.data(), b.img1_ext.data(),
                    sizeof(float) * static_cast<size_t>(a.img1_ext.size())) == 0);
  CHECK(std::memcmp(a.flow_gt.data(), b.flow_gt.data(),
                    sizeof(float) * static_cast<size_t>(a.flow_gt.size())) == 0);
  CHECK(std::memcmp(a.img1.data(), c.img1.data(),
                    sizeof(float) * static_cast<size_t>(a.img1.size())) != 0);
}

TEST_CASE("warping frame 2 by the true flow reproduces frame 1 where visible") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    SceneParams params;
    params.height = 32;
    params.width = 32;
    params.num_layers = 1 + static_cast<int>(seed % 4);
    auto scene = generate_scene<double>(seed, params);
    const int m = scene.margin;
    double worst = 0;
    int visible = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const size_t p = static_cast<size_t>(y) * 32 + x;
        if (scene.occlusion.data()[p] == 0.0) continue;
        ++visible;
        const double qx = x + m + scene.flow_gt.data()[p * 2];
        const double qy = y + m + scene.flow_gt.data()[p * 2 + 1];
        for (int c = 0; c < 3; ++c) {
          const double warped = bilinear_at(scene.img2_ext, qx, qy, c);
          const double direct = scene.img1.data()[p * 3 + c];
          worst = std::max(worst, std::abs(warped - direct));
        }
      }
    CAPTURE(seed);
    CHECK(visible > 32 * 32 / 4);
    CHECK(worst <= 2.0 / 255.0);
  }
}

TEST_CASE("occlusion marks pixels whose target leaves the crop") {
  SceneParams params;
  params.num_layers = 0;
  params.height = 16;
  params.width = 16;
  params.max_motion = 5.0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    auto scene = generate_scene<double>(seed, params);
    const double u = scene.flow_gt.data()[0], v = scene.flow_gt.data()[1];
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const bool inside = x + u >= 0 && x + u <= 15 && y + v >= 0 && y + v <= 15;
        CHECK(scene.occlusion.data()[static_cast<size_t>(y) * 16 + x] ==
              (inside ? 1.0 : 0.0));
      }
  }
}

TEST_CASE("dataset indexing is deterministic and bounded") {
  SceneDataset ds;
  ds.seed = 9;
  ds.count = 4;
  ds.params.height = ds.params.width = 16;
  ds.validate();
  auto a = ds.scene<float>(2);
  auto b = ds.scene<float>(2);
  CHECK(std::memcmp(a.img1.data(), b.img1.data(),
                    sizeof(float) * static_cast<size_t>(a.img1.size())) == 0);
  CHECK_THROWS_AS(ds.scene<float>(4), ContractError);
  SceneDataset empty;
  empty.count = 0;
  CHECK_THROWS_AS(empty.validate(), ContractError);
}

TEST_CASE("perfect predictions score zero") {
  Rng rng(300);
  auto gt = oracles::random_tensor<float>(rng, Shape{6, 6, 2}, -4.0, 4.0);
  auto m = compute_metrics(gt, gt);
  CHECK(m.epe_all == 0.0);
  CHECK(m.f1_all == 0.0);
  CHECK(!m.epe_noc.has_value());
  CHECK(!m.epe_occ.has_value());
}

TEST_CASE("a constant (3,4) offset gives endpoint error 5") {
  Rng rng(301);
  auto gt = oracles::random_tensor<float>(rng, Shape{5, 5, 2}, -2.0, 2.0);
  auto pred = Tensor<float>(gt.shape(),
                            std::vector<float>(gt.data(), gt.data() + gt.size()));
  for (int p = 0; p < 25; ++p) {
    pred.raw_value()[static_cast<size_t>(p) * 2] += 3.0f;
    pred.raw_value()[static_cast<size_t>(p) * 2 + 1] += 4.0f;
  }
  auto m = compute_metrics(pred, gt);
  CHECK(m.epe_all == doctest::Approx(5.0).epsilon(1e-6));
  CHECK(m.f1_all == 1.0);  // error 5 > 3 px and > 5% of any magnitude here
}

TEST_CASE("metrics match a hand-computed per-pixel table") {
  // 2x2 flows chosen so every branch of the F1 rule fires.
  auto gt = Tensor<double>::zeros(Shape{2, 2, 2});
  auto pred = Tensor<double>::zeros(Shape{2, 2, 2});
  auto set = [](Tensor<double>& t, int p, double u, double v) {
    t.raw_value()[static_cast<size_t>(p) * 2] = u;
    t.raw_value()[static_cast<size_t>(p) * 2 + 1] = v;
  };
  set(gt, 0, 0, 0);    set(pred, 0, 4, 0);     // err 4 > 3, >5% of 0 -> bad
  set(gt, 1, 100, 0);  set(pred, 1, 104, 0);   // err 4 > 3 but 4% of 100 -> ok
  set(gt, 2, 10, 0);   set(pred, 2, 12, 0);    // err 2 < 3 -> ok
  set(gt, 3, 0, 2);    set(pred, 3, 0, -2);    // err 4 > 3, >5% of 2 -> bad
  auto mask = Tensor<double>::zeros(Shape{2, 2, 1});
  mask.raw_value() = {1, 1, 0, 0};

  auto m = compute_metrics(pred, gt, mask);
  CHECK(m.epe_all == doctest::Approx((4 + 4 + 2 + 4) / 4.0).epsilon(1e-12));
  CHECK(m.f1_all == doctest::Approx(0.5).epsilon(1e-12));
  REQUIRE(m.epe_noc.has_value());
  REQUIRE(m.epe_occ.has_value());
  CHECK(*m.epe_noc == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(*m.epe_occ == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(m.count_noc == 2);
  CHECK(m.count_occ == 2);
}

TEST_CASE("an all-visible mask leaves the occluded split absent") {
  Rng rng(302);
  auto gt = oracles::random_tensor<double>(rng, Shape{3, 3, 2}, -1.0, 1.0);
  auto mask = Tensor<double>::zeros(Shape{3, 3, 1});
  std::fill(mask.raw_value().begin(), mask.raw_value().end(), 1.0);
  auto m = compute_metrics(gt, gt, mask);
  CHECK(m.epe_noc.has_value());
  CHECK(!m.epe_occ.has_value());
}

TEST_CASE("metric accumulation equals pooling the pixels") {
  Rng rng(303);
  auto gt1 = oracles::random_tensor<float>(rng, Shape{4, 4, 2}, -3.0, 3.0);
  auto p1 = oracles::random_tensor<float>(rng, Shape{4, 4, 2}, -3.0, 3.0);
  auto gt2 = oracles::random_tensor<float>(rng, Shape{2, 2, 2}, -3.0, 3.0);
  auto p2 = oracles::random_tensor<float>(rng, Shape{2, 2, 2}, -3.0, 3.0);
  auto a = compute_metrics(p1, gt1);
  a.accumulate(compute_metrics(p2, gt2));
  const double want =
      (compute_metrics(p1, gt1).epe_all * 16 + compute_metrics(p2, gt2).epe_all * 4) / 20;
  CHECK(a.epe_all == doctest::Approx(want).epsilon(1e-12));
  CHECK(a.count_all == 20);
}

TEST_CASE("flow files round-trip bit-exactly") {
  Rng rng(304);
  const auto path = temp_path("roundtrip.flo");
  for (int trial = 0; trial < 10; ++trial) {
    const int h = 1 + static_cast<int>(rng.uniform_int(12));
    const int w = 1 + static_cast<int>(rng.uniform_int(12));
    auto flow = oracles::random_tensor<float>(rng, Shape{h, w, 2}, -50.0, 50.0);
    write_flo(path, flow);
    auto back = read_flo(path);
    REQUIRE(back.same_shape(flow));
    CHECK(std::memcmp(back.data(), flow.data(),
                      sizeof(float) * static_cast<size_t>(flow.size())) == 0);
  }
  std::remove(path.c_str());
}

TEST_CASE("a 1x1 zero flow file is exactly 20 bytes") {
  const auto path = temp_path("tiny.flo");
  write_flo(path, Tensor<float>::zeros(Shape{1, 1, 2}));
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  CHECK(in.tellg() == std::streamoff(20));
  std::remove(path.c_str());
}

TEST_CASE("bad magic and truncated flow files are rejected") {
  const auto path = temp_path("bad.flo");
  {
    std::ofstream out(path, std::ios::binary);
    const float magic = 123.0f;
    const int32_t dims[2] = {1, 1};
    out.write(reinterpret_cast<const char*>(&magic), 4);
    out.write(reinterpret_cast<const char*>(dims), 8);
    const float uv[2] = {0, 0};
    out.write(reinterpret_cast<const char*>(uv), 8);
  }
  CHECK_THROWS_AS(read_flo(path), FormatError);
  {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(&kFlowMagic), 4);
    const int32_t dims[2] = {4, 4};
    out.write(reinterpret_cast<const char*>(dims), 8);
    const float nothing = 0;
    out.write(reinterpret_cast<const char*>(&nothing), 4);  // far too short
  }
  CHECK_THROWS_AS(read_flo(path), FormatError);
  CHECK_THROWS_AS(read_flo("/nonexistent/dir/x.flo"), IoError);
  std::remove(path.c_str());
}

TEST_CASE("png write-read returns the quantized image") {
  Rng rng(305);
  const auto path = temp_path("img.png");
  auto img = oracles::random_tensor<float>(rng, Shape{9, 13, 3}, 0.0, 1.0);
  write_png(path, img);
  auto back = read_png(path);
  REQUIRE(back.same_shape(img));
  for (int64_t i = 0; i < img.size(); ++i) {
    const float quantized = std::lround(img.data()[i] * 255.0f) / 255.0f;
    CHECK(back.data()[i] == doctest::Approx(quantized).epsilon(1e-7));
  }
  std::remove(path.c_str());
}

TEST_CASE("png reader rejects garbage") {
  const auto path = temp_path("garbage.png");
  {
    std::ofstream out(path, std::ios::binary);
    out << "definitely not a png";
  }
  CHECK_THROWS_AS(read_png(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("zero flow renders as white") {
  auto img = flow_to_color(Tensor<float>::zeros(Shape{4, 4, 2}), 10.0);
  for (int64_t i = 0; i < img.size(); ++i)
    CHECK(img.data()[i] == doctest::Approx(1.0f).epsilon(1e-6));
}

TEST_CASE("opposite vectors land on diametrically opposite wheel colors") {
  const auto& wheel = flow_colorwheel();
  const int ncols = static_cast<int>(wheel.size());
  auto flow = Tensor<float>::zeros(Shape{1, 2, 2});
  const double angle = 0.7;
  flow.raw_value()[0] = static_cast<float>(10 * std::cos(angle));
  flow.raw_value()[1] = static_cast<float>(10 * std::sin(angle));
  flow.raw_value()[2] = -flow.raw_value()[0];
  flow.raw_value()[3] = -flow.raw_value()[1];
  auto img = flow_to_color(flow, 10.0);  // both at full saturation

  // Recover each pixel's wheel position and check the half-circle offset.
  auto fk_of = [&](double u, double v) {
    return (std::atan2(-v, -u) / M_PI + 1.0) / 2.0 * (ncols - 1);
  };
  const double delta = std::fmod(std::abs(fk_of(flow.data()[0], flow.data()[1]) -
                                          fk_of(flow.data()[2], flow.data()[3])),
                                 static_cast<double>(ncols));
  CHECK(delta == doctest::Approx((ncols - 1) / 2.0).epsilon(1e-9));
  bool differs = false;
  for (int c = 0; c < 3; ++c)
    if (std::abs(img.data()[c] - img.data()[3 + c]) > 0.2) differs = true;
  CHECK(differs);
}

TEST_CASE("halving magnitude halves saturation at fixed scale") {
  auto flow = Tensor<float>::zeros(Shape{1, 2, 2});
  flow.raw_value()[0] = 6.0f;
  flow.raw_value()[1] = -2.0f;
  flow.raw_value()[2] = 3.0f;
  flow.raw_value()[3] = -1.0f;
  auto img = flow_to_color(flow, 10.0);
  for (int c = 0; c < 3; ++c) {
    const float full = 1.0f - img.data()[c];
    const float half = 1.0f - img.data()[3 + c];
    CHECK(half == doctest::Approx(full / 2).epsilon(1e-5));
  }
}

TEST_CASE("error map brightness is proportional to endpoint error") {
  auto gt = Tensor<float>::zeros(Shape{1, 3, 2});
  auto pred = Tensor<float>::zeros(Shape{1, 3, 2});
  pred.raw_value() = {1, 0, 2, 0, 4, 0};
  auto img = error_to_brightness(pred, gt, 4.0);
  CHECK(img.data()[0] == doctest::Approx(0.25f));
  CHECK(img.data()[3] == doctest::Approx(0.5f));
  CHECK(img.data()[6] == doctest::Approx(1.0f));
}

TEST_CASE("heat colormap spans black to white") {
  float rgb[3];
  heat_color(0.0, rgb);
  CHECK(rgb[0] == 0.0f);
  CHECK(rgb[2] == 0.0f);
  heat_color(1.0, rgb);
  CHECK(rgb[0] == 1.0f);
  CHECK(rgb[1] == 1.0f);
  CHECK(rgb[2] == 1.0f);
  auto field = Tensor<double>::zeros(Shape{1, 1, 1});
  field.raw_value()[0] = 0.5;
  auto img = heatmap(field, 0.0, 1.0);
  CHECK(img.data()[0] == 1.0f);  // red saturates first
}
