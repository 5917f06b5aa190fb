#include <doctest.h>

#include "apsflow/dispatch.hpp"
#include "apsflow/nn_ops.hpp"
#include "apsflow/ops.hpp"
#include "oracles.hpp"

using namespace apsflow;

TEST_CASE("conv2d matches the direct-loop oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const int h = 3 + static_cast<int>(rng.uniform_int(5));
    const int w = 3 + static_cast<int>(rng.uniform_int(5));
    const int cin = 1 + static_cast<int>(rng.uniform_int(3));
    const int cout = 1 + static_cast<int>(rng.uniform_int(3));
    auto x = oracles::random_tensor<double>(rng, {h, w, cin});
    auto wt = oracles::random_tensor<double>(rng, {3, 3, cin, cout});
    auto b = oracles::random_tensor<double>(rng, {cout});
    auto got = conv2d(x, wt, b);
    auto want = oracles::conv2d_direct(x, wt, b, 1, 1);
    CHECK(oracles::max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("conv2d stride and dilation match the oracle") {
  Rng rng(22);
  auto x = oracles::random_tensor<double>(rng, {8, 8, 2});
  auto wt = oracles::random_tensor<double>(rng, {3, 3, 2, 3});
  auto b = oracles::random_tensor<double>(rng, {3});
  for (int stride : {1, 2}) {
    for (int dilation : {1, 2}) {
      auto got = conv2d(x, wt, b, stride, dilation);
      auto want = oracles::conv2d_direct(x, wt, b, stride, dilation);
      CHECK(oracles::max_abs_diff(got, want) < 1e-12);
    }
  }
}

TEST_CASE("conv2d keeps spatial size at stride 1 and halves it at stride 2") {
  auto x = Tensor<float>::zeros(Shape{8, 6, 2});
  auto w = Tensor<float>::zeros(Shape{3, 3, 2, 4});
  auto b = Tensor<float>::zeros(Shape{4});
  CHECK(conv2d(x, w, b).shape() == Shape{8, 6, 4});
  CHECK(conv2d(x, w, b, 2).shape() == Shape{4, 3, 4});
}

TEST_CASE("avg and max pooling on the documented 2x2 block") {
  Tensor<double> x(Shape{2, 2, 1}, {1, 2, 3, 4});
  CHECK(avg_pool(x, 2).item() == doctest::Approx(2.5));
  CHECK(max_pool(x, 2).item() == doctest::Approx(4.0));
}

TEST_CASE("max_pool routes gradient to the argmax only") {
  Tensor<double> x(Shape{2, 2, 1}, {1, 5, 3, 4}, true);
  GradientTape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(reduce_sum(max_pool(x, 2)));
  CHECK(x.grad() == std::vector<double>{0, 1, 0, 0});
}

TEST_CASE("resize_bilinear matches the formula oracle") {
  Rng rng(23);
  for (auto [oh, ow] : {std::pair{6, 8}, {2, 3}, {5, 5}}) {
    auto x = oracles::random_tensor<double>(rng, {4, 5, 3});
    auto got = resize_bilinear(x, oh, ow);
    auto want = oracles::bilinear_formula(x, oh, ow);
    CHECK(oracles::max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("resize_nearest identity and integer upscale") {
  Rng rng(24);
  auto x = oracles::random_tensor<double>(rng, {3, 4, 2});
  CHECK(oracles::bitwise_equal(resize_nearest(x, 3, 4), x));
  auto up = resize_nearest(x, 6, 8);
  CHECK(oracles::bitwise_equal(up, oracles::nearest_upsample(x, 2)));
}

TEST_CASE("warp with zero flow is identity under both border modes") {
  Rng rng(25);
  auto img = oracles::random_tensor<double>(rng, {5, 6, 3});
  auto flow = Tensor<double>::zeros(Shape{5, 6, 2});
  CHECK(oracles::max_abs_diff(warp_bilinear(img, flow, WarpBorder::kClamp), img) <
        1e-12);
  CHECK(oracles::max_abs_diff(warp_bilinear(img, flow, WarpBorder::kZero), img) <
        1e-12);
}

TEST_CASE("warp with integer flow translates content") {
  // Shift right by 1: out(y, x) = img(y, x+1).
  Tensor<double> img(Shape{1, 4, 1}, {10, 20, 30, 40});
  auto flow = Tensor<double>::full(Shape{1, 4, 2}, 0.0);
  flow.raw_value()[0] = 1;
  flow.raw_value()[2] = 1;
  flow.raw_value()[4] = 1;
  flow.raw_value()[6] = 1;
  auto clamped = warp_bilinear(img, flow, WarpBorder::kClamp);
  CHECK(clamped.value() == std::vector<double>{20, 30, 40, 40});
  auto zeroed = warp_bilinear(img, flow, WarpBorder::kZero);
  CHECK(zeroed.value() == std::vector<double>{20, 30, 40, 0});
}

TEST_CASE("margin offset warp reads the dilated canvas") {
  // 1x2 crop grid inside a 1x4 canvas with margin 1: zero flow samples the
  // canvas interior, and flow can reach real content beyond the crop edge.
  Tensor<double> canvas(Shape{1, 4, 1}, {1, 2, 3, 4});
  auto zero = Tensor<double>::zeros(Shape{1, 2, 2});
  auto out = warp_bilinear(canvas, zero, WarpBorder::kClamp, 1);
  CHECK(out.value() == std::vector<double>{2, 3});
  auto flow = Tensor<double>::zeros(Shape{1, 2, 2});
  flow.raw_value()[2] = 1;  // u at the second crop pixel reaches canvas x=3
  auto out2 = warp_bilinear(canvas, flow, WarpBorder::kClamp, 1);
  CHECK(out2.value() == std::vector<double>{2, 4});
}

TEST_CASE("corr_volume center channel is the feature dot product") {
  Rng rng(26);
  auto f1 = oracles::random_tensor<double>(rng, {3, 3, 4});
  auto f2 = oracles::random_tensor<double>(rng, {3, 3, 4});
  const int radius = 1;
  auto cv = corr_volume(f1, f2, radius);
  CHECK(cv.shape() == Shape{3, 3, 9});
  for (int p = 0; p < 9; ++p) {
    double dot = 0;
    for (int k = 0; k < 4; ++k) dot += f1.data()[p * 4 + k] * f2.data()[p * 4 + k];
    CHECK(cv.data()[p * 9 + 4] == doctest::Approx(dot));
  }
  // Out-of-bounds displacement at the corner is exactly zero.
  CHECK(cv.data()[0] == 0.0);
}

TEST_CASE("normalize_l2 yields unit-norm pixels") {
  Rng rng(27);
  auto x = oracles::random_tensor<double>(rng, {4, 4, 8}, 0.3, 1.0);
  auto n = normalize_l2(x);
  for (int p = 0; p < 16; ++p) {
    double s = 0;
    for (int k = 0; k < 8; ++k) s += n.data()[p * 8 + k] * n.data()[p * 8 + k];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("channel reductions and broadcast round-trip") {
  Tensor<double> x(Shape{1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto s = channel_sum(x);
  CHECK(s.value() == std::vector<double>{6, 15});
  auto m = channel_mean(x);
  CHECK(m.data()[1] == doctest::Approx(5.0));
  auto b = broadcast_channel(m, 3);
  CHECK(b.shape() == Shape{1, 2, 3});
  CHECK(b.data()[5] == doctest::Approx(5.0));
}

TEST_CASE("slice and concat invert each other") {
  Rng rng(28);
  auto x = oracles::random_tensor<double>(rng, {3, 4, 6});
  auto a = slice_channels(x, 0, 2);
  auto b = slice_channels(x, 2, 4);
  auto back = concat_channels<double>({a, b});
  CHECK(oracles::bitwise_equal(back, x));
}

TEST_CASE("shift2d shifts content and zero-fills vacated cells") {
  Tensor<double> x(Shape{2, 2, 1}, {1, 2, 3, 4});
  auto right = shift2d(x, 0, 1);
  CHECK(right.value() == std::vector<double>{0, 1, 0, 3});
  auto up = shift2d(x, -1, 0);
  CHECK(up.value() == std::vector<double>{3, 4, 0, 0});
}

TEST_CASE("pad_replicate extends edges") {
  Tensor<double> x(Shape{1, 2, 1}, {7, 9});
  auto p = pad_replicate(x, 1);
  CHECK(p.shape() == Shape{3, 4, 1});
  CHECK(p.data()[0] == 7);   // top-left corner clones (0,0)
  CHECK(p.data()[3] == 9);   // top-right corner clones (0,1)
  CHECK(p.data()[5] == 7);
}

TEST_CASE("matmul against a hand computation") {
  Tensor<double> a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> b(Shape{3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  CHECK(c.value() == std::vector<double>{58, 64, 139, 154});
}

TEST_CASE("flip_horizontal mirrors flow augmentation inputs") {
  Tensor<double> x(Shape{1, 3, 2}, {1, 10, 2, 20, 3, 30});
  auto f = flip_horizontal(x);
  CHECK(f.value() == std::vector<double>{3, 30, 2, 20, 1, 10});
}
