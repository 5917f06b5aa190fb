#pragma once

// Flow network: adaptive sub-net producing per-level sampling maps, siamese
// pyramid encoder pooled by CAP, and a coarse-to-fine decoder upsampled by
// AFU. Level numbering follows the coarse-is-small convention: level 0 is the
// coarsest scale, level N the input resolution. For a 64x64 input and N = 3
// the feature sides are 8, 16, 32, 64.
//
// Map usage: pooling into level i-1 consumes G^i (kernels live at the
// pre-pooling resolution, level i); upsampling into level i consumes U^i.
// G^0 and U^0 are produced for schedule uniformity and never consumed.

#include <string>
#include <utility>
#include <vector>

#include "dispatch.hpp"
#include "nn_ops.hpp"
#include "ops.hpp"
#include "sampling.hpp"
#include "tensor.hpp"

namespace apsflow {

enum class PoolKind { kCap, kAverage, kMax, kStridedConv };
enum class UpKind { kAfu, kBilinear };

struct NetworkConfig {
  int num_levels = 3;                          // N; levels run 0..N
  std::vector<int> channels = {16, 32, 32, 32};  // per level, coarse to fine
  int corr_radius = 4;
  double rho = 0.01;
  std::vector<int> est_widths = {24, 24, 24, 24, 24};
  int subnet_base = 16;
  PoolKind pooling = PoolKind::kCap;
  UpKind upsampling = UpKind::kAfu;

  void validate() const {
    APSFLOW_CHECK(num_levels >= 2, ContractError,
                  "network: num_levels must be >= 2, got " << num_levels);
    APSFLOW_CHECK(static_cast<int>(channels.size()) == num_levels + 1, ContractError,
                  "network: channels list must have N+1 entries, got "
                      << channels.size() << " for N=" << num_levels);
    APSFLOW_CHECK(corr_radius >= 1, ContractError, "network: corr_radius < 1");
    APSFLOW_CHECK(rho > 0, ContractError, "network: rho <= 0");
    APSFLOW_CHECK(!est_widths.empty(), ContractError, "network: empty est_widths");
    APSFLOW_CHECK(subnet_base >= 1, ContractError, "network: subnet_base < 1");
  }

  int pyramid_divisor() const { return 1 << std::max(num_levels, 2); }
};

// Named parameter registry. Creation order is the checkpoint order.
template <typename T>
class ParamStore {
 public:
  Tensor<T> create(const std::string& name, Shape shape, Rng& rng, double bound) {
    APSFLOW_CHECK(index_of(name) < 0, ContractError,
                  "duplicate parameter name '" << name << "'");
    auto n = shape_numel(shape);
    std::vector<T> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    Tensor<T> t(std::move(shape), std::move(v), true);
    params_.emplace_back(name, t);
    return t;
  }

  Tensor<T> zeros(const std::string& name, Shape shape) {
    APSFLOW_CHECK(index_of(name) < 0, ContractError,
                  "duplicate parameter name '" << name << "'");
    auto t = Tensor<T>::zeros(std::move(shape), true);
    params_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const {
    return params_;
  }

  Tensor<T> find(const std::string& name) const {
    int i = index_of(name);
    APSFLOW_CHECK(i >= 0, ContractError, "unknown parameter '" << name << "'");
    return params_[static_cast<size_t>(i)].second;
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

 private:
  int index_of(const std::string& name) const {
    for (size_t i = 0; i < params_.size(); ++i)
      if (params_[i].first == name) return static_cast<int>(i);
    return -1;
  }

  std::vector<std::pair<std::string, Tensor<T>>> params_;
};

// Everything a loss needs from one forward pass.
template <typename T>
struct ForwardResult {
  Tensor<T> flow;                        // full resolution, 2 channels
  std::vector<Tensor<T>> level_flows;    // V^0 .. V^{N-1}, coarse to fine
  std::vector<Tensor<T>> u_kernels;      // index i holds kernels of U^i; [0] unused
  std::vector<Tensor<T>> g1_kernels;     // index i holds kernels of G^i for I1
  std::vector<Tensor<T>> g2_kernels;     // same for I2
  std::vector<Tensor<T>> f1, f2;         // feature pyramids, index = level
};

template <typename T>
class Model {
 public:
  Model(NetworkConfig config, uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    Rng rng(Rng::mix(seed, 0xA5F70F));
    build_params(rng);
  }

  const NetworkConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  // Full pipeline. Records on the active tape if one is set.
  ForwardResult<T> forward(const Tensor<T>& img1, const Tensor<T>& img2) const {
    check_input(img1);
    check_input(img2);
    APSFLOW_CHECK(img1.same_shape(img2), ContractError,
                  "forward: image shapes differ, " << shape_str(img1.shape())
                                                   << " vs " << shape_str(img2.shape()));
    const int n = cfg_.num_levels;

    // Adaptive maps for both images from the shared-weight branch.
    auto trunk1 = subnet_trunk(img1);
    auto trunk2 = subnet_trunk(img2);
    ForwardResult<T> result;
    result.u_kernels.resize(static_cast<size_t>(n) + 1);
    result.g1_kernels.resize(static_cast<size_t>(n) + 1);
    result.g2_kernels.resize(static_cast<size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) {
      auto g1_raw = head(trunk1[static_cast<size_t>(i)], "subnet.head_g." + std::to_string(i));
      auto g2_raw = head(trunk2[static_cast<size_t>(i)], "subnet.head_g." + std::to_string(i));
      auto u_raw = head(trunk1[static_cast<size_t>(i)], "subnet.head_u." + std::to_string(i));
      result.g1_kernels[static_cast<size_t>(i)] = kernels_of(g1_raw, MapRole::kCapG);
      result.g2_kernels[static_cast<size_t>(i)] = kernels_of(g2_raw, MapRole::kCapG);
      result.u_kernels[static_cast<size_t>(i)] = kernels_of(u_raw, MapRole::kAfuU);
    }

    result.f1 = encode(img1, result.g1_kernels);
    result.f2 = encode(img2, result.g2_kernels);

    // Coarse-to-fine decoding with estimators at levels 0..N-1 and a final
    // AFU to the input resolution.
    Tensor<T> v;
    result.level_flows.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      Tensor<T> v_hat;
      if (i == 0) {
        v_hat = Tensor<T>::zeros(Shape{result.f1[0].dim(0), result.f1[0].dim(1), 2});
      } else {
        v_hat = upsample_flow(v, result.u_kernels[static_cast<size_t>(i)]);
      }
      auto f2w = warp_bilinear(result.f2[static_cast<size_t>(i)], v_hat,
                               WarpBorder::kZero);
      auto cv = correlation_volume(result.f1[static_cast<size_t>(i)], f2w,
                                   cfg_.corr_radius);
      auto residual = estimate(i, result.f1[static_cast<size_t>(i)], cv, v_hat);
      v = add(v_hat, residual);
      result.level_flows.push_back(v);
    }
    result.flow = upsample_flow(v, result.u_kernels[static_cast<size_t>(n)]);
    return result;
  }

  // Flow from I2 to I1: the same network with swapped inputs.
  ForwardResult<T> backward_flow(const Tensor<T>& img1, const Tensor<T>& img2) const {
    return forward(img2, img1);
  }

  // Inference without tape bookkeeping.
  Tensor<T> infer(const Tensor<T>& img1, const Tensor<T>& img2) const {
    NoGradScope<T> no_grad;
    return forward(img1, img2).flow;
  }

  // Just the sub-net branch: upsampling kernels U^0..U^N for one image.
  // Lets the reconstruction loss train the sub-net without paying for the
  // encoder and estimators.
  std::vector<Tensor<T>> adaptive_u_kernels(const Tensor<T>& img) const {
    check_input(img);
    auto trunk = subnet_trunk(img);
    std::vector<Tensor<T>> u(static_cast<size_t>(cfg_.num_levels) + 1);
    for (int i = 0; i <= cfg_.num_levels; ++i) {
      auto raw = head(trunk[static_cast<size_t>(i)], "subnet.head_u." + std::to_string(i));
      u[static_cast<size_t>(i)] = kernels_of(raw, MapRole::kAfuU);
    }
    return u;
  }

  // Channel-normalized local correlation.
  static Tensor<T> correlation_volume(const Tensor<T>& f1, const Tensor<T>& f2w,
                                      int radius) {
    APSFLOW_CHECK(radius < std::min(f1.dim(0), f1.dim(1)), ContractError,
                  "correlation_volume: displacement " << radius
                                                      << " too large for "
                                                      << shape_str(f1.shape()));
    return corr_volume(normalize_l2(f1), normalize_l2(f2w), radius);
  }

 private:
  void check_input(const Tensor<T>& img) const {
    APSFLOW_CHECK(img.rank() == 3 && img.dim(2) == 3, ContractError,
                  "forward: expected HxWx3 image, got " << shape_str(img.shape()));
    const int div = cfg_.pyramid_divisor();
    APSFLOW_CHECK(img.dim(0) % div == 0 && img.dim(1) % div == 0, ContractError,
                  "forward: image size " << img.dim(0) << "x" << img.dim(1)
                                         << " not divisible by " << div);
  }

  // ---- parameter construction -------------------------------------------

  void conv_params(Rng& rng, const std::string& name, int k, int cin, int cout,
                   double scale = 1.0) {
    const double bound = scale * std::sqrt(6.0 / (k * k * cin));
    store_.create(name + ".w", Shape{k, k, cin, cout}, rng, bound);
    store_.zeros(name + ".b", Shape{cout});
  }

  void block_params(Rng& rng, const std::string& name, int cin, int cout) {
    conv_params(rng, name + ".c1", 3, cin, cout);
    conv_params(rng, name + ".c2", 3, cout, cout);
  }

  void build_params(Rng& rng) {
    const int n = cfg_.num_levels;
    const int s = cfg_.subnet_base;
    block_params(rng, "subnet.enc0", 3, s);
    block_params(rng, "subnet.enc1", s, 2 * s);
    block_params(rng, "subnet.bott", 2 * s, 2 * s);
    block_params(rng, "subnet.dec1", 4 * s, 2 * s);
    block_params(rng, "subnet.dec0", 3 * s, s);
    for (int i = 0; i <= n; ++i) {
      const int tc = trunk_channels(i);
      conv_params(rng, "subnet.head_g." + std::to_string(i), 3, tc, 11, 0.01);
      conv_params(rng, "subnet.head_u." + std::to_string(i), 3, tc, 11, 0.01);
    }
    block_params(rng, "enc.level" + std::to_string(n), 3,
                 cfg_.channels[static_cast<size_t>(n)]);
    for (int i = n - 1; i >= 0; --i) {
      if (cfg_.pooling == PoolKind::kStridedConv) {
        const int pc = cfg_.channels[static_cast<size_t>(i) + 1];
        conv_params(rng, "enc.sic" + std::to_string(i), 3, pc, pc);
      }
      block_params(rng, "enc.level" + std::to_string(i),
                   cfg_.channels[static_cast<size_t>(i) + 1],
                   cfg_.channels[static_cast<size_t>(i)]);
    }
    const int nd = (2 * cfg_.corr_radius + 1) * (2 * cfg_.corr_radius + 1);
    for (int i = 0; i < n; ++i) {
      const std::string base = "est.level" + std::to_string(i);
      int in = cfg_.channels[static_cast<size_t>(i)] + nd + 2;
      int grown = in;
      for (size_t k = 0; k < cfg_.est_widths.size(); ++k) {
        conv_params(rng, base + ".dense" + std::to_string(k), 3, grown,
                    cfg_.est_widths[k]);
        grown += cfg_.est_widths[k];
      }
      const int wd = cfg_.est_widths.back();
      conv_params(rng, base + ".dil0", 3, wd, wd);
      conv_params(rng, base + ".dil1", 3, wd, wd);
      conv_params(rng, base + ".dil2", 3, wd, wd);
      conv_params(rng, base + ".head", 3, wd, 2, 0.01);
    }
  }

  int trunk_channels(int level) const {
    const int n = cfg_.num_levels;
    if (level == n) return cfg_.subnet_base;
    return 2 * cfg_.subnet_base;
  }

  // ---- forward pieces -----------------------------------------------------

  Tensor<T> conv_leaky(const std::string& name, const Tensor<T>& x,
                       int dilation = 1) const {
    auto y = conv2d(x, store_.find(name + ".w"), store_.find(name + ".b"), 1,
                    dilation);
    return leaky_relu(y, T(0.1));
  }

  Tensor<T> conv_plain(const std::string& name, const Tensor<T>& x, int stride = 1,
                       int dilation = 1) const {
    return conv2d(x, store_.find(name + ".w"), store_.find(name + ".b"), stride,
                  dilation);
  }

  Tensor<T> block(const std::string& name, const Tensor<T>& x) const {
    return conv_leaky(name + ".c2", conv_leaky(name + ".c1", x));
  }

  // U-Net trunk features per level, index = level (0 coarsest .. N finest).
  std::vector<Tensor<T>> subnet_trunk(const Tensor<T>& img) const {
    const int n = cfg_.num_levels;
    auto e0 = block("subnet.enc0", img);
    auto e1 = block("subnet.enc1", avg_pool(e0, 2));
    auto bott = block("subnet.bott", avg_pool(e1, 2));
    auto d1 = block("subnet.dec1",
                    concat_channels<T>({resize_bilinear(bott, e1.dim(0), e1.dim(1)), e1}));
    auto d0 = block("subnet.dec0",
                    concat_channels<T>({resize_bilinear(d1, e0.dim(0), e0.dim(1)), e0}));
    std::vector<Tensor<T>> trunk(static_cast<size_t>(n) + 1);
    trunk[static_cast<size_t>(n)] = d0;
    trunk[static_cast<size_t>(n) - 1] = d1;
    trunk[static_cast<size_t>(n) - 2] = bott;
    for (int i = n - 3; i >= 0; --i)
      trunk[static_cast<size_t>(i)] = avg_pool(trunk[static_cast<size_t>(i) + 1], 2);
    return trunk;
  }

  Tensor<T> head(const Tensor<T>& trunk_feature, const std::string& name) const {
    return conv_plain(name, trunk_feature);
  }

  Tensor<T> kernels_of(const Tensor<T>& raw_map, MapRole role) const {
    return adaptive_gumbel_softmax(split_sampling_map(raw_map, role),
                                   static_cast<T>(cfg_.rho));
  }

  // Feature pyramid for one image; g_kernels[i] pools level i -> i-1.
  std::vector<Tensor<T>> encode(const Tensor<T>& img,
                                const std::vector<Tensor<T>>& g_kernels) const {
    const int n = cfg_.num_levels;
    std::vector<Tensor<T>> features(static_cast<size_t>(n) + 1);
    auto f = block("enc.level" + std::to_string(n), img);
    features[static_cast<size_t>(n)] = f;
    for (int i = n - 1; i >= 0; --i) {
      Tensor<T> pooled;
      switch (cfg_.pooling) {
        case PoolKind::kCap:
          pooled = cap_pool(f, g_kernels[static_cast<size_t>(i) + 1], 2);
          break;
        case PoolKind::kAverage:
          pooled = avg_pool(f, 2);
          break;
        case PoolKind::kMax:
          pooled = max_pool(f, 2);
          break;
        case PoolKind::kStridedConv:
          pooled = conv_plain("enc.sic" + std::to_string(i), f, 2);
          break;
      }
      f = block("enc.level" + std::to_string(i), pooled);
      features[static_cast<size_t>(i)] = f;
    }
    return features;
  }

  Tensor<T> upsample_flow(const Tensor<T>& v, const Tensor<T>& u_kernels) const {
    if (cfg_.upsampling == UpKind::kBilinear) return bilinear_upsample(v, 2, true);
    return afu_upsample(v, u_kernels, 2, true);
  }

  // Dense block, dilated refinement and residual head on top of v_hat.
  Tensor<T> estimate(int level, const Tensor<T>& f1, const Tensor<T>& cv,
                     const Tensor<T>& v_hat) const {
    const std::string base = "est.level" + std::to_string(level);
    auto x = concat_channels<T>({f1, cv, v_hat});
    for (size_t k = 0; k < cfg_.est_widths.size(); ++k) {
      auto y = conv_leaky(base + ".dense" + std::to_string(k), x);
      x = concat_channels<T>({x, y});
    }
    auto y = conv_leaky(base + ".dil0",
                        slice_channels(x, x.dim(2) - cfg_.est_widths.back(),
                                       cfg_.est_widths.back()));
    y = conv_leaky(base + ".dil1", y, 2);
    y = conv_leaky(base + ".dil2", y, 4);
    return conv_plain(base + ".head", y);
  }

  NetworkConfig cfg_;
  ParamStore<T> store_;
};

// Cosine similarity of one query feature against every position. The pyramid
// features of both frames are upsampled to the input size and concatenated;
// the query vector is frame 1's stack at (x, y). Returns the self map
// (against frame 1) and the cross map (against frame 2), each H x W x 1 in
// [-1, 1]. At the query pixel of the self map numerator and denominator come
// from the same accumulation, so the value is exactly 1.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> feature_similarity(const Model<T>& model,
                                                   const Tensor<T>& img1,
                                                   const Tensor<T>& img2,
                                                   int x, int y) {
  const int h = img1.dim(0), w = img1.dim(1);
  APSFLOW_CHECK(x >= 0 && x < w && y >= 0 && y < h, ContractError,
                "feature_similarity: pixel (" << x << ", " << y
                                              << ") outside " << h << "x" << w);
  NoGradScope<T> no_grad;
  auto fwd = model.forward(img1, img2);
  auto stack = [&](const std::vector<Tensor<T>>& levels) {
    std::vector<Tensor<T>> up;
    up.reserve(levels.size());
    for (const auto& f : levels)
      up.push_back(f.dim(0) == h && f.dim(1) == w ? f
                                                  : resize_bilinear(f, h, w));
    return concat_channels(up);
  };
  auto s1 = stack(fwd.f1);
  auto s2 = stack(fwd.f2);
  const int c = s1.dim(2);
  const T* q = s1.data() + (static_cast<size_t>(y) * w + x) * c;
  double qn = 0;
  for (int i = 0; i < c; ++i)
    qn += static_cast<double>(q[i]) * static_cast<double>(q[i]);

  auto map_of = [&](const Tensor<T>& s) {
    auto m = Tensor<T>::zeros(Shape{h, w, 1});
    for (int p = 0; p < h * w; ++p) {
      const T* f = s.data() + static_cast<size_t>(p) * c;
      double dot = 0, fn = 0;
      for (int i = 0; i < c; ++i) {
        dot += static_cast<double>(f[i]) * static_cast<double>(q[i]);
        fn += static_cast<double>(f[i]) * static_cast<double>(f[i]);
      }
      const double den = std::sqrt(fn * qn);
      m.raw_value()[static_cast<size_t>(p)] =
          den > 0 ? static_cast<T>(dot / den) : T(0);
    }
    return m;
  };
  return {map_of(s1), map_of(s2)};
}

}  // namespace apsflow
