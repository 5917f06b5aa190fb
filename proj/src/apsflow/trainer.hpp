#pragma once

// Deterministic training loop: adaptive-moment updates on the weighted loss,
// random crop + horizontal flip augmentation drawn from a per-(step, sample)
// seeded stream, periodic validation, and the ablation sweep built on top.
// One gradient tape per sample keeps peak memory at a single graph; sample
// losses are pre-scaled by 1/batch so leaf gradients accumulate to the batch
// mean.

#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "config.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "network.hpp"
#include "synth.hpp"
#include "tensor.hpp"

namespace apsflow {

template <typename T>
class Adam {
 public:
  explicit Adam(ParamStore<T>& store, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : store_(&store), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : store.items()) {
      m_.emplace_back(static_cast<size_t>(t.size()), 0.0);
      v_.emplace_back(static_cast<size_t>(t.size()), 0.0);
    }
  }

  void zero_grad() {
    for (const auto& [name, t] : store_->items()) {
      Tensor<T> handle = t;
      auto& g = handle.mutable_grad();  // allocates on the first step
      std::fill(g.begin(), g.end(), T(0));
    }
  }

  void step(double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1_, steps_);
    const double bc2 = 1.0 - std::pow(beta2_, steps_);
    size_t pi = 0;
    for (const auto& [name, t] : store_->items()) {
      Tensor<T> handle = t;
      const auto& g = handle.grad();
      auto& value = handle.raw_value();
      auto& m = m_[pi];
      auto& v = v_[pi];
      ++pi;
      for (size_t i = 0; i < value.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
      }
    }
  }

 private:
  ParamStore<T>* store_;
  double beta1_, beta2_, eps_;
  int steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline double lr_at(const TrainParams& tp, int step) {
  double lr = tp.lr;
  if (tp.steps > 0) {
    if (step >= (tp.steps * 3) / 5) lr *= 0.5;
    if (step >= (tp.steps * 4) / 5) lr *= 0.5;
  }
  return lr;
}

// One augmented training sample: cropped frame pair plus the margin-dilated
// canvases the boundary warp samples from.
template <typename T>
struct TrainItem {
  Tensor<T> i1, i2;
  Tensor<T> canvas1, canvas2;
};

namespace detail {

template <typename T>
Tensor<T> crop_hw(const Tensor<T>& x, int oy, int ox, int h, int w) {
  const int xw = x.dim(1), c = x.dim(2);
  APSFLOW_CHECK(oy >= 0 && ox >= 0 && oy + h <= x.dim(0) && ox + w <= xw,
                ContractError, "crop outside the source image");
  std::vector<T> out(static_cast<size_t>(h) * w * c);
  const T* src = x.data();
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int ch = 0; ch < c; ++ch)
        out[(static_cast<size_t>(y) * w + xx) * c + ch] =
            src[(static_cast<size_t>(oy + y) * xw + (ox + xx)) * c + ch];
  return Tensor<T>(Shape{h, w, c}, std::move(out));
}

template <typename T>
Tensor<T> hflip_image(const Tensor<T>& x) {
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::vector<T> out(static_cast<size_t>(h) * w * c);
  const T* src = x.data();
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int ch = 0; ch < c; ++ch)
        out[(static_cast<size_t>(y) * w + xx) * c + ch] =
            src[(static_cast<size_t>(y) * w + (w - 1 - xx)) * c + ch];
  return Tensor<T>(Shape{h, w, c}, std::move(out));
}

}  // namespace detail

// Largest multiple of the pyramid divisor around 3/4 of the crop, the size
// the self-supervision student runs at.
inline int arl_crop_size(int crop, int divisor) {
  int units = (3 * crop / 4) / divisor;
  if (units < 2) units = 2;
  return std::min(units * divisor, crop);
}

template <typename T>
TrainItem<T> make_train_item(const SceneDataset& ds, const RunConfig& cfg, Rng& rng) {
  const auto scene = ds.template scene<T>(static_cast<int>(rng.uniform_int(ds.count)));
  const int crop = cfg.train.crop;
  const int m = cfg.data.margin;
  const int oy = static_cast<int>(rng.uniform_int(scene.img1.dim(0) - crop + 1));
  const int ox = static_cast<int>(rng.uniform_int(scene.img1.dim(1) - crop + 1));
  const bool flip = rng.bernoulli(0.5);
  TrainItem<T> item;
  item.i1 = detail::crop_hw(scene.img1, oy, ox, crop, crop);
  item.i2 = detail::crop_hw(scene.img2, oy, ox, crop, crop);
  item.canvas1 = detail::crop_hw(scene.img1_ext, oy, ox, crop + 2 * m, crop + 2 * m);
  item.canvas2 = detail::crop_hw(scene.img2_ext, oy, ox, crop + 2 * m, crop + 2 * m);
  if (flip) {
    item.i1 = detail::hflip_image(item.i1);
    item.i2 = detail::hflip_image(item.i2);
    item.canvas1 = detail::hflip_image(item.canvas1);
    item.canvas2 = detail::hflip_image(item.canvas2);
  }
  return item;
}

// Full objective for one sample: bidirectional photometric (optionally from
// the dilated canvas), census, smoothness, self-supervision against the
// detached forward flow, and the kernel reconstruction term. Directional
// pairs are averaged so term magnitudes stay comparable across toggles.
// With use_occlusion off the masks are all-ones; an untrained model fails
// the forward-backward check everywhere, which would empty both data terms.
// use_aug likewise holds the consistency term out early, while the teacher
// flow is still noise.
template <typename T>
Tensor<T> training_objective(const Model<T>& model, const TrainItem<T>& item,
                             const RunConfig& cfg, Rng& rng, LossReport* report,
                             bool use_occlusion = true, bool use_aug = true) {
  const auto& tg = cfg.toggles;
  auto fwd = model.forward(item.i1, item.i2);
  auto bwd = model.forward(item.i2, item.i1);
  Tensor<T> occ_f, occ_b;
  if (use_occlusion) {
    occ_f = occlusion_mask(fwd.flow, bwd.flow);
    occ_b = occlusion_mask(bwd.flow, fwd.flow);
  } else {
    occ_f = Tensor<T>::full(Shape{item.i1.dim(0), item.i1.dim(1), 1}, T(1));
    occ_b = occ_f;
  }

  const int margin = tg.bdwl ? cfg.data.margin : 0;
  const Tensor<T>& target_f = tg.bdwl ? item.canvas2 : item.i2;
  const Tensor<T>& target_b = tg.bdwl ? item.canvas1 : item.i1;

  auto pf = photometric_loss(item.i1, target_f, fwd.flow, occ_f, {}, margin);
  auto pb = photometric_loss(item.i2, target_b, bwd.flow, occ_b, {}, margin);
  auto photo = mul_scalar(add(pf.value, pb.value), T(0.5));

  auto smooth = mul_scalar(
      add(smooth_loss(fwd.flow, item.i1), smooth_loss(bwd.flow, item.i2)), T(0.5));

  Tensor<T> census = Tensor<T>::scalar(T(0));
  bool census_empty = false;
  if (tg.census) {
    auto cf = census_loss(item.i1, boundary_dilated_warp(target_f, fwd.flow, margin),
                          occ_f);
    auto cb = census_loss(item.i2, boundary_dilated_warp(target_b, bwd.flow, margin),
                          occ_b);
    census = mul_scalar(add(cf.value, cb.value), T(0.5));
    census_empty = cf.empty_mask || cb.empty_mask;
  }

  Tensor<T> aug = Tensor<T>::scalar(T(0));
  if (tg.aug_reg && use_aug) {
    const int ac = arl_crop_size(cfg.train.crop, cfg.network.pyramid_divisor());
    const auto t = AffineTransform::random(rng, cfg.train.crop, cfg.train.crop, ac, ac);
    auto student = model.forward(apply_transform(item.i1, t),
                                 apply_transform(item.i2, t));
    aug = augmentation_consistency_loss(student.flow, stop_gradient(fwd.flow), t).value;
  }

  Tensor<T> samp = Tensor<T>::scalar(T(0));
  if (tg.sampling_reg) samp = sampling_reconstruction_loss(item.i1, fwd.u_kernels);

  auto total = total_loss(photo, smooth, census, aug, samp, cfg.weights, report);
  if (report) {
    report->empty_photometric_mask = pf.empty_mask || pb.empty_mask;
    report->empty_census_mask = census_empty;
  }
  return total;
}

struct ValPoint {
  int step = 0;
  Metrics metrics;
};

struct RunRecord {
  std::vector<LossReport> history;   // index == step
  std::vector<ValPoint> val_history;
  Metrics final_metrics;
  double zero_flow_epe = 0;
  std::string checkpoint_path;
};

template <typename T>
Metrics evaluate(const Model<T>& model, const SceneDataset& ds) {
  APSFLOW_CHECK(ds.count > 0, ContractError, "evaluate: empty dataset");
  Metrics agg;
  for (int i = 0; i < ds.count; ++i) {
    const auto scene = ds.template scene<T>(i);
    const auto m =
        compute_metrics(model.infer(scene.img1, scene.img2), scene.flow_gt,
                        scene.occlusion);
    if (i == 0)
      agg = m;
    else
      agg.accumulate(m);
  }
  return agg;
}

template <typename T>
Metrics evaluate_zero_flow(const SceneDataset& ds) {
  APSFLOW_CHECK(ds.count > 0, ContractError, "evaluate: empty dataset");
  Metrics agg;
  for (int i = 0; i < ds.count; ++i) {
    const auto scene = ds.template scene<T>(i);
    const auto m = compute_metrics(Tensor<T>::zeros(scene.flow_gt.shape()),
                                   scene.flow_gt, scene.occlusion);
    if (i == 0)
      agg = m;
    else
      agg.accumulate(m);
  }
  return agg;
}

namespace detail {

inline void log_step(std::ostream* log, int step, double lr, const LossReport& r) {
  if (!log) return;
  nlohmann::json j{{"step", step},
                   {"lr", lr},
                   {"photometric", r.photometric},
                   {"census", r.census},
                   {"smooth", r.smooth},
                   {"aug_reg", r.aug_reg},
                   {"sampling_reg", r.sampling_reg},
                   {"total", r.total}};
  (*log) << j.dump() << "\n";
}

inline void log_val(std::ostream* log, int step, const Metrics& m) {
  if (!log) return;
  nlohmann::json j{{"step", step},
                   {"val_epe_all", m.epe_all},
                   {"val_f1_all", m.f1_all}};
  if (m.epe_noc) j["val_epe_noc"] = *m.epe_noc;
  if (m.epe_occ) j["val_epe_occ"] = *m.epe_occ;
  (*log) << j.dump() << "\n";
}

}  // namespace detail

// Optimizes the given model in place and reports the run. The same seed and
// config replay to an identical record and identical weights.
template <typename T>
RunRecord train_model(Model<T>& model, const RunConfig& cfg,
                      std::ostream* log = nullptr) {
  cfg.validate();
  APSFLOW_CHECK(cfg.data.train_scenes > 0, ContractError, "train: empty dataset");
  APSFLOW_CHECK(cfg.data.val_scenes > 0, ContractError, "train: empty validation set");
  const auto train_ds = cfg.data.train_dataset();
  const auto val_ds = cfg.data.val_dataset(cfg.train.crop);

  Adam<T> adam(model.params());
  RunRecord rec;
  rec.zero_flow_epe = evaluate_zero_flow<T>(val_ds).epe_all;

  const double inv_batch = 1.0 / cfg.train.batch_size;
  const int warmup = cfg.train.resolved_warmup();
  for (int step = 0; step < cfg.train.steps; ++step) {
    adam.zero_grad();
    LossReport avg{};
    const bool past_warmup = step >= warmup;
    for (int k = 0; k < cfg.train.batch_size; ++k) {
      Rng rng(Rng::mix(Rng::mix(Rng::mix(cfg.train.seed, 0x57E9A11Bu),
                                static_cast<uint64_t>(step)),
                       static_cast<uint64_t>(k)));
      const auto item = make_train_item<T>(train_ds, cfg, rng);
      GradientTape<T> tape;
      TapeScope<T> scope(tape);
      LossReport rep{};
      Tensor<T> total;
      try {
        total = training_objective(model, item, cfg, rng, &rep, past_warmup,
                                   past_warmup);
      } catch (const NumericError& e) {
        APSFLOW_CHECK(false, NumericError, "aborted at step " << step << ": " << e.what());
      }
      tape.backward(mul_scalar(total, static_cast<T>(inv_batch)));
      avg.photometric += rep.photometric * inv_batch;
      avg.census += rep.census * inv_batch;
      avg.smooth += rep.smooth * inv_batch;
      avg.aug_reg += rep.aug_reg * inv_batch;
      avg.sampling_reg += rep.sampling_reg * inv_batch;
      avg.total += rep.total * inv_batch;
      avg.empty_photometric_mask |= rep.empty_photometric_mask;
      avg.empty_census_mask |= rep.empty_census_mask;
    }
    adam.step(lr_at(cfg.train, step));
    detail::log_step(log, step, lr_at(cfg.train, step), avg);
    rec.history.push_back(avg);

    if ((step + 1) % cfg.train.val_every == 0 && step + 1 < cfg.train.steps) {
      const auto m = evaluate(model, val_ds);
      rec.val_history.push_back({step + 1, m});
      detail::log_val(log, step + 1, m);
    }
  }

  rec.final_metrics = evaluate(model, val_ds);
  rec.val_history.push_back({cfg.train.steps, rec.final_metrics});
  detail::log_val(log, cfg.train.steps, rec.final_metrics);
  return rec;
}

template <typename T>
struct TrainResult {
  Model<T> model;
  RunRecord record;
};

template <typename T = float>
TrainResult<T> train(const RunConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  Model<T> model(cfg.network, cfg.train.seed);
  auto record = train_model(model, cfg, log);
  return {std::move(model), std::move(record)};
}

// Trains only the adaptive sub-net on the kernel reconstruction loss. The
// other parameters receive zero gradients and never move.
template <typename T = float>
TrainResult<T> train_reconstruction_only(const RunConfig& cfg,
                                         std::ostream* log = nullptr) {
  cfg.validate();
  Model<T> model(cfg.network, cfg.train.seed);
  const auto train_ds = cfg.data.train_dataset();
  Adam<T> adam(model.params());
  RunRecord rec;
  const double inv_batch = 1.0 / cfg.train.batch_size;
  for (int step = 0; step < cfg.train.steps; ++step) {
    adam.zero_grad();
    LossReport avg{};
    for (int k = 0; k < cfg.train.batch_size; ++k) {
      Rng rng(Rng::mix(Rng::mix(Rng::mix(cfg.train.seed, 0x57E9A11Bu),
                                static_cast<uint64_t>(step)),
                       static_cast<uint64_t>(k)));
      const auto item = make_train_item<T>(train_ds, cfg, rng);
      GradientTape<T> tape;
      TapeScope<T> scope(tape);
      auto loss = sampling_reconstruction_loss(item.i1, model.adaptive_u_kernels(item.i1));
      const double value = static_cast<double>(loss.item());
      APSFLOW_CHECK(std::isfinite(value), NumericError,
                    "aborted at step " << step << ": reconstruction loss is not finite");
      avg.sampling_reg += value * inv_batch;
      avg.total += value * inv_batch;
      tape.backward(mul_scalar(loss, static_cast<T>(inv_batch)));
    }
    adam.step(lr_at(cfg.train, step));
    detail::log_step(log, step, lr_at(cfg.train, step), avg);
    rec.history.push_back(avg);
  }
  return {std::move(model), std::move(rec)};
}

// Mean |reconstruction - image| after the sub-net's downscale/upsample round
// trip, and the same error for a plain bilinear ladder.
template <typename T>
double reconstruction_error(const Model<T>& model, const Tensor<T>& img) {
  NoGradScope<T> no_grad;
  const auto u = model.adaptive_u_kernels(img);
  const int n = static_cast<int>(u.size()) - 1;
  auto rec = avg_pool(img, 1 << n);
  for (int i = 1; i <= n; ++i)
    rec = afu_upsample(rec, u[static_cast<size_t>(i)], 2, false);
  return static_cast<double>(reduce_mean(abs(sub(rec, img))).item());
}

template <typename T>
double bilinear_reconstruction_error(const Tensor<T>& img, int levels) {
  NoGradScope<T> no_grad;
  auto rec = avg_pool(img, 1 << levels);
  for (int i = 0; i < levels; ++i)
    rec = resize_bilinear(rec, rec.dim(0) * 2, rec.dim(1) * 2);
  return static_cast<double>(reduce_mean(abs(sub(rec, img))).item());
}

struct AblationRow {
  std::string name;
  RunConfig config;
  Metrics metrics;
  double zero_flow_epe = 0;
};

// Rows must share the training seed and data so differences come from the
// toggles alone.
template <typename T = float>
std::vector<AblationRow> ablate(
    const std::vector<std::pair<std::string, RunConfig>>& rows,
    std::ostream* log = nullptr) {
  APSFLOW_CHECK(!rows.empty(), ContractError, "ablate: empty matrix");
  const auto& first = rows.front().second;
  for (const auto& [name, cfg] : rows) {
    APSFLOW_CHECK(cfg.train.seed == first.train.seed, ContractError,
                  "ablate: rows must share the training seed");
    APSFLOW_CHECK(cfg.data.val_seed == first.data.val_seed &&
                      cfg.data.val_scenes == first.data.val_scenes,
                  ContractError, "ablate: rows must share the validation set");
  }
  std::vector<AblationRow> out;
  for (const auto& [name, cfg] : rows) {
    if (log) (*log) << nlohmann::json{{"ablation_row", name}}.dump() << "\n";
    auto result = train<T>(cfg, log);
    out.push_back({name, cfg, result.record.final_metrics,
                   result.record.zero_flow_epe});
  }
  return out;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(22) << "row" << std::right << std::setw(10)
      << "EPE-ALL" << std::setw(10) << "EPE-NOC" << std::setw(10) << "EPE-OCC"
      << std::setw(10) << "F1-ALL" << "\n";
  const auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << *v;
    return s.str();
  };
  for (const auto& r : rows) {
    out << std::left << std::setw(22) << r.name << std::right << std::fixed
        << std::setprecision(3) << std::setw(10) << r.metrics.epe_all
        << std::setw(10) << cell(r.metrics.epe_noc) << std::setw(10)
        << cell(r.metrics.epe_occ) << std::setw(10) << r.metrics.f1_all << "\n";
  }
  return out.str();
}

// Named configuration matrices: cumulative loss terms, pooling operators,
// and upsampling operators.
inline std::vector<std::pair<std::string, RunConfig>> ablation_preset(
    const std::string& name, RunConfig base) {
  std::vector<std::pair<std::string, RunConfig>> rows;
  if (name == "loss-terms") {
    RunConfig a = base;
    a.toggles.census = true;
    a.toggles.bdwl = false;
    a.toggles.aug_reg = false;
    RunConfig b = a;
    b.toggles.bdwl = true;
    RunConfig c = b;
    c.toggles.aug_reg = true;
    rows = {{"census", a}, {"census+bdw", b}, {"census+bdw+aug", c}};
  } else if (name == "pooling") {
    for (const auto kind : {PoolKind::kAverage, PoolKind::kMax,
                            PoolKind::kStridedConv, PoolKind::kCap}) {
      RunConfig r = base;
      r.network.pooling = kind;
      rows.emplace_back(RunConfig::pooling_name(kind), r);
    }
  } else if (name == "upsampling") {
    RunConfig a = base;
    a.network.upsampling = UpKind::kBilinear;
    a.toggles.sampling_reg = false;
    RunConfig b = base;
    b.network.upsampling = UpKind::kAfu;
    b.toggles.sampling_reg = false;
    RunConfig c = b;
    c.toggles.sampling_reg = true;
    rows = {{"bilinear", a}, {"afu", b}, {"afu+recon", c}};
  } else {
    APSFLOW_CHECK(false, ContractError, "unknown ablation preset '" << name << "'");
  }
  return rows;
}

}  // namespace apsflow
