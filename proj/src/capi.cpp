// C API over the library: opaque handles, status codes, a thread-local error
// message. Exceptions stop at this boundary.

#include "apsflow.h"

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "apsflow/checkpoint.hpp"
#include "apsflow/colorize.hpp"
#include "apsflow/config.hpp"
#include "apsflow/flow_io.hpp"
#include "apsflow/gradcheck.hpp"
#include "apsflow/metrics.hpp"
#include "apsflow/network.hpp"
#include "apsflow/png_io.hpp"
#include "apsflow/synth.hpp"
#include "apsflow/trainer.hpp"

using namespace apsflow;

struct apsflow_flow {
  Tensor<float> field;  // H x W x 2
};

struct apsflow_image {
  Tensor<float> pixels;  // H x W x C, values in [0, 1]
};

struct apsflow_config {
  KeyValues kv;
};

struct apsflow_model {
  RunConfig config;
  Model<float> model;
};

namespace {

thread_local std::string g_last_error = "";

template <typename F>
apsflow_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return APSFLOW_OK;
  } catch (const ContractError& e) {
    g_last_error = e.what();
    return APSFLOW_CONTRACT_ERROR;
  } catch (const ShapeError& e) {
    g_last_error = e.what();
    return APSFLOW_INVALID_ARGUMENT;
  } catch (const NumericError& e) {
    g_last_error = e.what();
    return APSFLOW_NUMERIC_ERROR;
  } catch (const FormatError& e) {
    g_last_error = e.what();
    return APSFLOW_FORMAT_ERROR;
  } catch (const IoError& e) {
    g_last_error = e.what();
    return APSFLOW_IO_ERROR;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return APSFLOW_ERROR;
  }
}

apsflow_status null_argument(const char* what) {
  g_last_error = std::string("null argument: ") + what;
  return APSFLOW_INVALID_ARGUMENT;
}

#define APSFLOW_REQUIRE(p) \
  if (!(p)) return null_argument(#p)

Tensor<float> image_to_rgb(const Tensor<float>& img) {
  if (img.dim(2) == 3) return img;
  APSFLOW_CHECK(img.dim(2) == 1, ShapeError,
                "image must have 1 or 3 channels, got " << img.dim(2));
  auto out = Tensor<float>::zeros(Shape{img.dim(0), img.dim(1), 3});
  const float* src = img.data();
  float* dst = out.raw_value().data();
  const size_t n = static_cast<size_t>(img.dim(0)) * img.dim(1);
  for (size_t p = 0; p < n; ++p)
    dst[p * 3] = dst[p * 3 + 1] = dst[p * 3 + 2] = src[p];
  return out;
}

nlohmann::json metrics_json(const Metrics& m, double zero_flow_epe = -1) {
  nlohmann::json j{{"epe_all", m.epe_all},
                   {"f1_all", m.f1_all},
                   {"count_all", m.count_all},
                   {"count_noc", m.count_noc},
                   {"count_occ", m.count_occ}};
  j["epe_noc"] = m.epe_noc ? nlohmann::json(*m.epe_noc) : nlohmann::json();
  j["epe_occ"] = m.epe_occ ? nlohmann::json(*m.epe_occ) : nlohmann::json();
  if (zero_flow_epe >= 0) j["zero_flow_epe"] = zero_flow_epe;
  return j;
}

RunConfig config_of(const apsflow_config* config) {
  return config ? RunConfig::from_kv(config->kv) : RunConfig{};
}

// Dataset for file emission and file-based evaluation: scenes at crop size so
// any trained model of the same config can consume them.
SceneDataset export_dataset(const RunConfig& cfg, uint64_t seed, int32_t count) {
  SceneDataset ds;
  ds.seed = seed;
  ds.count = count > 0 ? count : cfg.data.val_scenes;
  ds.params.height = cfg.train.crop;
  ds.params.width = cfg.train.crop;
  ds.params.margin = cfg.data.margin;
  ds.params.num_layers = cfg.data.num_layers;
  ds.params.max_motion = cfg.data.max_motion;
  ds.validate();
  return ds;
}

struct DatasetEntry {
  std::string im1, im2, flow, occ;
};

std::vector<DatasetEntry> read_manifest(const std::string& dir) {
  const auto path = dir + "/manifest.jsonl";
  std::ifstream in(path);
  APSFLOW_CHECK(in.good(), IoError, "cannot open '" << path << "'");
  std::vector<DatasetEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      APSFLOW_CHECK(false, FormatError, "manifest: bad line: " << e.what());
    }
    APSFLOW_CHECK(j.contains("im1") && j.contains("im2") && j.contains("flow"),
                  FormatError, "manifest: entry misses im1/im2/flow");
    DatasetEntry e;
    e.im1 = dir + "/" + j["im1"].get<std::string>();
    e.im2 = dir + "/" + j["im2"].get<std::string>();
    e.flow = dir + "/" + j["flow"].get<std::string>();
    if (j.contains("occ")) e.occ = dir + "/" + j["occ"].get<std::string>();
    entries.push_back(std::move(e));
  }
  APSFLOW_CHECK(!entries.empty(), ContractError,
                "manifest '" << path << "' lists no scenes");
  return entries;
}

Tensor<float> first_channel(const Tensor<float>& img) {
  auto out = Tensor<float>::zeros(Shape{img.dim(0), img.dim(1), 1});
  const int c = img.dim(2);
  const size_t n = static_cast<size_t>(img.dim(0)) * img.dim(1);
  for (size_t p = 0; p < n; ++p)
    out.raw_value()[p] = img.data()[p * static_cast<size_t>(c)];
  return out;
}

Metrics evaluate_files(Model<float>& model, const std::string& data_dir) {
  Metrics agg;
  bool first = true;
  for (const auto& e : read_manifest(data_dir)) {
    auto i1 = read_png(e.im1);
    auto i2 = read_png(e.im2);
    auto gt = read_flo(e.flow);
    Tensor<float> occ;
    if (!e.occ.empty()) occ = first_channel(read_png(e.occ));
    const auto m = compute_metrics(model.infer(i1, i2), gt, occ);
    if (first) {
      agg = m;
      first = false;
    } else {
      agg.accumulate(m);
    }
  }
  return agg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  APSFLOW_CHECK(out.good(), IoError, "cannot open '" << path << "' for write");
  out << text;
  APSFLOW_CHECK(out.good(), IoError, "short write to '" << path << "'");
}

std::string gradcheck_report(const std::vector<OpGradResult>& results,
                             int32_t* failures) {
  std::string text;
  int32_t bad = 0;
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-44s max rel err %.3e  %s\n",
                  r.op.c_str(), r.max_rel_err, r.pass ? "pass" : "FAIL");
    text += line;
    if (!r.pass) ++bad;
  }
  if (failures) *failures = bad;
  return text;
}

}  // namespace

extern "C" {

const char* apsflow_last_error(void) { return g_last_error.c_str(); }

const char* apsflow_version(void) { return "0.1.0"; }

/* ---- flow fields -------------------------------------------------------- */

apsflow_status apsflow_flow_create(int32_t width, int32_t height,
                                   const float* data, apsflow_flow** out) {
  APSFLOW_REQUIRE(out);
  return guarded([&] {
    APSFLOW_CHECK(width > 0 && height > 0, ContractError,
                  "flow size " << width << "x" << height << " not positive");
    auto field = Tensor<float>::zeros(Shape{height, width, 2});
    if (data)
      std::copy(data, data + field.size(), field.raw_value().begin());
    *out = new apsflow_flow{std::move(field)};
  });
}

apsflow_status apsflow_flow_read(const char* path, apsflow_flow** out) {
  APSFLOW_REQUIRE(path);
  APSFLOW_REQUIRE(out);
  return guarded([&] { *out = new apsflow_flow{read_flo(path)}; });
}

apsflow_status apsflow_flow_write(const apsflow_flow* flow, const char* path) {
  APSFLOW_REQUIRE(flow);
  APSFLOW_REQUIRE(path);
  return guarded([&] { write_flo(path, flow->field); });
}

apsflow_status apsflow_flow_size(const apsflow_flow* flow, int32_t* width,
                                 int32_t* height) {
  APSFLOW_REQUIRE(flow);
  if (width) *width = flow->field.dim(1);
  if (height) *height = flow->field.dim(0);
  return APSFLOW_OK;
}

apsflow_status apsflow_flow_data(const apsflow_flow* flow, float* data) {
  APSFLOW_REQUIRE(flow);
  APSFLOW_REQUIRE(data);
  std::copy(flow->field.data(), flow->field.data() + flow->field.size(), data);
  return APSFLOW_OK;
}

void apsflow_flow_destroy(apsflow_flow* flow) { delete flow; }

/* ---- images ------------------------------------------------------------- */

apsflow_status apsflow_image_create(int32_t width, int32_t height,
                                    int32_t channels, const float* data,
                                    apsflow_image** out) {
  APSFLOW_REQUIRE(data);
  APSFLOW_REQUIRE(out);
  return guarded([&] {
    APSFLOW_CHECK(width > 0 && height > 0, ContractError,
                  "image size " << width << "x" << height << " not positive");
    APSFLOW_CHECK(channels == 1 || channels == 3, ContractError,
                  "image channels must be 1 or 3, got " << channels);
    auto px = Tensor<float>::zeros(Shape{height, width, channels});
    std::copy(data, data + px.size(), px.raw_value().begin());
    *out = new apsflow_image{std::move(px)};
  });
}

apsflow_status apsflow_image_read_png(const char* path, apsflow_image** out) {
  APSFLOW_REQUIRE(path);
  APSFLOW_REQUIRE(out);
  return guarded([&] { *out = new apsflow_image{read_png(path)}; });
}

apsflow_status apsflow_image_write_png(const apsflow_image* image,
                                       const char* path) {
  APSFLOW_REQUIRE(image);
  APSFLOW_REQUIRE(path);
  return guarded([&] { write_png(path, image_to_rgb(image->pixels)); });
}

apsflow_status apsflow_image_size(const apsflow_image* image, int32_t* width,
                                  int32_t* height, int32_t* channels) {
  APSFLOW_REQUIRE(image);
  if (width) *width = image->pixels.dim(1);
  if (height) *height = image->pixels.dim(0);
  if (channels) *channels = image->pixels.dim(2);
  return APSFLOW_OK;
}

apsflow_status apsflow_image_data(const apsflow_image* image, float* data) {
  APSFLOW_REQUIRE(image);
  APSFLOW_REQUIRE(data);
  std::copy(image->pixels.data(), image->pixels.data() + image->pixels.size(),
            data);
  return APSFLOW_OK;
}

void apsflow_image_destroy(apsflow_image* image) { delete image; }

apsflow_status apsflow_flow_visualize(const apsflow_flow* flow,
                                      float max_magnitude,
                                      apsflow_image** out) {
  APSFLOW_REQUIRE(flow);
  APSFLOW_REQUIRE(out);
  return guarded([&] {
    *out = new apsflow_image{flow_to_color(flow->field, max_magnitude)};
  });
}

apsflow_status apsflow_error_map(const apsflow_flow* predicted,
                                 const apsflow_flow* reference,
                                 float max_error, apsflow_image** out) {
  APSFLOW_REQUIRE(predicted);
  APSFLOW_REQUIRE(reference);
  APSFLOW_REQUIRE(out);
  return guarded([&] {
    *out = new apsflow_image{
        error_to_brightness(predicted->field, reference->field, max_error)};
  });
}

/* ---- configuration ------------------------------------------------------ */

apsflow_status apsflow_config_create(const char* path, apsflow_config** out) {
  APSFLOW_REQUIRE(out);
  return guarded([&] {
    KeyValues kv;
    if (path) kv = KeyValues::parse_file(path);
    RunConfig::from_kv_unchecked(kv);  // reject unknown keys and bad values
    *out = new apsflow_config{std::move(kv)};
  });
}

apsflow_status apsflow_config_set(apsflow_config* config, const char* key,
                                  const char* value) {
  APSFLOW_REQUIRE(config);
  APSFLOW_REQUIRE(key);
  APSFLOW_REQUIRE(value);
  return guarded([&] {
    KeyValues next = config->kv;
    next.set(key, value);
    RunConfig::from_kv_unchecked(next);
    config->kv = std::move(next);
  });
}

void apsflow_config_destroy(apsflow_config* config) { delete config; }

/* ---- models ------------------------------------------------------------- */

apsflow_status apsflow_model_create(const apsflow_config* config,
                                    uint64_t seed, apsflow_model** out) {
  APSFLOW_REQUIRE(out);
  return guarded([&] {
    auto cfg = config_of(config);
    cfg.train.seed = seed;
    Model<float> model(cfg.network, seed);
    *out = new apsflow_model{std::move(cfg), std::move(model)};
  });
}

apsflow_status apsflow_model_load(const char* checkpoint_path,
                                  apsflow_model** out) {
  APSFLOW_REQUIRE(checkpoint_path);
  APSFLOW_REQUIRE(out);
  return guarded([&] {
    auto loaded = load_checkpoint<float>(checkpoint_path);
    *out = new apsflow_model{std::move(loaded.config), std::move(loaded.model)};
  });
}

apsflow_status apsflow_model_save(const apsflow_model* model,
                                  const char* checkpoint_path) {
  APSFLOW_REQUIRE(model);
  APSFLOW_REQUIRE(checkpoint_path);
  return guarded(
      [&] { save_checkpoint(checkpoint_path, model->model, model->config); });
}

apsflow_status apsflow_model_infer(apsflow_model* model,
                                   const apsflow_image* image1,
                                   const apsflow_image* image2,
                                   apsflow_flow** out) {
  APSFLOW_REQUIRE(model);
  APSFLOW_REQUIRE(image1);
  APSFLOW_REQUIRE(image2);
  APSFLOW_REQUIRE(out);
  return guarded([&] {
    *out = new apsflow_flow{model->model.infer(image1->pixels, image2->pixels)};
  });
}

apsflow_status apsflow_model_check_config(const apsflow_model* model,
                                          const apsflow_config* config) {
  APSFLOW_REQUIRE(model);
  APSFLOW_REQUIRE(config);
  return guarded([&] {
    check_config_compatible(model->config,
                            RunConfig::from_kv_unchecked(config->kv));
  });
}

apsflow_status apsflow_similarity_maps(apsflow_model* model,
                                       const apsflow_image* image1,
                                       const apsflow_image* image2, int32_t x,
                                       int32_t y, apsflow_image** self_map,
                                       apsflow_image** cross_map) {
  APSFLOW_REQUIRE(model);
  APSFLOW_REQUIRE(image1);
  APSFLOW_REQUIRE(image2);
  APSFLOW_REQUIRE(self_map);
  APSFLOW_REQUIRE(cross_map);
  if (x < 0 || x >= image1->pixels.dim(1) || y < 0 ||
      y >= image1->pixels.dim(0)) {
    g_last_error = "query pixel (" + std::to_string(x) + ", " +
                   std::to_string(y) + ") outside the image";
    return APSFLOW_INVALID_ARGUMENT;
  }
  return guarded([&] {
    auto [sfs, ffs] = feature_similarity(model->model, image1->pixels,
                                         image2->pixels, x, y);
    *self_map = new apsflow_image{heatmap(sfs, -1.0, 1.0)};
    *cross_map = new apsflow_image{heatmap(ffs, -1.0, 1.0)};
  });
}

void apsflow_model_destroy(apsflow_model* model) { delete model; }

/* ---- high-level pipelines ------------------------------------------------ */

apsflow_status apsflow_generate_dataset(const apsflow_config* config,
                                        uint64_t seed, int32_t count,
                                        const char* out_dir) {
  APSFLOW_REQUIRE(out_dir);
  return guarded([&] {
    const auto cfg = config_of(config);
    const auto ds = export_dataset(cfg, seed, count);
    std::filesystem::create_directories(out_dir);
    std::ofstream manifest(std::string(out_dir) + "/manifest.jsonl");
    APSFLOW_CHECK(manifest.good(), IoError,
                  "cannot open manifest in '" << out_dir << "'");
    for (int i = 0; i < ds.count; ++i) {
      const auto scene = ds.scene<float>(i);
      char stem[32];
      std::snprintf(stem, sizeof(stem), "scene_%05d", i);
      const DatasetEntry e{std::string(stem) + "_im1.png",
                           std::string(stem) + "_im2.png",
                           std::string(stem) + "_flow.flo",
                           std::string(stem) + "_occ.png"};
      const std::string base = std::string(out_dir) + "/";
      write_png(base + e.im1, scene.img1);
      write_png(base + e.im2, scene.img2);
      write_flo(base + e.flow, scene.flow_gt);
      write_png(base + e.occ, image_to_rgb(scene.occlusion));
      manifest << nlohmann::json{{"im1", e.im1},
                                 {"im2", e.im2},
                                 {"flow", e.flow},
                                 {"occ", e.occ}}
                      .dump()
               << "\n";
    }
    APSFLOW_CHECK(manifest.good(), IoError,
                  "short write to manifest in '" << out_dir << "'");
  });
}

apsflow_status apsflow_train(const apsflow_config* config, uint64_t seed,
                             const char* out_dir, double* final_epe) {
  APSFLOW_REQUIRE(out_dir);
  return guarded([&] {
    auto cfg = config_of(config);
    cfg.train.seed = seed;
    std::filesystem::create_directories(out_dir);
    std::ofstream log(std::string(out_dir) + "/train_log.jsonl");
    APSFLOW_CHECK(log.good(), IoError,
                  "cannot open train log in '" << out_dir << "'");
    auto result = train<float>(cfg, &log);
    save_checkpoint(std::string(out_dir) + "/checkpoint.ckpt", result.model,
                    cfg);
    auto j = metrics_json(result.record.final_metrics,
                          result.record.zero_flow_epe);
    j["val_history"] = nlohmann::json::array();
    for (const auto& vp : result.record.val_history)
      j["val_history"].push_back(
          {{"step", vp.step}, {"epe_all", vp.metrics.epe_all}});
    write_text(std::string(out_dir) + "/metrics.json", j.dump(2) + "\n");
    if (final_epe) *final_epe = result.record.final_metrics.epe_all;
  });
}

apsflow_status apsflow_evaluate(const char* checkpoint_path,
                                const char* data_dir, const char* out_path,
                                double* epe_out) {
  APSFLOW_REQUIRE(checkpoint_path);
  return guarded([&] {
    auto loaded = load_checkpoint<float>(checkpoint_path);
    const Metrics m =
        data_dir ? evaluate_files(loaded.model, data_dir)
                 : evaluate(loaded.model,
                            loaded.config.data.val_dataset(loaded.config.train.crop));
    if (out_path) write_text(out_path, metrics_json(m).dump(2) + "\n");
    if (epe_out) *epe_out = m.epe_all;
  });
}

apsflow_status apsflow_ablate(const apsflow_config* config, const char* preset,
                              uint64_t seed, const char* out_dir) {
  APSFLOW_REQUIRE(preset);
  APSFLOW_REQUIRE(out_dir);
  return guarded([&] {
    auto base = config_of(config);
    base.train.seed = seed;
    const auto rows = ablation_preset(preset, base);
    std::filesystem::create_directories(out_dir);
    std::ofstream log(std::string(out_dir) + "/ablate_log.jsonl");
    APSFLOW_CHECK(log.good(), IoError,
                  "cannot open ablation log in '" << out_dir << "'");
    const auto results = ablate<float>(rows, &log);
    write_text(std::string(out_dir) + "/table.txt",
               format_ablation_table(results));
    std::string lines;
    for (const auto& r : results) {
      auto j = metrics_json(r.metrics, r.zero_flow_epe);
      j["name"] = r.name;
      lines += j.dump() + "\n";
    }
    write_text(std::string(out_dir) + "/rows.jsonl", lines);
  });
}

apsflow_status apsflow_gradcheck(const char* scope, const char* report_path,
                                 int32_t* failures_out) {
  APSFLOW_REQUIRE(scope);
  return guarded([&] {
    const std::string s = scope;
    std::vector<OpGradResult> results;
    if (s == "ops")
      results = run_op_gradchecks();
    else if (s == "losses")
      results = run_loss_gradchecks();
    else if (s == "end2end")
      results = run_end2end_gradcheck();
    else
      APSFLOW_CHECK(false, ContractError, "unknown gradcheck scope '" << s
                                              << "'; expected ops, losses or "
                                                 "end2end");
    int32_t failures = 0;
    const auto text = gradcheck_report(results, &failures);
    if (report_path) write_text(report_path, text);
    if (failures_out) *failures_out = failures;
  });
}

}  // extern "C"
