// Command-line front end. Talks to the library exclusively through the C API.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "apsflow.h"

namespace {

int exit_code_of(apsflow_status status) {
  if (status == APSFLOW_OK) return 0;
  return status == APSFLOW_INVALID_ARGUMENT ? 2 : 1;
}

int fail(apsflow_status status) {
  std::cerr << "error: " << apsflow_last_error() << "\n";
  return exit_code_of(status);
}

// Relative outputs land under --out; absolute paths are taken as given.
std::string under_out(const std::string& out_dir, const std::string& path) {
  if (std::filesystem::path(path).is_absolute()) return path;
  return out_dir + "/" + path;
}

struct ConfigHandle {
  apsflow_config* ptr = nullptr;
  ~ConfigHandle() { apsflow_config_destroy(ptr); }
};

struct ModelHandle {
  apsflow_model* ptr = nullptr;
  ~ModelHandle() { apsflow_model_destroy(ptr); }
};

struct FlowHandle {
  apsflow_flow* ptr = nullptr;
  ~FlowHandle() { apsflow_flow_destroy(ptr); }
};

struct ImageHandle {
  apsflow_image* ptr = nullptr;
  ~ImageHandle() { apsflow_image_destroy(ptr); }
};

apsflow_status load_config(const std::string& path, ConfigHandle& config) {
  return apsflow_config_create(path.empty() ? nullptr : path.c_str(),
                               &config.ptr);
}

bool print_file(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) return false;
  std::cout << in.rdbuf();
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive pyramid sampling optical flow"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", checkpoint, preset;
  uint64_t seed = 1;

  auto add_common = [&](CLI::App* cmd, bool with_config = true) {
    cmd->add_option("--seed", seed, "RNG seed");
    cmd->add_option("--out", out_dir, "output directory")
        ->default_str(".");
    if (with_config)
      cmd->add_option("--config", config_path, "key = value config file");
  };

  auto* train = app.add_subcommand("train", "train a model from scratch");
  add_common(train);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  std::string data_dir;
  eval->add_option("--data", data_dir,
                   "generated dataset directory (default: the checkpoint "
                   "config's validation split)");

  auto* ablate = app.add_subcommand("ablate", "train an ablation matrix");
  add_common(ablate);
  ablate
      ->add_option("--preset", preset,
                   "pooling, upsampling or loss-terms")
      ->required();

  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gradcheck, false);
  std::string scope;
  gradcheck->add_option("scope", scope, "ops, losses or end2end")->required();

  auto* gen = app.add_subcommand("gen-data", "emit a synthetic dataset");
  add_common(gen);
  int32_t count = 16;
  gen->add_option("--count", count, "number of scenes");

  auto* viz_flow = app.add_subcommand("viz-flow", "render a .flo file");
  add_common(viz_flow, false);
  std::string in_path, out_path;
  float max_value = 0;
  viz_flow->add_option("input", in_path, ".flo file")->required();
  viz_flow->add_option("output", out_path, "PNG file")->required();
  viz_flow->add_option("--max", max_value, "color wheel saturation magnitude");

  auto* viz_error = app.add_subcommand("viz-error", "render an endpoint-error map");
  add_common(viz_error, false);
  std::string gt_path;
  viz_error->add_option("predicted", in_path, "predicted .flo")->required();
  viz_error->add_option("reference", gt_path, "reference .flo")->required();
  viz_error->add_option("output", out_path, "PNG file")->required();
  viz_error->add_option("--max", max_value, "brightness saturation error");

  auto* viz_sim =
      app.add_subcommand("viz-similarity", "feature similarity heatmaps");
  add_common(viz_sim, false);
  viz_sim->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  std::string im1_path, im2_path, self_out = "sfs.png", cross_out = "ffs.png";
  int32_t px = 0, py = 0;
  viz_sim->add_option("image1", im1_path, "first frame PNG")->required();
  viz_sim->add_option("image2", im2_path, "second frame PNG")->required();
  viz_sim->add_option("x", px, "query pixel column")->required();
  viz_sim->add_option("y", py, "query pixel row")->required();
  viz_sim->add_option("--self-out", self_out, "self-similarity PNG name");
  viz_sim->add_option("--cross-out", cross_out, "cross-similarity PNG name");

  auto* convert = app.add_subcommand("convert", "re-serialize a .flo file");
  add_common(convert, false);
  bool identity = false;
  convert->add_flag("--identity", identity, "copy input to output unchanged");
  convert->add_option("input", in_path, ".flo file")->required();
  convert->add_option("output", out_path, ".flo file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (train->parsed()) {
    ConfigHandle cfg;
    if (auto st = load_config(config_path, cfg); st != APSFLOW_OK)
      return fail(st);
    double epe = 0;
    if (auto st = apsflow_train(cfg.ptr, seed, out_dir.c_str(), &epe);
        st != APSFLOW_OK)
      return fail(st);
    std::printf("final EPE %.4f\n", epe);
    std::printf("wrote %s/checkpoint.ckpt\n", out_dir.c_str());
    return 0;
  }

  if (eval->parsed()) {
    if (!config_path.empty()) {
      ConfigHandle cfg;
      if (auto st = load_config(config_path, cfg); st != APSFLOW_OK)
        return fail(st);
      ModelHandle model;
      if (auto st = apsflow_model_load(checkpoint.c_str(), &model.ptr);
          st != APSFLOW_OK)
        return fail(st);
      if (auto st = apsflow_model_check_config(model.ptr, cfg.ptr);
          st != APSFLOW_OK)
        return fail(st);
    }
    std::filesystem::create_directories(out_dir);
    const auto metrics_path = under_out(out_dir, "metrics.json");
    double epe = 0;
    if (auto st = apsflow_evaluate(checkpoint.c_str(),
                                   data_dir.empty() ? nullptr : data_dir.c_str(),
                                   metrics_path.c_str(), &epe);
        st != APSFLOW_OK)
      return fail(st);
    std::printf("EPE %.4f\n", epe);
    print_file(metrics_path);
    return 0;
  }

  if (ablate->parsed()) {
    ConfigHandle cfg;
    if (auto st = load_config(config_path, cfg); st != APSFLOW_OK)
      return fail(st);
    if (auto st = apsflow_ablate(cfg.ptr, preset.c_str(), seed, out_dir.c_str());
        st != APSFLOW_OK)
      return fail(st);
    print_file(under_out(out_dir, "table.txt"));
    return 0;
  }

  if (gradcheck->parsed()) {
    std::filesystem::create_directories(out_dir);
    const auto report = under_out(out_dir, "gradcheck_" + scope + ".txt");
    int32_t failures = 0;
    if (auto st = apsflow_gradcheck(scope.c_str(), report.c_str(), &failures);
        st != APSFLOW_OK)
      return fail(st);
    print_file(report);
    if (failures > 0) {
      std::cerr << failures << " gradient check(s) failed\n";
      return 1;
    }
    return 0;
  }

  if (gen->parsed()) {
    ConfigHandle cfg;
    if (auto st = load_config(config_path, cfg); st != APSFLOW_OK)
      return fail(st);
    if (auto st =
            apsflow_generate_dataset(cfg.ptr, seed, count, out_dir.c_str());
        st != APSFLOW_OK)
      return fail(st);
    std::printf("wrote %d scenes under %s\n", count, out_dir.c_str());
    return 0;
  }

  if (viz_flow->parsed()) {
    FlowHandle flow;
    if (auto st = apsflow_flow_read(in_path.c_str(), &flow.ptr);
        st != APSFLOW_OK)
      return fail(st);
    ImageHandle img;
    if (auto st = apsflow_flow_visualize(flow.ptr, max_value, &img.ptr);
        st != APSFLOW_OK)
      return fail(st);
    std::filesystem::create_directories(out_dir);
    if (auto st = apsflow_image_write_png(img.ptr,
                                          under_out(out_dir, out_path).c_str());
        st != APSFLOW_OK)
      return fail(st);
    return 0;
  }

  if (viz_error->parsed()) {
    FlowHandle pred, ref;
    if (auto st = apsflow_flow_read(in_path.c_str(), &pred.ptr);
        st != APSFLOW_OK)
      return fail(st);
    if (auto st = apsflow_flow_read(gt_path.c_str(), &ref.ptr);
        st != APSFLOW_OK)
      return fail(st);
    ImageHandle img;
    if (auto st = apsflow_error_map(pred.ptr, ref.ptr, max_value, &img.ptr);
        st != APSFLOW_OK)
      return fail(st);
    std::filesystem::create_directories(out_dir);
    if (auto st = apsflow_image_write_png(img.ptr,
                                          under_out(out_dir, out_path).c_str());
        st != APSFLOW_OK)
      return fail(st);
    return 0;
  }

  if (viz_sim->parsed()) {
    ModelHandle model;
    if (auto st = apsflow_model_load(checkpoint.c_str(), &model.ptr);
        st != APSFLOW_OK)
      return fail(st);
    ImageHandle i1, i2;
    if (auto st = apsflow_image_read_png(im1_path.c_str(), &i1.ptr);
        st != APSFLOW_OK)
      return fail(st);
    if (auto st = apsflow_image_read_png(im2_path.c_str(), &i2.ptr);
        st != APSFLOW_OK)
      return fail(st);
    ImageHandle self_map, cross_map;
    if (auto st = apsflow_similarity_maps(model.ptr, i1.ptr, i2.ptr, px, py,
                                          &self_map.ptr, &cross_map.ptr);
        st != APSFLOW_OK)
      return fail(st);
    std::filesystem::create_directories(out_dir);
    if (auto st = apsflow_image_write_png(
            self_map.ptr, under_out(out_dir, self_out).c_str());
        st != APSFLOW_OK)
      return fail(st);
    if (auto st = apsflow_image_write_png(
            cross_map.ptr, under_out(out_dir, cross_out).c_str());
        st != APSFLOW_OK)
      return fail(st);
    return 0;
  }

  if (convert->parsed()) {
    if (!identity) {
      std::cerr << "convert: only --identity mode exists\n";
      return 2;
    }
    FlowHandle flow;
    if (auto st = apsflow_flow_read(in_path.c_str(), &flow.ptr);
        st != APSFLOW_OK)
      return fail(st);
    std::filesystem::create_directories(out_dir);
    if (auto st =
            apsflow_flow_write(flow.ptr, under_out(out_dir, out_path).c_str());
        st != APSFLOW_OK)
      return fail(st);
    return 0;
  }

  return 2;
}
