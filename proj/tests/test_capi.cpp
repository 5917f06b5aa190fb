// Exercises the shared-library C interface: handle lifecycles, status codes,
// error messages, and the file pipelines.

#include <doctest.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "apsflow.h"

namespace {

std::string temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("apsflow_capi_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

struct Config {
  apsflow_config* ptr = nullptr;
  Config() { REQUIRE(apsflow_config_create(nullptr, &ptr) == APSFLOW_OK); }
  ~Config() { apsflow_config_destroy(ptr); }
  void set(const char* k, const char* v) {
    REQUIRE(apsflow_config_set(ptr, k, v) == APSFLOW_OK);
  }
};

// Small enough that model calls cost milliseconds.
void make_tiny(Config& cfg) {
  cfg.set("network.num_levels", "2");
  cfg.set("network.channels", "8,12,12");
  cfg.set("network.corr_radius", "2");
  cfg.set("network.est_widths", "12,12");
  cfg.set("network.subnet_base", "8");
  cfg.set("train.crop", "16");
  cfg.set("train.steps", "1");
  cfg.set("train.batch_size", "1");
  cfg.set("train.val_every", "10");
  cfg.set("data.scene_size", "20");
  cfg.set("data.margin", "4");
  cfg.set("data.max_motion", "2");
  cfg.set("data.num_layers", "1");
  cfg.set("data.train_scenes", "3");
  cfg.set("data.val_scenes", "2");
}

std::vector<float> image_pixels(const apsflow_image* img) {
  int32_t w = 0, h = 0, c = 0;
  REQUIRE(apsflow_image_size(img, &w, &h, &c) == APSFLOW_OK);
  std::vector<float> data(static_cast<size_t>(w) * h * c);
  REQUIRE(apsflow_image_data(img, data.data()) == APSFLOW_OK);
  return data;
}

std::vector<float> checker_image(int size) {
  std::vector<float> px(static_cast<size_t>(size) * size * 3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const float v = ((x / 4 + y / 4) % 2) ? 0.8f : 0.2f;
      for (int c = 0; c < 3; ++c)
        px[(static_cast<size_t>(y) * size + x) * 3 + c] = v + 0.02f * c;
    }
  return px;
}

}  // namespace

TEST_CASE("version and error message basics") {
  CHECK(std::string(apsflow_version()) == "0.1.0");
  CHECK(apsflow_last_error() != nullptr);
}

TEST_CASE("null arguments are rejected with INVALID_ARGUMENT") {
  CHECK(apsflow_flow_create(4, 4, nullptr, nullptr) ==
        APSFLOW_INVALID_ARGUMENT);
  CHECK(apsflow_flow_read(nullptr, nullptr) == APSFLOW_INVALID_ARGUMENT);
  CHECK(apsflow_flow_write(nullptr, "x") == APSFLOW_INVALID_ARGUMENT);
  CHECK(apsflow_image_read_png(nullptr, nullptr) == APSFLOW_INVALID_ARGUMENT);
  CHECK(apsflow_model_load(nullptr, nullptr) == APSFLOW_INVALID_ARGUMENT);
  CHECK(std::string(apsflow_last_error()).find("null argument") !=
        std::string::npos);
}

TEST_CASE("flow create, data copy and .flo round trip") {
  std::vector<float> data(static_cast<size_t>(4) * 3 * 2);
  for (size_t i = 0; i < data.size(); ++i)
    data[i] = static_cast<float>(i) * 0.25f - 1.0f;

  apsflow_flow* flow = nullptr;
  REQUIRE(apsflow_flow_create(4, 3, data.data(), &flow) == APSFLOW_OK);
  int32_t w = 0, h = 0;
  REQUIRE(apsflow_flow_size(flow, &w, &h) == APSFLOW_OK);
  CHECK(w == 4);
  CHECK(h == 3);
  std::vector<float> back(data.size());
  REQUIRE(apsflow_flow_data(flow, back.data()) == APSFLOW_OK);
  CHECK(back == data);

  const auto dir = temp_dir("flo");
  const auto path = dir + "/field.flo";
  REQUIRE(apsflow_flow_write(flow, path.c_str()) == APSFLOW_OK);
  apsflow_flow* reread = nullptr;
  REQUIRE(apsflow_flow_read(path.c_str(), &reread) == APSFLOW_OK);
  std::vector<float> again(data.size());
  REQUIRE(apsflow_flow_data(reread, again.data()) == APSFLOW_OK);
  CHECK(again == data);

  apsflow_flow_destroy(flow);
  apsflow_flow_destroy(reread);
  CHECK(apsflow_flow_read((dir + "/missing.flo").c_str(), &reread) ==
        APSFLOW_IO_ERROR);
}

TEST_CASE("zero-size flow and bad image channel counts are contract errors") {
  apsflow_flow* flow = nullptr;
  CHECK(apsflow_flow_create(0, 4, nullptr, &flow) == APSFLOW_CONTRACT_ERROR);
  const float px[8] = {};
  apsflow_image* img = nullptr;
  CHECK(apsflow_image_create(2, 2, 2, px, &img) == APSFLOW_CONTRACT_ERROR);
}

TEST_CASE("image PNG round trip preserves 8-bit quantized pixels") {
  const int size = 8;
  auto px = checker_image(size);
  apsflow_image* img = nullptr;
  REQUIRE(apsflow_image_create(size, size, 3, px.data(), &img) == APSFLOW_OK);
  const auto dir = temp_dir("png");
  const auto path = dir + "/img.png";
  REQUIRE(apsflow_image_write_png(img, path.c_str()) == APSFLOW_OK);
  apsflow_image* reread = nullptr;
  REQUIRE(apsflow_image_read_png(path.c_str(), &reread) == APSFLOW_OK);
  const auto back = image_pixels(reread);
  REQUIRE(back.size() == px.size());
  for (size_t i = 0; i < px.size(); ++i)
    CHECK(back[i] == doctest::Approx(px[i]).epsilon(0).scale(1).epsilon(0.004));
  apsflow_image_destroy(img);
  apsflow_image_destroy(reread);
}

TEST_CASE("zero flow renders white; identical flows give a black error map") {
  apsflow_flow* flow = nullptr;
  REQUIRE(apsflow_flow_create(5, 4, nullptr, &flow) == APSFLOW_OK);
  apsflow_image* viz = nullptr;
  REQUIRE(apsflow_flow_visualize(flow, 0, &viz) == APSFLOW_OK);
  for (float v : image_pixels(viz)) CHECK(v == 1.0f);

  apsflow_image* err = nullptr;
  REQUIRE(apsflow_error_map(flow, flow, 0, &err) == APSFLOW_OK);
  for (float v : image_pixels(err)) CHECK(v == 0.0f);

  apsflow_image_destroy(viz);
  apsflow_image_destroy(err);
  apsflow_flow_destroy(flow);
}

TEST_CASE("config rejects unknown keys and bad values") {
  Config cfg;
  CHECK(apsflow_config_set(cfg.ptr, "network.nope", "3") ==
        APSFLOW_FORMAT_ERROR);
  CHECK(apsflow_config_set(cfg.ptr, "train.steps", "many") ==
        APSFLOW_FORMAT_ERROR);
  // A failed set leaves the previous state intact.
  cfg.set("train.steps", "5");
  CHECK(apsflow_config_set(cfg.ptr, "train.steps", "x") ==
        APSFLOW_FORMAT_ERROR);
  apsflow_model* model = nullptr;
  Config tiny;
  make_tiny(tiny);
  REQUIRE(apsflow_model_create(tiny.ptr, 3, &model) == APSFLOW_OK);
  apsflow_model_destroy(model);
}

TEST_CASE("geometry violations surface when the config is used") {
  Config cfg;
  make_tiny(cfg);
  cfg.set("train.crop", "18");  // not divisible by the pyramid stride
  apsflow_model* model = nullptr;
  CHECK(apsflow_model_create(cfg.ptr, 3, &model) == APSFLOW_CONTRACT_ERROR);
  CHECK(std::string(apsflow_last_error()).find("divisible") !=
        std::string::npos);
}

TEST_CASE("config file parsing mirrors in-memory sets") {
  const auto dir = temp_dir("cfg");
  const auto path = dir + "/run.cfg";
  {
    std::ofstream out(path);
    out << "# comment\n" << "train.steps = 7\n" << "network.num_levels = 2\n";
  }
  apsflow_config* cfg = nullptr;
  REQUIRE(apsflow_config_create(path.c_str(), &cfg) == APSFLOW_OK);
  apsflow_config_destroy(cfg);

  {
    std::ofstream out(path);
    out << "bogus.key = 1\n";
  }
  CHECK(apsflow_config_create(path.c_str(), &cfg) == APSFLOW_FORMAT_ERROR);
  CHECK(apsflow_config_create((dir + "/missing.cfg").c_str(), &cfg) ==
        APSFLOW_IO_ERROR);
}

TEST_CASE("model save/load keeps inference bit-exact through the C API") {
  Config cfg;
  make_tiny(cfg);
  apsflow_model* model = nullptr;
  REQUIRE(apsflow_model_create(cfg.ptr, 11, &model) == APSFLOW_OK);

  const int size = 16;
  auto px1 = checker_image(size);
  auto px2 = checker_image(size);
  for (size_t i = 0; i < px2.size(); i += 3) px2[i] += 0.05f;
  apsflow_image* i1 = nullptr;
  apsflow_image* i2 = nullptr;
  REQUIRE(apsflow_image_create(size, size, 3, px1.data(), &i1) == APSFLOW_OK);
  REQUIRE(apsflow_image_create(size, size, 3, px2.data(), &i2) == APSFLOW_OK);

  apsflow_flow* flow = nullptr;
  REQUIRE(apsflow_model_infer(model, i1, i2, &flow) == APSFLOW_OK);

  const auto dir = temp_dir("ckpt");
  const auto path = dir + "/m.ckpt";
  REQUIRE(apsflow_model_save(model, path.c_str()) == APSFLOW_OK);
  apsflow_model* loaded = nullptr;
  REQUIRE(apsflow_model_load(path.c_str(), &loaded) == APSFLOW_OK);
  apsflow_flow* flow2 = nullptr;
  REQUIRE(apsflow_model_infer(loaded, i1, i2, &flow2) == APSFLOW_OK);

  std::vector<float> a(static_cast<size_t>(size) * size * 2), b(a.size());
  REQUIRE(apsflow_flow_data(flow, a.data()) == APSFLOW_OK);
  REQUIRE(apsflow_flow_data(flow2, b.data()) == APSFLOW_OK);
  CHECK(a == b);

  // The stored config travels with the checkpoint.
  CHECK(apsflow_model_check_config(loaded, cfg.ptr) == APSFLOW_OK);
  Config other;
  make_tiny(other);
  other.set("network.corr_radius", "1");
  CHECK(apsflow_model_check_config(loaded, other.ptr) ==
        APSFLOW_CONTRACT_ERROR);

  apsflow_flow_destroy(flow);
  apsflow_flow_destroy(flow2);
  apsflow_image_destroy(i1);
  apsflow_image_destroy(i2);
  apsflow_model_destroy(model);
  apsflow_model_destroy(loaded);
}

TEST_CASE("inference rejects sizes off the pyramid stride") {
  Config cfg;
  make_tiny(cfg);
  apsflow_model* model = nullptr;
  REQUIRE(apsflow_model_create(cfg.ptr, 11, &model) == APSFLOW_OK);
  const int size = 10;
  std::vector<float> px(static_cast<size_t>(size) * size * 3, 0.5f);
  apsflow_image* img = nullptr;
  REQUIRE(apsflow_image_create(size, size, 3, px.data(), &img) == APSFLOW_OK);
  apsflow_flow* flow = nullptr;
  CHECK(apsflow_model_infer(model, img, img, &flow) ==
        APSFLOW_CONTRACT_ERROR);
  apsflow_image_destroy(img);
  apsflow_model_destroy(model);
}

TEST_CASE("similarity maps: bounds checking and siamese symmetry") {
  Config cfg;
  make_tiny(cfg);
  apsflow_model* model = nullptr;
  REQUIRE(apsflow_model_create(cfg.ptr, 19, &model) == APSFLOW_OK);
  const int size = 16;
  auto px = checker_image(size);
  apsflow_image* img = nullptr;
  REQUIRE(apsflow_image_create(size, size, 3, px.data(), &img) == APSFLOW_OK);

  apsflow_image* sfs = nullptr;
  apsflow_image* ffs = nullptr;
  CHECK(apsflow_similarity_maps(model, img, img, 16, 3, &sfs, &ffs) ==
        APSFLOW_INVALID_ARGUMENT);
  CHECK(apsflow_similarity_maps(model, img, img, 3, -1, &sfs, &ffs) ==
        APSFLOW_INVALID_ARGUMENT);

  REQUIRE(apsflow_similarity_maps(model, img, img, 5, 7, &sfs, &ffs) ==
          APSFLOW_OK);
  CHECK(image_pixels(sfs) == image_pixels(ffs));
  apsflow_image_destroy(sfs);
  apsflow_image_destroy(ffs);
  apsflow_image_destroy(img);
  apsflow_model_destroy(model);
}

TEST_CASE("gen-data writes a dataset that evaluate can consume") {
  Config cfg;
  make_tiny(cfg);
  const auto data_dir = temp_dir("ds");
  REQUIRE(apsflow_generate_dataset(cfg.ptr, 21, 3, data_dir.c_str()) ==
          APSFLOW_OK);
  CHECK(std::filesystem::exists(data_dir + "/manifest.jsonl"));
  CHECK(std::filesystem::exists(data_dir + "/scene_00002_im2.png"));

  apsflow_model* model = nullptr;
  REQUIRE(apsflow_model_create(cfg.ptr, 11, &model) == APSFLOW_OK);
  const auto ckpt = data_dir + "/m.ckpt";
  REQUIRE(apsflow_model_save(model, ckpt.c_str()) == APSFLOW_OK);
  apsflow_model_destroy(model);

  const auto metrics_path = data_dir + "/metrics.json";
  double epe = -1;
  REQUIRE(apsflow_evaluate(ckpt.c_str(), data_dir.c_str(),
                           metrics_path.c_str(), &epe) == APSFLOW_OK);
  CHECK(epe >= 0);
  CHECK(std::filesystem::exists(metrics_path));

  // Without a data dir the stored config's validation split is used.
  double epe2 = -1;
  REQUIRE(apsflow_evaluate(ckpt.c_str(), nullptr, nullptr, &epe2) ==
          APSFLOW_OK);
  CHECK(epe2 >= 0);

  CHECK(apsflow_evaluate(ckpt.c_str(), (data_dir + "/none").c_str(), nullptr,
                         &epe) == APSFLOW_IO_ERROR);
}

TEST_CASE("train pipeline writes checkpoint, log and metrics") {
  Config cfg;
  make_tiny(cfg);
  const auto out = temp_dir("train");
  double epe = -1;
  REQUIRE(apsflow_train(cfg.ptr, 5, out.c_str(), &epe) == APSFLOW_OK);
  CHECK(epe >= 0);
  CHECK(std::filesystem::exists(out + "/checkpoint.ckpt"));
  CHECK(std::filesystem::exists(out + "/train_log.jsonl"));
  CHECK(std::filesystem::exists(out + "/metrics.json"));

  apsflow_model* model = nullptr;
  REQUIRE(apsflow_model_load((out + "/checkpoint.ckpt").c_str(), &model) ==
          APSFLOW_OK);
  apsflow_model_destroy(model);
}

TEST_CASE("gradcheck rejects unknown scopes") {
  int32_t failures = -1;
  CHECK(apsflow_gradcheck("everything", nullptr, &failures) ==
        APSFLOW_CONTRACT_ERROR);
  CHECK(apsflow_gradcheck(nullptr, nullptr, &failures) ==
        APSFLOW_INVALID_ARGUMENT);
}

TEST_CASE("ablate rejects unknown presets") {
  Config cfg;
  make_tiny(cfg);
  const auto out = temp_dir("ablate_bad");
  CHECK(apsflow_ablate(cfg.ptr, "table9", 1, out.c_str()) ==
        APSFLOW_CONTRACT_ERROR);
}

TEST_CASE("ablate runs a preset and writes the table") {
  Config cfg;
  make_tiny(cfg);
  const auto out = temp_dir("ablate");
  REQUIRE(apsflow_ablate(cfg.ptr, "upsampling", 1, out.c_str()) == APSFLOW_OK);
  std::ifstream table(out + "/table.txt");
  REQUIRE(table.good());
  std::string text((std::istreambuf_iterator<char>(table)),
                   std::istreambuf_iterator<char>());
  CHECK(text.find("bilinear") != std::string::npos);
  CHECK(text.find("afu+recon") != std::string::npos);
  CHECK(std::filesystem::exists(out + "/rows.jsonl"));
}
