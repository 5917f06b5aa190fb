#pragma once

// Plain `key = value` configuration text and the full run configuration
// (network, training, losses, data) round-tripping through it. Unknown keys
// are rejected so typos fail loudly instead of silently using defaults.

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "losses.hpp"
#include "network.hpp"
#include "synth.hpp"

namespace apsflow {

class KeyValues {
 public:
  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_)
      if (k == key) {
        v = value;
        return;
      }
    entries_.emplace_back(key, value);
  }

  bool has(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return true;
    return false;
  }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    APSFLOW_CHECK(false, ContractError, "config: missing key '" << key << "'");
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

  static KeyValues parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      APSFLOW_CHECK(eq != std::string::npos, FormatError,
                    "config: line " << line_no << " is not 'key = value': " << line);
      const auto key = trim(line.substr(0, eq));
      const auto value = trim(line.substr(eq + 1));
      APSFLOW_CHECK(!key.empty(), FormatError, "config: empty key at line " << line_no);
      kv.set(key, value);
    }
    return kv;
  }

  static KeyValues parse_file(const std::string& path) {
    std::ifstream in(path);
    APSFLOW_CHECK(in.good(), IoError, "config: cannot open '" << path << "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

namespace detail {

inline int to_int(const std::string& s, const std::string& key) {
  try {
    size_t used = 0;
    const int v = std::stoi(s, &used);
    APSFLOW_CHECK(used == s.size(), FormatError, "config: bad integer for " << key);
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    APSFLOW_CHECK(false, FormatError, "config: bad integer '" << s << "' for " << key);
  }
}

inline uint64_t to_u64(const std::string& s, const std::string& key) {
  try {
    size_t used = 0;
    const auto v = std::stoull(s, &used);
    APSFLOW_CHECK(used == s.size(), FormatError, "config: bad integer for " << key);
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    APSFLOW_CHECK(false, FormatError, "config: bad integer '" << s << "' for " << key);
  }
}

inline double to_double(const std::string& s, const std::string& key) {
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    APSFLOW_CHECK(used == s.size(), FormatError, "config: bad number for " << key);
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    APSFLOW_CHECK(false, FormatError, "config: bad number '" << s << "' for " << key);
  }
}

inline bool to_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "on") return true;
  if (s == "false" || s == "0" || s == "off") return false;
  APSFLOW_CHECK(false, FormatError, "config: bad boolean '" << s << "' for " << key);
}

inline std::vector<int> to_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(to_int(item, key));
  APSFLOW_CHECK(!out.empty(), FormatError, "config: empty list for " << key);
  return out;
}

inline std::string list_to_text(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string fmt_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace detail

// Ablation switches for the loss terms. Pooling and upsampling substitutions
// live in NetworkConfig.
struct LossToggles {
  bool census = true;
  bool bdwl = true;
  bool aug_reg = true;
  bool sampling_reg = true;
};

struct TrainParams {
  int steps = 2000;
  int batch_size = 4;
  double lr = 1e-3;
  uint64_t seed = 1;
  int crop = 64;
  int val_every = 500;
  // Steps before the forward-backward occlusion check and the augmentation
  // consistency term switch on. An untrained model is not forward-backward
  // consistent, so the check empties the data-term masks from step one, and
  // the augmentation term pulls the student toward a meaningless teacher.
  // -1 picks steps / 4.
  int warmup = -1;

  int resolved_warmup() const { return warmup < 0 ? steps / 4 : warmup; }

  void validate() const {
    APSFLOW_CHECK(steps >= 0, ContractError, "train: negative steps");
    APSFLOW_CHECK(batch_size >= 1, ContractError, "train: batch_size < 1");
    APSFLOW_CHECK(lr >= 0, ContractError, "train: negative learning rate");
    APSFLOW_CHECK(crop >= 8, ContractError, "train: crop too small");
    APSFLOW_CHECK(val_every >= 1, ContractError, "train: val_every < 1");
    APSFLOW_CHECK(warmup >= -1, ContractError,
                  "train: warmup must be -1 (auto) or >= 0");
  }
};

struct DataParams {
  int scene_size = 72;   // training scenes; crops are cut from these
  int margin = 8;
  double max_motion = 6.0;
  int num_layers = 3;
  int train_scenes = 200;
  int val_scenes = 16;
  uint64_t train_seed = 11;
  uint64_t val_seed = 503;

  SceneDataset train_dataset(int crop_unused = 0) const {
    (void)crop_unused;
    SceneDataset ds;
    ds.seed = train_seed;
    ds.count = train_scenes;
    ds.params.height = scene_size;
    ds.params.width = scene_size;
    ds.params.margin = margin;
    ds.params.max_motion = max_motion;
    ds.params.num_layers = num_layers;
    return ds;
  }

  // Validation scenes are generated at the crop size directly.
  SceneDataset val_dataset(int crop) const {
    SceneDataset ds;
    ds.seed = val_seed;
    ds.count = val_scenes;
    ds.params.height = crop;
    ds.params.width = crop;
    ds.params.margin = margin;
    ds.params.max_motion = max_motion;
    ds.params.num_layers = num_layers;
    return ds;
  }
};

// Network sized so a full default training run finishes in minutes on a CPU.
// Direct Model users get the wider NetworkConfig defaults; runs configured
// through RunConfig start from this one.
inline NetworkConfig default_train_network() {
  NetworkConfig net;
  net.channels = {12, 16, 16, 16};
  net.corr_radius = 3;
  net.est_widths = {16, 16, 16};
  net.subnet_base = 8;
  return net;
}

struct RunConfig {
  NetworkConfig network = default_train_network();
  TrainParams train;
  DataParams data;
  LossToggles toggles;
  LossWeights weights;

  void validate() const {
    network.validate();
    train.validate();
    APSFLOW_CHECK(train.crop % network.pyramid_divisor() == 0, ContractError,
                  "config: crop " << train.crop << " not divisible by "
                                  << network.pyramid_divisor());
    APSFLOW_CHECK(data.scene_size >= train.crop, ContractError,
                  "config: scene_size " << data.scene_size << " smaller than crop "
                                        << train.crop);
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("network.num_levels", std::to_string(network.num_levels));
    kv.set("network.channels", detail::list_to_text(network.channels));
    kv.set("network.corr_radius", std::to_string(network.corr_radius));
    kv.set("network.rho", detail::fmt_double(network.rho));
    kv.set("network.est_widths", detail::list_to_text(network.est_widths));
    kv.set("network.subnet_base", std::to_string(network.subnet_base));
    kv.set("network.pooling", pooling_name(network.pooling));
    kv.set("network.upsampling",
           network.upsampling == UpKind::kAfu ? "afu" : "bilinear");
    kv.set("train.steps", std::to_string(train.steps));
    kv.set("train.batch_size", std::to_string(train.batch_size));
    kv.set("train.lr", detail::fmt_double(train.lr));
    kv.set("train.seed", std::to_string(train.seed));
    kv.set("train.crop", std::to_string(train.crop));
    kv.set("train.val_every", std::to_string(train.val_every));
    kv.set("train.warmup", std::to_string(train.warmup));
    kv.set("data.scene_size", std::to_string(data.scene_size));
    kv.set("data.margin", std::to_string(data.margin));
    kv.set("data.max_motion", detail::fmt_double(data.max_motion));
    kv.set("data.num_layers", std::to_string(data.num_layers));
    kv.set("data.train_scenes", std::to_string(data.train_scenes));
    kv.set("data.val_scenes", std::to_string(data.val_scenes));
    kv.set("data.train_seed", std::to_string(data.train_seed));
    kv.set("data.val_seed", std::to_string(data.val_seed));
    kv.set("loss.census", toggles.census ? "true" : "false");
    kv.set("loss.bdwl", toggles.bdwl ? "true" : "false");
    kv.set("loss.aug_reg", toggles.aug_reg ? "true" : "false");
    kv.set("loss.sampling_reg", toggles.sampling_reg ? "true" : "false");
    kv.set("loss.smooth_weight", detail::fmt_double(weights.smooth));
    kv.set("loss.census_weight", detail::fmt_double(weights.census));
    kv.set("loss.aug_weight", detail::fmt_double(weights.aug_reg));
    kv.set("loss.sampling_weight", detail::fmt_double(weights.sampling_reg));
    return kv;
  }

  // Applies keys without the cross-field geometry checks; lets callers stage
  // several set() calls that are only consistent once complete.
  static RunConfig from_kv_unchecked(const KeyValues& kv) {
    RunConfig cfg;
    for (const auto& [key, value] : kv.entries()) {
      if (key == "network.num_levels")
        cfg.network.num_levels = detail::to_int(value, key);
      else if (key == "network.channels")
        cfg.network.channels = detail::to_int_list(value, key);
      else if (key == "network.corr_radius")
        cfg.network.corr_radius = detail::to_int(value, key);
      else if (key == "network.rho")
        cfg.network.rho = detail::to_double(value, key);
      else if (key == "network.est_widths")
        cfg.network.est_widths = detail::to_int_list(value, key);
      else if (key == "network.subnet_base")
        cfg.network.subnet_base = detail::to_int(value, key);
      else if (key == "network.pooling")
        cfg.network.pooling = pooling_from_name(value);
      else if (key == "network.upsampling")
        cfg.network.upsampling = upsampling_from_name(value);
      else if (key == "train.steps")
        cfg.train.steps = detail::to_int(value, key);
      else if (key == "train.batch_size")
        cfg.train.batch_size = detail::to_int(value, key);
      else if (key == "train.lr")
        cfg.train.lr = detail::to_double(value, key);
      else if (key == "train.seed")
        cfg.train.seed = detail::to_u64(value, key);
      else if (key == "train.crop")
        cfg.train.crop = detail::to_int(value, key);
      else if (key == "train.val_every")
        cfg.train.val_every = detail::to_int(value, key);
      else if (key == "train.warmup")
        cfg.train.warmup = detail::to_int(value, key);
      else if (key == "data.scene_size")
        cfg.data.scene_size = detail::to_int(value, key);
      else if (key == "data.margin")
        cfg.data.margin = detail::to_int(value, key);
      else if (key == "data.max_motion")
        cfg.data.max_motion = detail::to_double(value, key);
      else if (key == "data.num_layers")
        cfg.data.num_layers = detail::to_int(value, key);
      else if (key == "data.train_scenes")
        cfg.data.train_scenes = detail::to_int(value, key);
      else if (key == "data.val_scenes")
        cfg.data.val_scenes = detail::to_int(value, key);
      else if (key == "data.train_seed")
        cfg.data.train_seed = detail::to_u64(value, key);
      else if (key == "data.val_seed")
        cfg.data.val_seed = detail::to_u64(value, key);
      else if (key == "loss.census")
        cfg.toggles.census = detail::to_bool(value, key);
      else if (key == "loss.bdwl")
        cfg.toggles.bdwl = detail::to_bool(value, key);
      else if (key == "loss.aug_reg")
        cfg.toggles.aug_reg = detail::to_bool(value, key);
      else if (key == "loss.sampling_reg")
        cfg.toggles.sampling_reg = detail::to_bool(value, key);
      else if (key == "loss.smooth_weight")
        cfg.weights.smooth = detail::to_double(value, key);
      else if (key == "loss.census_weight")
        cfg.weights.census = detail::to_double(value, key);
      else if (key == "loss.aug_weight")
        cfg.weights.aug_reg = detail::to_double(value, key);
      else if (key == "loss.sampling_weight")
        cfg.weights.sampling_reg = detail::to_double(value, key);
      else
        APSFLOW_CHECK(false, FormatError, "config: unknown key '" << key << "'");
    }
    return cfg;
  }

  static RunConfig from_kv(const KeyValues& kv) {
    auto cfg = from_kv_unchecked(kv);
    cfg.validate();
    return cfg;
  }

  static const char* pooling_name(PoolKind k) {
    switch (k) {
      case PoolKind::kCap: return "cap";
      case PoolKind::kAverage: return "average";
      case PoolKind::kMax: return "max";
      case PoolKind::kStridedConv: return "strided_conv";
    }
    return "cap";
  }

  static PoolKind pooling_from_name(const std::string& s) {
    if (s == "cap") return PoolKind::kCap;
    if (s == "average") return PoolKind::kAverage;
    if (s == "max") return PoolKind::kMax;
    if (s == "strided_conv") return PoolKind::kStridedConv;
    APSFLOW_CHECK(false, FormatError, "config: unknown pooling '" << s << "'");
  }

  static UpKind upsampling_from_name(const std::string& s) {
    if (s == "afu") return UpKind::kAfu;
    if (s == "bilinear") return UpKind::kBilinear;
    APSFLOW_CHECK(false, FormatError, "config: unknown upsampling '" << s << "'");
  }
};

}  // namespace apsflow
