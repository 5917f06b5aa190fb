#pragma once

// Checkpoint files: a run-config text header followed by the model's named
// parameter tensors, each stored as a flat little-endian buffer with a
// (rank, dims, dtype tag) header. Parameter order is the creation order in
// ParamStore, and loading restores exact bytes so inference after a round
// trip is bit-identical.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "config.hpp"
#include "network.hpp"
#include "tensor.hpp"

namespace apsflow {

static_assert(std::endian::native == std::endian::little,
              "checkpoint i/o assumes a little-endian host");

namespace detail {

constexpr char kCheckpointMagic[8] = {'A', 'P', 'S', 'F', 'C', 'K', 'P', '1'};
constexpr uint32_t kDtypeF32 = 1;
constexpr uint32_t kDtypeF64 = 2;

template <typename T>
constexpr uint32_t dtype_tag() {
  if constexpr (std::is_same_v<T, float>) return kDtypeF32;
  else return kDtypeF64;
}

inline void write_bytes(std::ostream& out, const void* p, size_t n,
                        const std::string& path) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  APSFLOW_CHECK(out.good(), IoError, "checkpoint: short write to '" << path << "'");
}

inline void read_bytes(std::istream& in, void* p, size_t n, const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  APSFLOW_CHECK(in.gcount() == static_cast<std::streamsize>(n), FormatError,
                "checkpoint: truncated file '" << path << "'");
}

template <typename V>
void write_pod(std::ostream& out, V v, const std::string& path) {
  write_bytes(out, &v, sizeof(V), path);
}

template <typename V>
V read_pod(std::istream& in, const std::string& path) {
  V v;
  read_bytes(in, &v, sizeof(V), path);
  return v;
}

template <typename T>
void write_tensor_blob(std::ostream& out, const Tensor<T>& t, const std::string& path) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(t.shape().size()), path);
  for (int d : t.shape()) write_pod<int32_t>(out, d, path);
  write_pod<uint32_t>(out, dtype_tag<T>(), path);
  write_bytes(out, t.data(), sizeof(T) * static_cast<size_t>(t.size()), path);
}

template <typename T>
void read_tensor_blob_into(std::istream& in, Tensor<T>& t, const std::string& name,
                           const std::string& path) {
  const auto rank = read_pod<uint32_t>(in, path);
  APSFLOW_CHECK(rank <= 8, FormatError, "checkpoint: implausible rank " << rank);
  Shape dims(rank);
  for (auto& d : dims) d = read_pod<int32_t>(in, path);
  const auto tag = read_pod<uint32_t>(in, path);
  APSFLOW_CHECK(tag == dtype_tag<T>(), ContractError,
                "checkpoint: dtype tag " << tag << " for '" << name
                                         << "' does not match the requested type");
  APSFLOW_CHECK(dims == t.shape(), ContractError,
                "checkpoint: shape mismatch for parameter '" << name << "'");
  read_bytes(in, t.raw_value().data(), sizeof(T) * static_cast<size_t>(t.size()), path);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model,
                     const RunConfig& config) {
  std::ofstream out(path, std::ios::binary);
  APSFLOW_CHECK(out.good(), IoError, "checkpoint: cannot open '" << path << "' for write");
  detail::write_bytes(out, detail::kCheckpointMagic, 8, path);
  const std::string cfg_text = config.to_kv().to_text();
  detail::write_pod<uint64_t>(out, cfg_text.size(), path);
  detail::write_bytes(out, cfg_text.data(), cfg_text.size(), path);
  const auto& items = model.params().items();
  detail::write_pod<uint32_t>(out, static_cast<uint32_t>(items.size()), path);
  for (const auto& [name, tensor] : items) {
    detail::write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()), path);
    detail::write_bytes(out, name.data(), name.size(), path);
    detail::write_tensor_blob(out, tensor, path);
  }
  out.flush();
  APSFLOW_CHECK(out.good(), IoError, "checkpoint: short write to '" << path << "'");
}

template <typename T>
struct LoadedModel {
  RunConfig config;
  Model<T> model;
};

template <typename T>
LoadedModel<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  APSFLOW_CHECK(in.good(), IoError, "checkpoint: cannot open '" << path << "'");
  char magic[8];
  detail::read_bytes(in, magic, 8, path);
  APSFLOW_CHECK(std::memcmp(magic, detail::kCheckpointMagic, 8) == 0, FormatError,
                "checkpoint: bad magic in '" << path << "'");
  const auto cfg_len = detail::read_pod<uint64_t>(in, path);
  APSFLOW_CHECK(cfg_len < (1u << 20), FormatError, "checkpoint: implausible config size");
  std::string cfg_text(static_cast<size_t>(cfg_len), '\0');
  detail::read_bytes(in, cfg_text.data(), cfg_text.size(), path);
  RunConfig config = RunConfig::from_kv(KeyValues::parse(cfg_text));

  LoadedModel<T> loaded{config, Model<T>(config.network, config.train.seed)};
  const auto& items = loaded.model.params().items();
  const auto count = detail::read_pod<uint32_t>(in, path);
  APSFLOW_CHECK(count == items.size(), ContractError,
                "checkpoint: has " << count << " tensors, model expects "
                                   << items.size());
  for (const auto& [name, tensor] : items) {
    const auto name_len = detail::read_pod<uint32_t>(in, path);
    APSFLOW_CHECK(name_len < (1u << 16), FormatError, "checkpoint: implausible name");
    std::string stored(name_len, '\0');
    detail::read_bytes(in, stored.data(), stored.size(), path);
    APSFLOW_CHECK(stored == name, ContractError,
                  "checkpoint: parameter order mismatch, expected '"
                      << name << "' found '" << stored << "'");
    Tensor<T> t = tensor;
    detail::read_tensor_blob_into(in, t, name, path);
  }
  char extra;
  in.read(&extra, 1);
  APSFLOW_CHECK(in.gcount() == 0, FormatError, "checkpoint: trailing bytes in '" << path << "'");
  return loaded;
}

// Guards combined --checkpoint/--config use: the stored network section wins,
// user-supplied values must agree with it.
inline void check_config_compatible(const RunConfig& stored, const RunConfig& given) {
  const auto a = stored.to_kv();
  const auto b = given.to_kv();
  for (const auto& [key, value] : a.entries()) {
    if (key.rfind("network.", 0) != 0) continue;
    APSFLOW_CHECK(b.get(key) == value, ContractError,
                  "checkpoint/config mismatch on '" << key << "': checkpoint has "
                      << value << ", config has " << b.get(key));
  }
}

}  // namespace apsflow
