#pragma once

// Middlebury .flo files: float magic 202021.25, int32 width, int32 height,
// then row-major interleaved (u, v) float32 pairs, all little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace apsflow {

static_assert(std::endian::native == std::endian::little,
              "flow I/O assumes a little-endian host");

inline constexpr float kFlowMagic = 202021.25f;

inline void write_flo(const std::string& path, const Tensor<float>& flow) {
  APSFLOW_CHECK(flow.rank() == 3 && flow.dim(2) == 2, ShapeError,
                "write_flo: flow must be (H, W, 2), got " << shape_str(flow.shape()));
  for (int64_t i = 0; i < flow.size(); ++i)
    APSFLOW_CHECK(std::isfinite(flow.data()[i]), ContractError,
                  "write_flo: non-finite value at index " << i);
  std::ofstream out(path, std::ios::binary);
  APSFLOW_CHECK(out.good(), IoError, "write_flo: cannot open '" << path << "'");
  const int32_t w = flow.dim(1), h = flow.dim(0);
  out.write(reinterpret_cast<const char*>(&kFlowMagic), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(flow.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(flow.size())));
  APSFLOW_CHECK(out.good(), IoError, "write_flo: short write to '" << path << "'");
}

inline Tensor<float> read_flo(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  APSFLOW_CHECK(in.good(), IoError, "read_flo: cannot open '" << path << "'");
  float magic = 0;
  int32_t w = 0, h = 0;
  in.read(reinterpret_cast<char*>(&magic), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  APSFLOW_CHECK(in.gcount() == 4, FormatError, "read_flo: truncated header in '" << path << "'");
  APSFLOW_CHECK(magic == kFlowMagic, FormatError,
                "read_flo: bad magic " << magic << " in '" << path << "'");
  APSFLOW_CHECK(w > 0 && h > 0 && static_cast<int64_t>(w) * h < (int64_t(1) << 30),
                FormatError, "read_flo: implausible size " << w << "x" << h);
  std::vector<float> values(static_cast<size_t>(w) * h * 2);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(sizeof(float) * values.size()));
  APSFLOW_CHECK(static_cast<size_t>(in.gcount()) == sizeof(float) * values.size(),
                FormatError, "read_flo: truncated payload in '" << path << "'");
  char extra = 0;
  in.read(&extra, 1);
  APSFLOW_CHECK(in.eof(), FormatError, "read_flo: trailing bytes in '" << path << "'");
  return Tensor<float>(Shape{h, w, 2}, std::move(values));
}

}  // namespace apsflow
