#pragma once

// Minimal PNG support: writes 8-bit RGB with no filtering, reads 8-bit
// grayscale/RGB/RGBA (filters 0-4, no interlace). zlib does the deflate work.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace apsflow {

namespace detail {

inline void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
         uint32_t(p[3]);
}

inline void append_chunk(std::vector<uint8_t>& out, const char type[4],
                         const uint8_t* data, size_t n) {
  put_be32(out, static_cast<uint32_t>(n));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  if (n) out.insert(out.end(), data, data + n);
  const auto crc = crc32(0, out.data() + start, static_cast<uInt>(4 + n));
  put_be32(out, static_cast<uint32_t>(crc));
}

inline uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
  if (pb <= pc) return static_cast<uint8_t>(b);
  return static_cast<uint8_t>(c);
}

}  // namespace detail

// Quantizes [0,1] floats to 8-bit RGB. Values outside [0,1] are clamped.
inline void write_png(const std::string& path, const Tensor<float>& img) {
  APSFLOW_CHECK(img.rank() == 3 && img.dim(2) == 3, ShapeError,
                "write_png: image must be (H, W, 3), got " << shape_str(img.shape()));
  const int h = img.dim(0), w = img.dim(1);

  std::vector<uint8_t> raw(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * 3));
  size_t at = 0;
  for (int y = 0; y < h; ++y) {
    raw[at++] = 0;  // filter: none
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = img.data()[(static_cast<size_t>(y) * w + x) * 3 + c];
        v = std::min(1.0f, std::max(0.0f, v));
        raw[at++] = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> deflated(bound);
  APSFLOW_CHECK(compress2(deflated.data(), &bound, raw.data(),
                          static_cast<uLong>(raw.size()), 6) == Z_OK,
                IoError, "write_png: deflate failed");
  deflated.resize(bound);

  std::vector<uint8_t> file = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<uint32_t>(w));
  detail::put_be32(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  detail::append_chunk(file, "IHDR", ihdr.data(), ihdr.size());
  detail::append_chunk(file, "IDAT", deflated.data(), deflated.size());
  detail::append_chunk(file, "IEND", nullptr, 0);

  std::ofstream out(path, std::ios::binary);
  APSFLOW_CHECK(out.good(), IoError, "write_png: cannot open '" << path << "'");
  out.write(reinterpret_cast<const char*>(file.data()),
            static_cast<std::streamsize>(file.size()));
  APSFLOW_CHECK(out.good(), IoError, "write_png: short write to '" << path << "'");
}

// Returns an (H, W, 3) float image with values k/255. Grayscale is replicated
// across channels; alpha is dropped.
inline Tensor<float> read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  APSFLOW_CHECK(in.good(), IoError, "read_png: cannot open '" << path << "'");
  std::vector<uint8_t> file((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  APSFLOW_CHECK(file.size() > 8 && std::memcmp(file.data(), sig, 8) == 0, FormatError,
                "read_png: not a PNG file: '" << path << "'");

  int w = 0, h = 0, color_type = -1, channels = 0;
  std::vector<uint8_t> idat;
  size_t at = 8;
  bool done = false;
  while (!done) {
    APSFLOW_CHECK(at + 8 <= file.size(), FormatError, "read_png: truncated chunk header");
    const uint32_t len = detail::get_be32(file.data() + at);
    const char* type = reinterpret_cast<const char*>(file.data() + at + 4);
    APSFLOW_CHECK(at + 12 + len <= file.size(), FormatError, "read_png: truncated chunk");
    const uint8_t* data = file.data() + at + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      APSFLOW_CHECK(len == 13, FormatError, "read_png: bad IHDR");
      w = static_cast<int>(detail::get_be32(data));
      h = static_cast<int>(detail::get_be32(data + 4));
      const int depth = data[8];
      color_type = data[9];
      APSFLOW_CHECK(depth == 8, FormatError, "read_png: only 8-bit depth supported");
      APSFLOW_CHECK(data[12] == 0, FormatError, "read_png: interlaced PNG unsupported");
      channels = color_type == 0 ? 1 : color_type == 2 ? 3 : color_type == 6 ? 4 : 0;
      APSFLOW_CHECK(channels != 0, FormatError,
                    "read_png: unsupported color type " << color_type);
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      done = true;
    }
    at += 12 + len;
  }
  APSFLOW_CHECK(w > 0 && h > 0 && !idat.empty(), FormatError,
                "read_png: missing image data in '" << path << "'");

  const size_t stride = static_cast<size_t>(w) * static_cast<size_t>(channels);
  std::vector<uint8_t> raw(static_cast<size_t>(h) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  APSFLOW_CHECK(uncompress(raw.data(), &raw_len, idat.data(),
                           static_cast<uLong>(idat.size())) == Z_OK &&
                    raw_len == raw.size(),
                FormatError, "read_png: corrupt image data in '" << path << "'");

  // Undo per-scanline filters in place, building the unfiltered byte grid.
  std::vector<uint8_t> pixels(static_cast<size_t>(h) * stride);
  const int bpp = channels;
  for (int y = 0; y < h; ++y) {
    const uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
    const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
    uint8_t* dst = pixels.data() + static_cast<size_t>(y) * stride;
    const uint8_t* up = y > 0 ? dst - stride : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      const int left = i >= static_cast<size_t>(bpp) ? dst[i - bpp] : 0;
      const int above = up ? up[i] : 0;
      const int corner = (up && i >= static_cast<size_t>(bpp)) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += above; break;
        case 3: v += (left + above) / 2; break;
        case 4: v += detail::paeth(left, above, corner); break;
        default:
          APSFLOW_CHECK(false, FormatError, "read_png: unknown filter " << int(filter));
      }
      dst[i] = static_cast<uint8_t>(v & 0xff);
    }
  }

  auto img = Tensor<float>::zeros(Shape{h, w, 3});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const uint8_t* px = pixels.data() + static_cast<size_t>(y) * stride +
                          static_cast<size_t>(x) * channels;
      for (int c = 0; c < 3; ++c) {
        const uint8_t byte = channels == 1 ? px[0] : px[c];
        img.raw_value()[(static_cast<size_t>(y) * w + x) * 3 + c] =
            static_cast<float>(byte) / 255.0f;
      }
    }
  return img;
}

}  // namespace apsflow
