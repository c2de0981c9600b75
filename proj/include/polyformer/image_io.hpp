#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "polyformer/common.hpp"
#include "polyformer/tensor.hpp"

namespace polyformer {

// Integer class mask, row-major H*W.
struct Mask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> v;

  bool operator==(const Mask&) const = default;
};

namespace detail {

class PnmParser {
 public:
  explicit PnmParser(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw FormatError(path + ": cannot open file");
  }

  void expect_magic(const char* magic) {
    const int c0 = get(), c1 = get();
    if (c0 != magic[0] || c1 != magic[1]) {
      throw FormatError(path_ + ": bad magic at byte 0 (expected " + magic + ")");
    }
  }

  // Next whitespace-separated unsigned integer; '#' starts a comment.
  std::size_t next_uint() {
    int c = get();
    while (true) {
      if (c == '#') {
        while (c != '\n' && c != EOF) c = get();
      } else if (c != EOF && std::isspace(c)) {
        c = get();
      } else {
        break;
      }
    }
    if (c == EOF || !std::isdigit(c)) {
      throw FormatError(path_ + ": expected integer in header at byte " +
                        std::to_string(offset_ - 1));
    }
    std::size_t value = 0;
    while (c != EOF && std::isdigit(c)) {
      value = value * 10 + static_cast<std::size_t>(c - '0');
      c = get();
    }
    // c is the single whitespace byte terminating the field
    if (c == EOF) throw FormatError(path_ + ": truncated header at byte " + std::to_string(offset_));
    return value;
  }

  void read_raster(std::uint8_t* dst, std::size_t n) {
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(path_ + ": truncated raster at byte " +
                        std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())) +
                        " (expected " + std::to_string(n) + " bytes)");
    }
  }

 private:
  int get() {
    const int c = in_.get();
    if (c != EOF) ++offset_;
    return c;
  }

  std::string path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

inline std::uint8_t quantize(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace detail

// Binary PPM (P6, maxval 255) from a [3,H,W] tensor with values in [0,1].
inline void save_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("save_ppm: expected [3xHxW] image, got " + shape_str(image.shape()));
  }
  const std::size_t H = image.dim(1), W = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "P6\n" << W << " " << H << "\n255\n";
  std::vector<std::uint8_t> row(W * 3);
  const float* d = image.data().data();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        row[x * 3 + c] = detail::quantize(d[(c * H + y) * W + x]);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw FormatError(path + ": write failed");
}

inline Tensor load_ppm(const std::string& path) {
  detail::PnmParser p(path);
  p.expect_magic("P6");
  const std::size_t W = p.next_uint(), H = p.next_uint(), maxval = p.next_uint();
  if (maxval != 255) throw FormatError(path + ": unsupported maxval " + std::to_string(maxval));
  std::vector<std::uint8_t> raw(W * H * 3);
  p.read_raster(raw.data(), raw.size());
  std::vector<float> v(3 * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        v[(c * H + y) * W + x] = static_cast<float>(raw[(y * W + x) * 3 + c]) / 255.0f;
  return Tensor::from_data({3, H, W}, std::move(v));
}

// Binary PGM (P5, maxval 255) storing class indices.
inline void save_pgm(const std::string& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(mask.v.data()),
            static_cast<std::streamsize>(mask.v.size()));
  if (!out) throw FormatError(path + ": write failed");
}

inline Mask load_pgm(const std::string& path) {
  detail::PnmParser p(path);
  p.expect_magic("P5");
  Mask m;
  m.w = p.next_uint();
  m.h = p.next_uint();
  const std::size_t maxval = p.next_uint();
  if (maxval != 255) throw FormatError(path + ": unsupported maxval " + std::to_string(maxval));
  m.v.resize(m.w * m.h);
  p.read_raster(m.v.data(), m.v.size());
  return m;
}

}  // namespace polyformer
