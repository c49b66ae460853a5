#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "attnfd/tensor.hpp"

namespace attnfd {

/// Single-channel 8-bit raster; the on-disk form of PGM labels and heatmaps.
struct ByteImage {
  int w = 0, h = 0;
  std::vector<uint8_t> v;  // row-major

  ByteImage() = default;
  ByteImage(int w_, int h_, uint8_t fill = 0)
      : w(w_), h(h_), v(std::size_t(w_) * std::size_t(h_), fill) {}
  uint8_t& at(int y, int x) { return v[std::size_t(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[std::size_t(y) * w + x]; }
  bool operator==(const ByteImage& o) const { return w == o.w && h == o.h && v == o.v; }
};

namespace detail {

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("read failed on " + path);
  return ss.str();
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(bytes.data(), std::streamsize(bytes.size()));
  f.flush();
  if (!f) throw IoError("write failed on " + path);
}

/// Header scanner for P5/P6: skips whitespace and '#' comments, parses
/// decimal fields, and remembers byte offsets for error reporting.
struct PnmCursor {
  const std::string& bytes;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < bytes.size()) {
      char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  int read_int(const char* what) {
    skip_space_and_comments();
    std::size_t start = pos;
    long val = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      val = val * 10 + (bytes[pos] - '0');
      if (val > 1 << 30) throw ParseError(std::string("oversized ") + what, start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("expected ") + what, pos);
    return int(val);
  }
};

inline std::size_t parse_pnm_header(const std::string& bytes, char digit, int& w, int& h) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != digit)
    throw ParseError(std::string("bad magic, expected P") + digit, 0);
  PnmCursor cur{bytes, 2};
  w = cur.read_int("width");
  h = cur.read_int("height");
  int maxval = cur.read_int("maxval");
  if (w < 1 || h < 1) throw ParseError("nonpositive image size", 2);
  if (maxval != 255) throw ParseError("unsupported maxval (must be 255)", cur.pos);
  if (cur.pos >= bytes.size() || !(bytes[cur.pos] == ' ' || bytes[cur.pos] == '\t' ||
                                   bytes[cur.pos] == '\r' || bytes[cur.pos] == '\n'))
    throw ParseError("missing whitespace before pixel data", cur.pos);
  return cur.pos + 1;
}

}  // namespace detail

/// Binary PPM (P6, maxval 255) to a (3,h,w) tensor scaled to [0,1].
inline Tensor load_ppm(const std::string& path) {
  std::string bytes = detail::read_file_bytes(path);
  int w = 0, h = 0;
  std::size_t data = detail::parse_pnm_header(bytes, '6', w, h);
  std::size_t need = std::size_t(w) * h * 3;
  if (bytes.size() - data < need)
    throw ParseError("truncated P6 pixel data in " + path, bytes.size());
  Tensor img({3, h, w});
  const auto* px = reinterpret_cast<const uint8_t*>(bytes.data() + data);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[(int64_t(c) * h + y) * w + x] = real(px[(std::size_t(y) * w + x) * 3 + c]) / 255;
  return img;
}

inline void save_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.extent(0) != 3)
    throw DimensionError("save_ppm: expected (3,h,w), got " + img.shape_str());
  const int h = img.extent(1), w = img.extent(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + std::size_t(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        real v = img[(int64_t(c) * h + y) * w + x];
        long q = std::lround(double(v) * 255.0);
        out.push_back(char(uint8_t(q < 0 ? 0 : (q > 255 ? 255 : q))));
      }
  detail::write_file_bytes(path, out);
}

/// Binary PGM (P5, maxval 255); bytes pass through unscaled (class ids or
/// heatmap intensities).
inline ByteImage load_pgm(const std::string& path) {
  std::string bytes = detail::read_file_bytes(path);
  int w = 0, h = 0;
  std::size_t data = detail::parse_pnm_header(bytes, '5', w, h);
  std::size_t need = std::size_t(w) * h;
  if (bytes.size() - data < need)
    throw ParseError("truncated P5 pixel data in " + path, bytes.size());
  ByteImage img(w, h);
  const auto* px = reinterpret_cast<const uint8_t*>(bytes.data() + data);
  img.v.assign(px, px + need);
  return img;
}

inline void save_pgm(const std::string& path, const ByteImage& img) {
  if (img.w < 1 || img.h < 1 || img.v.size() != std::size_t(img.w) * img.h)
    throw DimensionError("save_pgm: inconsistent byte image");
  std::string out = "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.v.data()), img.v.size());
  detail::write_file_bytes(path, out);
}

}  // namespace attnfd
