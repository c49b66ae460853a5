#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "attnfd/autodiff.hpp"
#include "attnfd/netpbm.hpp"
#include "attnfd/ops.hpp"
#include "attnfd/rng.hpp"
#include "attnfd/tensor.hpp"

namespace attnfd {

struct Sample {
  Tensor image;     // (3,h,w) in [0,1], quantized to the 8-bit grid
  ByteImage label;  // class ids in [0,K) or 255 = ignore

  int h() const { return label.h; }
  int w() const { return label.w; }
};

struct ShapesSpec {
  int canvas = 64;
  int classes = 4;  // K = background + up to 3 shape classes
  int shapes_min = 1;
  int shapes_max = 3;
  real noise = 0.25;
  uint64_t seed = 1;

  void validate() const {
    if (canvas < 8) throw ConfigError("data.canvas must be >= 8");
    if (classes < 2 || classes > 4)
      throw ConfigError("data.classes must be in [2,4] (background + circle/rectangle/triangle)");
    if (shapes_min < 0 || shapes_max < shapes_min)
      throw ConfigError("data.shapes_min/max must satisfy 0 <= min <= max");
    if (noise < 0) throw ConfigError("data.noise must be >= 0");
  }
};

/// Analytic description of one rendered shape; class id determines the kind
/// (1 = circle, 2 = axis-aligned rectangle, 3 = triangle).
struct ShapeDesc {
  int cls = 0;
  double cx = 0, cy = 0, a = 0, b = 0;
  double jitter = 0;
};

/// Membership test against pixel centers (x+0.5, y+0.5).
inline bool shape_contains(const ShapeDesc& s, int x, int y) {
  const double px = x + 0.5, py = y + 0.5;
  switch (s.cls) {
    case 1: {
      const double dx = px - s.cx, dy = py - s.cy;
      return dx * dx + dy * dy <= s.a * s.a;
    }
    case 2:
      return std::fabs(px - s.cx) <= s.a && std::fabs(py - s.cy) <= s.b;
    case 3: {
      const double x0 = s.cx, y0 = s.cy - s.a;
      const double x1 = s.cx - s.a, y1 = s.cy + s.a;
      const double x2 = s.cx + s.a, y2 = s.cy + s.a;
      auto side = [px, py](double ax, double ay, double bx, double by) {
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
      };
      const double d0 = side(x0, y0, x1, y1);
      const double d1 = side(x1, y1, x2, y2);
      const double d2 = side(x2, y2, x0, y0);
      const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
      const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
      return !(has_neg && has_pos);
    }
    default:
      return false;
  }
}

namespace detail {

struct Rgb {
  real r, g, b;
};

inline Rgb class_color(int cls) {
  switch (cls) {
    case 1: return {real(0.85), real(0.25), real(0.20)};
    case 2: return {real(0.20), real(0.75), real(0.30)};
    case 3: return {real(0.25), real(0.35), real(0.90)};
    default: return {real(0.15), real(0.15), real(0.18)};
  }
}

inline real quantize_8bit(real v) {
  if (v < 0) v = 0;
  if (v > 1) v = 1;
  return real(std::lround(double(v) * 255.0)) / 255;
}

}  // namespace detail

/// Deterministic synthetic sample: per-class colored shapes on a dark
/// background, Gaussian pixel noise on the image, exact (noise-free) labels.
/// Pure function of (spec.seed, index).
inline Sample generate(const ShapesSpec& spec, int index,
                       std::vector<ShapeDesc>* shapes_out = nullptr) {
  spec.validate();
  if (index < 0) throw ContractError("generate: index must be >= 0");
  Rng rng(derive_seed(spec.seed, "gen", uint64_t(index)));
  const int hw = spec.canvas;

  const int count = rng.uniform_int(spec.shapes_min, spec.shapes_max);
  std::vector<ShapeDesc> shapes;
  for (int i = 0; i < count; ++i) {
    ShapeDesc s;
    s.cls = spec.classes == 2 ? 1 : int(rng.uniform_int(1, spec.classes - 1));
    s.cx = rng.uniform(0.15, 0.85) * hw;
    s.cy = rng.uniform(0.15, 0.85) * hw;
    s.a = rng.uniform(0.08, 0.18) * hw;
    s.b = rng.uniform(0.08, 0.18) * hw;
    s.jitter = rng.uniform(-0.1, 0.1);
    shapes.push_back(s);
  }

  Sample out;
  out.image = Tensor({3, hw, hw});
  out.label = ByteImage(hw, hw, 0);
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x) {
      int top = -1;
      for (int i = count - 1; i >= 0; --i)
        if (shape_contains(shapes[std::size_t(i)], x, y)) {
          top = i;
          break;
        }
      detail::Rgb c = detail::class_color(top < 0 ? 0 : shapes[std::size_t(top)].cls);
      real j = top < 0 ? real(0) : real(shapes[std::size_t(top)].jitter);
      out.image[(0 * int64_t(hw) + y) * hw + x] = c.r + j;
      out.image[(1 * int64_t(hw) + y) * hw + x] = c.g + j;
      out.image[(2 * int64_t(hw) + y) * hw + x] = c.b + j;
      out.label.at(y, x) = uint8_t(top < 0 ? 0 : shapes[std::size_t(top)].cls);
    }

  for (int64_t i = 0; i < out.image.size(); ++i)
    out.image[i] = detail::quantize_8bit(out.image[i] + spec.noise * real(rng.normal()));

  if (shapes_out) *shapes_out = std::move(shapes);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation: random scale in [0.5,2], 50% horizontal flip, random crop
// ---------------------------------------------------------------------------

struct AugPolicy {
  bool enabled = true;
  real scale_min = real(0.5);
  real scale_max = real(2.0);
  int crop = 64;

  void validate() const {
    if (!(scale_min > 0) || scale_max < scale_min)
      throw ConfigError("aug.scale range must satisfy 0 < min <= max");
    if (crop < 1) throw ConfigError("aug crop size must be >= 1");
  }
};

struct AugDraw {
  real scale = 1;
  bool flip = false;
  int off_y = 0;  // source offset when scaled >= crop, destination offset otherwise
  int off_x = 0;
};

namespace detail {

inline Tensor resize_image_bilinear(const Tensor& img, int oh, int ow) {
  const int c = img.extent(0), h = img.extent(1), w = img.extent(2);
  Tensor wrapped({1, c, h, w},
                 std::vector<real>(img.data(), img.data() + img.size()));
  Tensor r = bilinear_resize(Var::constant(std::move(wrapped)), oh, ow).value();
  return Tensor({c, oh, ow}, std::vector<real>(r.data(), r.data() + r.size()));
}

inline ByteImage resize_label_nearest(const ByteImage& lab, int oh, int ow) {
  ByteImage out(ow, oh);
  for (int y = 0; y < oh; ++y) {
    int sy = std::min(int((y + 0.5) * lab.h / oh), lab.h - 1);
    for (int x = 0; x < ow; ++x) {
      int sx = std::min(int((x + 0.5) * lab.w / ow), lab.w - 1);
      out.at(y, x) = lab.at(sy, sx);
    }
  }
  return out;
}

}  // namespace detail

/// Applies a fully specified augmentation draw: scale, then flip, then crop
/// or pad to (crop, crop). Pad fill is 0 for the image and 255 for labels.
inline Sample apply_augment(const Sample& s, const AugDraw& d, const AugPolicy& pol) {
  pol.validate();
  const int h = s.h(), w = s.w();
  const int sh = std::max(1, int(std::lround(double(h) * double(d.scale))));
  const int sw = std::max(1, int(std::lround(double(w) * double(d.scale))));

  Tensor img = (sh == h && sw == w) ? s.image : detail::resize_image_bilinear(s.image, sh, sw);
  ByteImage lab = (sh == h && sw == w) ? s.label : detail::resize_label_nearest(s.label, sh, sw);

  if (d.flip) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < sh; ++y)
        for (int x = 0; x < sw / 2; ++x)
          std::swap(img[(int64_t(c) * sh + y) * sw + x],
                    img[(int64_t(c) * sh + y) * sw + (sw - 1 - x)]);
    for (int y = 0; y < sh; ++y)
      for (int x = 0; x < sw / 2; ++x) std::swap(lab.at(y, x), lab.at(y, sw - 1 - x));
  }

  const int cp = pol.crop;
  Sample out;
  out.image = Tensor({3, cp, cp});
  out.label = ByteImage(cp, cp, 255);

  const int copy_h = std::min(sh, cp), copy_w = std::min(sw, cp);
  const int src_y = sh >= cp ? d.off_y : 0, dst_y = sh >= cp ? 0 : d.off_y;
  const int src_x = sw >= cp ? d.off_x : 0, dst_x = sw >= cp ? 0 : d.off_x;
  if (src_y + copy_h > sh || dst_y + copy_h > cp || src_x + copy_w > sw || dst_x + copy_w > cp)
    throw ContractError("apply_augment: crop offset out of range");
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < copy_h; ++y)
      for (int x = 0; x < copy_w; ++x)
        out.image[(int64_t(c) * cp + dst_y + y) * cp + dst_x + x] =
            img[(int64_t(c) * sh + src_y + y) * sw + src_x + x];
  for (int y = 0; y < copy_h; ++y)
    for (int x = 0; x < copy_w; ++x)
      out.label.at(dst_y + y, dst_x + x) = lab.at(src_y + y, src_x + x);
  return out;
}

/// Draws scale / flip / offsets from rng (in that fixed order) and applies.
inline Sample augment(const Sample& s, Rng& rng, const AugPolicy& pol) {
  pol.validate();
  if (!pol.enabled) return s;
  AugDraw d;
  d.scale = real(rng.uniform(double(pol.scale_min), double(pol.scale_max)));
  d.flip = rng.bernoulli(0.5);
  const int sh = std::max(1, int(std::lround(double(s.h()) * double(d.scale))));
  const int sw = std::max(1, int(std::lround(double(s.w()) * double(d.scale))));
  const int ry = std::abs(sh - pol.crop), rx = std::abs(sw - pol.crop);
  d.off_y = ry > 0 ? int(rng.uniform_int(0, ry)) : 0;
  d.off_x = rx > 0 ? int(rng.uniform_int(0, rx)) : 0;
  return apply_augment(s, d, pol);
}

// ---------------------------------------------------------------------------
// On-disk ingestion
// ---------------------------------------------------------------------------

inline Sample load_sample(const std::string& image_path, const std::string& label_path) {
  Sample s;
  s.image = load_ppm(image_path);
  s.label = load_pgm(label_path);
  if (s.image.extent(1) != s.label.h || s.image.extent(2) != s.label.w)
    throw ConsistencyError("sample size mismatch: image " + s.image.shape_str() + " vs label " +
                           std::to_string(s.label.w) + "x" + std::to_string(s.label.h) + " (" +
                           image_path + ")");
  return s;
}

inline void save_sample(const Sample& s, const std::string& image_path,
                        const std::string& label_path) {
  save_ppm(image_path, s.image);
  save_pgm(label_path, s.label);
}

/// Manifest: one "image<TAB>label" pair per line; paths are stored as written
/// and resolved against the manifest's directory on load.
inline void save_manifest(const std::string& path,
                          const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  for (const auto& [img, lab] : pairs) f << img << '\t' << lab << '\n';
  f.flush();
  if (!f) throw IoError("write failed on " + path);
}

inline std::vector<std::pair<std::string, std::string>> load_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open manifest " + path);
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) {
      auto tab = line.find('\t');
      if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
        throw ParseError("manifest line is not image<TAB>label in " + path, offset);
      pairs.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    offset += line.size() + 1;
  }
  return pairs;
}

inline std::vector<Sample> load_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<Sample> out;
  for (const auto& [img, lab] : load_manifest(manifest_path))
    out.push_back(load_sample((base / img).string(), (base / lab).string()));
  return out;
}

}  // namespace attnfd
