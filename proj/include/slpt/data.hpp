// SPDX-License-Identifier: Apache-2.0
//
// Landmark datasets: the synthetic blob-face generator, annotation loaders
// (68-point .pts, WFLW-style 98-point rows, COFW-style 29-point rows),
// Netpbm image I/O, training augmentation and the mean-face initializer.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slpt/geometry.hpp"
#include "slpt/tensor.hpp"

namespace slpt {

struct Sample {
  Tensor image;  // [3, H, W], values in [0, 1]; undefined when not loaded
  LandmarkSet landmarks;
  std::vector<std::string> tags;
};

/// Landmark count, outer-eye-corner indices and horizontal-flip
/// correspondence of one annotation scheme.
struct DatasetLayout {
  std::size_t num_landmarks = 0;
  std::size_t eye_left = 0;
  std::size_t eye_right = 1;
  std::vector<std::size_t> flip_map;  // involution on landmark indices
};

namespace detail {

inline std::vector<std::size_t> flip_map_from_pairs(std::size_t n,
                                                    const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                                    std::size_t base) {
  std::vector<std::size_t> m(n);
  std::iota(m.begin(), m.end(), std::size_t{0});
  for (auto [a, b] : pairs) {
    m[a - base] = b - base;
    m[b - base] = a - base;
  }
  return m;
}

}  // namespace detail

inline DatasetLayout layout_300w() {
  return {68, 36, 45,
          detail::flip_map_from_pairs(
              68,
              {{1, 17}, {2, 16}, {3, 15}, {4, 14}, {5, 13}, {6, 12}, {7, 11}, {8, 10},
               {18, 27}, {19, 26}, {20, 25}, {21, 24}, {22, 23}, {32, 36}, {33, 35},
               {37, 46}, {38, 45}, {39, 44}, {40, 43}, {41, 48}, {42, 47}, {49, 55},
               {50, 54}, {51, 53}, {62, 64}, {61, 65}, {68, 66}, {59, 57}, {60, 56}},
              1)};
}

inline DatasetLayout layout_wflw() {
  return {98, 60, 72,
          detail::flip_map_from_pairs(
              98,
              {{0, 32},  {1, 31},  {2, 30},  {3, 29},  {4, 28},  {5, 27},  {6, 26},  {7, 25},
               {8, 24},  {9, 23},  {10, 22}, {11, 21}, {12, 20}, {13, 19}, {14, 18}, {15, 17},
               {33, 46}, {34, 45}, {35, 44}, {36, 43}, {37, 42}, {38, 50}, {39, 49}, {40, 48},
               {41, 47}, {60, 72}, {61, 71}, {62, 70}, {63, 69}, {64, 68}, {65, 75}, {66, 74},
               {67, 73}, {55, 59}, {56, 58}, {76, 82}, {77, 81}, {78, 80}, {87, 83}, {86, 84},
               {88, 92}, {89, 91}, {95, 93}, {96, 97}},
              0)};
}

inline DatasetLayout layout_cofw() {
  return {29, 8, 9,
          detail::flip_map_from_pairs(
              29,
              {{1, 2}, {5, 7}, {3, 4}, {6, 8}, {9, 10}, {11, 12}, {13, 15}, {17, 18}, {14, 16},
               {19, 20}, {23, 24}},
              1)};
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Blob faces: N landmarks on an ellipse (indices 0 and N/2 are the outer
/// eye corners at the horizontal extremes), each rendered as a Gaussian
/// blob whose color identifies its mirror pair. A random similarity pose
/// and per-landmark jitter perturb the canonical layout; some blobs are
/// hidden and distractor blobs are added so that isolated patches are
/// ambiguous.
struct SyntheticSpec {
  std::size_t num_landmarks = 10;
  std::size_t image_size = 64;
  double ring_rx = 0.28;          // ellipse radii as fractions of image size
  double ring_ry = 0.32;
  double angular_offset = 0.25;   // radians, amplitude of sin(2θ) offsets
  double max_translate = 4.0;     // px
  double max_scale = 0.06;        // relative
  double max_rotate_deg = 8.0;
  double landmark_jitter = 1.0;   // px, per-landmark normal sigma
  double blob_sigma = 1.5;        // px
  double intensity_jitter = 0.3;  // relative
  double noise = 0.05;
  double hide_prob = 0.1;         // probability a blob is not drawn
  std::size_t distractors = 2;
  std::uint64_t seed = 0;

  std::size_t eye_left() const { return num_landmarks / 2; }
  std::size_t eye_right() const { return 0; }

  DatasetLayout layout() const {
    DatasetLayout l;
    l.num_landmarks = num_landmarks;
    l.eye_left = eye_left();
    l.eye_right = eye_right();
    for (std::size_t k = 0; k < num_landmarks; ++k) {
      l.flip_map.push_back((num_landmarks + num_landmarks / 2 - k) % num_landmarks);
    }
    return l;
  }
};

/// Canonical (zero-pose) landmark positions.
inline LandmarkSet synthetic_canonical(const SyntheticSpec& spec) {
  if (spec.num_landmarks < 2 || spec.num_landmarks % 2 != 0) {
    throw InputError("synthetic layout needs an even landmark count >= 2");
  }
  const double size = static_cast<double>(spec.image_size);
  const double c = (size - 1.0) / 2.0;
  LandmarkSet s;
  for (std::size_t k = 0; k < spec.num_landmarks; ++k) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(spec.num_landmarks);
    const double phi = theta + spec.angular_offset * std::sin(2.0 * theta);
    s.points.push_back({c + spec.ring_rx * size * std::cos(phi), c + spec.ring_ry * size * std::sin(phi)});
  }
  return s;
}

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline void draw_blob(std::vector<double>& img, std::size_t size, Point at, double sigma,
                      const std::array<double, 3>& color) {
  const double r = 4.0 * sigma;
  const long x0 = std::max<long>(0, static_cast<long>(std::floor(at.x - r)));
  const long x1 = std::min<long>(static_cast<long>(size) - 1, static_cast<long>(std::ceil(at.x + r)));
  const long y0 = std::max<long>(0, static_cast<long>(std::floor(at.y - r)));
  const long y1 = std::min<long>(static_cast<long>(size) - 1, static_cast<long>(std::ceil(at.y + r)));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  const std::size_t plane = size * size;
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x) {
      const double dx = static_cast<double>(x) - at.x, dy = static_cast<double>(y) - at.y;
      const double g = std::exp(-(dx * dx + dy * dy) * inv);
      const std::size_t idx = static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x);
      for (std::size_t ch = 0; ch < 3; ++ch) img[ch * plane + idx] += g * color[ch];
    }
}

}  // namespace detail

/// Deterministic in (spec, index).
inline Sample generate_synthetic(const SyntheticSpec& spec, std::uint64_t index) {
  Rng rng(detail::mix64(detail::mix64(spec.seed) ^ index));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t size = spec.image_size;
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  const double tx = spec.max_translate * u(rng), ty = spec.max_translate * u(rng);
  const double sc = 1.0 + spec.max_scale * u(rng);
  const double rot = spec.max_rotate_deg * std::numbers::pi / 180.0 * u(rng);
  const double cr = std::cos(rot), sr = std::sin(rot);

  const LandmarkSet canon = synthetic_canonical(spec);
  const DatasetLayout layout = spec.layout();
  Sample s;
  const double hi = static_cast<double>(size) - 1.0;
  for (const auto& p : canon.points) {
    const double dx = p.x - c, dy = p.y - c;
    double x = c + sc * (cr * dx - sr * dy) + tx + spec.landmark_jitter * gauss(rng);
    double y = c + sc * (sr * dx + cr * dy) + ty + spec.landmark_jitter * gauss(rng);
    s.landmarks.points.push_back({std::clamp(x, 0.0, hi), std::clamp(y, 0.0, hi)});
  }

  std::vector<double> img(3 * size * size);
  for (double& v : img) v = 0.1 + spec.noise * gauss(rng);
  for (std::size_t k = 0; k < spec.num_landmarks; ++k) {
    const bool hidden = u01(rng) < spec.hide_prob;
    const double gain = 1.0 + spec.intensity_jitter * u(rng);
    if (hidden) {
      s.tags.push_back("hidden:" + std::to_string(k));
      continue;
    }
    const double pair = static_cast<double>(std::min(k, layout.flip_map[k]));
    const double a = 2.0 * std::numbers::pi * pair / static_cast<double>(spec.num_landmarks);
    const std::array<double, 3> color{gain * (0.55 + 0.45 * std::cos(a)),
                                      gain * (0.55 + 0.45 * std::cos(a + 2.0)),
                                      gain * (0.55 + 0.45 * std::cos(a + 4.0))};
    detail::draw_blob(img, size, s.landmarks[k], spec.blob_sigma, color);
  }
  for (std::size_t k = 0; k < spec.distractors; ++k) {
    const Point at{(0.5 + 0.5 * u(rng)) * hi, (0.5 + 0.5 * u(rng)) * hi};
    const std::array<double, 3> color{0.3 + 0.6 * u01(rng), 0.3 + 0.6 * u01(rng), 0.3 + 0.6 * u01(rng)};
    detail::draw_blob(img, size, at, spec.blob_sigma, color);
  }
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  s.image = Tensor::from({3, size, size}, std::move(img));
  return s;
}

inline std::vector<Sample> generate_synthetic_set(const SyntheticSpec& spec, std::uint64_t first,
                                                  std::size_t count) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_synthetic(spec, first + i));
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm images

/// Reads P2/P3/P5/P6 into [3, H, W] in [0, 1]; gray images are replicated.
inline Tensor read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open image " + path.string());
  auto token = [&in, &path]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    if (t.empty()) throw ParseError(path.string() + ": truncated Netpbm header");
    return t;
  };
  const std::string magic = token();
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
    throw ParseError(path.string() + ": unsupported Netpbm type " + magic);
  }
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::logic_error&) {
    throw ParseError(path.string() + ": malformed Netpbm header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw ParseError(path.string() + ": bad Netpbm header");
  const bool color = magic == "P3" || magic == "P6";
  const bool binary = magic == "P5" || magic == "P6";
  const std::size_t ch = color ? 3 : 1;
  std::vector<double> raw(w * h * ch);
  if (binary) {
    const std::size_t bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(raw.size() * bytes);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw ParseError(path.string() + ": truncated pixel data");
    for (std::size_t i = 0; i < raw.size(); ++i) {
      raw[i] = bytes == 2 ? static_cast<double>(buf[2 * i] << 8 | buf[2 * i + 1]) : static_cast<double>(buf[i]);
    }
  } else {
    for (double& v : raw) {
      try {
        v = std::stod(token());
      } catch (const std::logic_error&) {
        throw ParseError(path.string() + ": malformed pixel value");
      }
    }
  }
  std::vector<double> out(3 * w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = (y * w + x) * ch + (color ? c : 0);
        out[(c * h + y) * w + x] = raw[src] / static_cast<double>(maxval);
      }
  return Tensor::from({3, h, w}, std::move(out));
}

/// Writes [3, H, W] in [0, 1] as binary P6.
inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw DimensionError("write_ppm needs [3,H,W]");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write image " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image[(c * h + y) * w + x], 0.0, 1.0);
        out.put(static_cast<char>(std::lround(v * 255.0)));
      }
}

/// Bilinear resize of [C, H, W] with align-corners sampling.
inline Tensor resize_image(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(c * out_h * out_w);
  const auto& src = image.values();
  for (std::size_t y = 0; y < out_h; ++y) {
    const double v = out_h == 1 ? (h - 1) / 2.0 : static_cast<double>(y) * static_cast<double>(h - 1) / static_cast<double>(out_h - 1);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double u = out_w == 1 ? (w - 1) / 2.0 : static_cast<double>(x) * static_cast<double>(w - 1) / static_cast<double>(out_w - 1);
      const auto t = detail::bilinear_tap(u, v, h, w);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = src.data() + ch * h * w;
        out[(ch * out_h + y) * out_w + x] = t.w00 * p[t.i00] + t.w01 * p[t.i01] + t.w10 * p[t.i10] + t.w11 * p[t.i11];
      }
    }
  }
  return Tensor::from({c, out_h, out_w}, std::move(out));
}

// ---------------------------------------------------------------------------
// Annotation loaders

enum class AnnotationFormat { kPts68, kWflw98, kCofw29 };

inline AnnotationFormat parse_annotation_format(const std::string& s) {
  if (s == "pts68") return AnnotationFormat::kPts68;
  if (s == "wflw98-csv" || s == "wflw98") return AnnotationFormat::kWflw98;
  if (s == "cofw29") return AnnotationFormat::kCofw29;
  throw InputError("unknown annotation format '" + s + "' (pts68, wflw98-csv, cofw29)");
}

inline DatasetLayout layout_for(AnnotationFormat f) {
  switch (f) {
    case AnnotationFormat::kPts68: return layout_300w();
    case AnnotationFormat::kWflw98: return layout_wflw();
    case AnnotationFormat::kCofw29: return layout_cofw();
  }
  return {};
}

struct LoadOptions {
  bool load_images = true;
  std::size_t input_h = 0;  // 0 keeps the native size
  std::size_t input_w = 0;
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',' || std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline double parse_number(const std::string& tok, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used != tok.size() || !std::isfinite(v)) throw ParseError(where + ": expected a number, got '" + tok + "'");
  return v;
}

inline void attach_image(Sample& s, const std::filesystem::path& image_path, const LoadOptions& opt) {
  if (!opt.load_images) return;
  Tensor img = read_netpbm(image_path);
  if (opt.input_h && opt.input_w && (img.dim(1) != opt.input_h || img.dim(2) != opt.input_w)) {
    const double sx = opt.input_w > 1 && img.dim(2) > 1
                          ? static_cast<double>(opt.input_w - 1) / static_cast<double>(img.dim(2) - 1) : 1.0;
    const double sy = opt.input_h > 1 && img.dim(1) > 1
                          ? static_cast<double>(opt.input_h - 1) / static_cast<double>(img.dim(1) - 1) : 1.0;
    for (auto& p : s.landmarks.points) {
      p.x *= sx;
      p.y *= sy;
    }
    img = resize_image(img, opt.input_h, opt.input_w);
  }
  s.image = std::move(img);
}

inline std::optional<std::filesystem::path> sibling_image(const std::filesystem::path& pts) {
  for (const char* ext : {".ppm", ".pgm", ".pnm"}) {
    auto p = pts;
    p.replace_extension(ext);
    if (std::filesystem::exists(p)) return p;
  }
  return std::nullopt;
}

inline Sample load_pts_file(const std::filesystem::path& path, const LoadOptions& opt) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::optional<std::size_t> declared;
  bool open_brace = false, close_brace = false;
  Sample s;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    auto fields = split_fields(line);
    if (fields.empty()) continue;
    if (fields[0] == "version:") continue;
    if (fields[0] == "n_points:") {
      if (fields.size() != 2) throw ParseError(where + ": malformed n_points header");
      declared = static_cast<std::size_t>(parse_number(fields[1], where));
      continue;
    }
    if (fields[0] == "{") {
      open_brace = true;
      continue;
    }
    if (fields[0] == "}") {
      close_brace = true;
      continue;
    }
    if (close_brace) throw ParseError(where + ": data after closing brace");
    if (fields.size() != 2) throw ParseError(where + ": expected 'x y', got " + std::to_string(fields.size()) + " fields");
    s.landmarks.points.push_back({parse_number(fields[0], where), parse_number(fields[1], where)});
  }
  if (open_brace && !close_brace) throw ParseError(path.string() + ": truncated (missing closing brace)");
  if (declared && s.landmarks.size() < *declared) {
    throw ParseError(path.string() + ": truncated, " + std::to_string(s.landmarks.size()) + " of " +
                     std::to_string(*declared) + " points");
  }
  if (s.landmarks.size() != 68) {
    throw FormatError(path.string() + ": expected 68 landmarks, found " + std::to_string(s.landmarks.size()));
  }
  if (opt.load_images) {
    auto img = sibling_image(path);
    if (!img) throw InputError(path.string() + ": no .ppm/.pgm image next to annotation");
    attach_image(s, *img, opt);
  }
  return s;
}

inline std::vector<Sample> load_rows(const std::filesystem::path& path, std::size_t n_points,
                                     std::size_t n_flags, const std::vector<std::string>& flag_names,
                                     bool allow_bbox, const LoadOptions& opt) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  const std::size_t base = 2 * n_points + n_flags + 1;
  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    auto fields = split_fields(line);
    if (fields.empty() || fields[0][0] == '#') continue;
    const bool has_bbox = allow_bbox && fields.size() == base + 4;
    if (fields.size() != base && !has_bbox) {
      throw ParseError(where + ": expected " + std::to_string(base) + " fields, got " + std::to_string(fields.size()));
    }
    Sample s;
    for (std::size_t k = 0; k < n_points; ++k) {
      s.landmarks.points.push_back({parse_number(fields[2 * k], where), parse_number(fields[2 * k + 1], where)});
    }
    const std::size_t flags_at = 2 * n_points + (has_bbox ? 4 : 0);
    for (std::size_t f = 0; f < n_flags; ++f) {
      if (parse_number(fields[flags_at + f], where) != 0.0) s.tags.push_back(flag_names[f]);
    }
    detail::attach_image(s, path.parent_path() / fields.back(), opt);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

/// Loads every sample described at `path`:
///  - pts68: a .pts file, or a directory of them, each with a sibling
///    .ppm/.pgm image;
///  - wflw98-csv: one row per face, 196 coordinates (x0 y0 x1 y1 ...),
///    optionally 4 box values, 6 attribute flags and an image path;
///  - cofw29: one row per face, 58 coordinates, 29 occlusion flags and an
///    image path.
/// Fields are separated by commas or whitespace; image paths are relative
/// to the annotation file.
inline std::vector<Sample> load_annotations(const std::filesystem::path& path, AnnotationFormat format,
                                            const LoadOptions& opt = {}) {
  switch (format) {
    case AnnotationFormat::kPts68: {
      if (!std::filesystem::is_directory(path)) return {detail::load_pts_file(path, opt)};
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::directory_iterator(path)) {
        if (e.path().extension() == ".pts") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      std::vector<Sample> out;
      for (const auto& f : files) out.push_back(detail::load_pts_file(f, opt));
      return out;
    }
    case AnnotationFormat::kWflw98:
      return detail::load_rows(path, 98, 6,
                               {"pose", "expression", "illumination", "make-up", "occlusion", "blur"},
                               true, opt);
    case AnnotationFormat::kCofw29: {
      std::vector<std::string> names;
      for (int k = 0; k < 29; ++k) names.push_back("occluded:" + std::to_string(k));
      return detail::load_rows(path, 29, 29, names, false, opt);
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double flip_prob = 0.5;
  double gray_prob = 0.2;
  double occlusion_prob = 0.33;
  double scale_range = 0.05;     // ±
  double rotation_deg = 30.0;    // ±
  double translation_px = 10.0;  // ±
  std::vector<std::size_t> flip_map;
  std::size_t eye_left = 0;
  std::size_t eye_right = 1;

  static AugmentConfig none() {
    AugmentConfig c;
    c.flip_prob = c.gray_prob = c.occlusion_prob = 0.0;
    c.scale_range = c.rotation_deg = c.translation_px = 0.0;
    return c;
  }

  void validate() const {
    for (double p : {flip_prob, gray_prob, occlusion_prob}) {
      if (!(p >= 0.0 && p <= 1.0)) throw InputError("augmentation probabilities must lie in [0,1]");
    }
    if (flip_prob > 0.0) {
      for (std::size_t i = 0; i < flip_map.size(); ++i) {
        if (flip_map[i] >= flip_map.size() || flip_map[flip_map[i]] != i) {
          throw InputError("flip map is not an involution at index " + std::to_string(i));
        }
      }
    }
  }
};

/// Similarity transform about the image center followed by a translation.
struct SimilarityTransform {
  double scale = 1.0;
  double rotation_rad = 0.0;
  double tx = 0.0;
  double ty = 0.0;
};

/// Warps image and landmarks by `t`; out-of-frame samples replicate the
/// border.
inline Sample apply_similarity(const Sample& s, const SimilarityTransform& t) {
  const std::size_t ch = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cr = std::cos(t.rotation_rad), sr = std::sin(t.rotation_rad);
  Sample out;
  out.tags = s.tags;
  for (const auto& p : s.landmarks.points) {
    const double dx = p.x - cx, dy = p.y - cy;
    out.landmarks.points.push_back({cx + t.scale * (cr * dx - sr * dy) + t.tx, cy + t.scale * (sr * dx + cr * dy) + t.ty});
  }
  std::vector<double> img(s.image.numel());
  const auto& src = s.image.values();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      // inverse map: source = R^-1 (dest - c - t) / s + c
      const double dx = static_cast<double>(x) - cx - t.tx, dy = static_cast<double>(y) - cy - t.ty;
      const double u = cx + (cr * dx + sr * dy) / t.scale;
      const double v = cy + (-sr * dx + cr * dy) / t.scale;
      const auto tap = detail::bilinear_tap(u, v, h, w);
      for (std::size_t c = 0; c < ch; ++c) {
        const double* p = src.data() + c * h * w;
        img[(c * h + y) * w + x] = tap.w00 * p[tap.i00] + tap.w01 * p[tap.i01] + tap.w10 * p[tap.i10] + tap.w11 * p[tap.i11];
      }
    }
  out.image = Tensor::from(s.image.shape(), std::move(img));
  return out;
}

/// Mirrors the image left-right; landmark k takes the mirrored position
/// of landmark flip_map[k].
inline Sample flip_horizontal(const Sample& s, const std::vector<std::size_t>& flip_map) {
  if (flip_map.size() != s.landmarks.size()) {
    throw InputError("flip map has " + std::to_string(flip_map.size()) + " entries for " +
                     std::to_string(s.landmarks.size()) + " landmarks");
  }
  const std::size_t ch = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  const double right = static_cast<double>(w) - 1.0;
  Sample out;
  out.tags = s.tags;
  for (std::size_t k = 0; k < flip_map.size(); ++k) {
    const Point& p = s.landmarks[flip_map[k]];
    out.landmarks.points.push_back({right - p.x, p.y});
  }
  std::vector<double> img(s.image.numel());
  const auto& src = s.image.values();
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) img[(c * h + y) * w + x] = src[(c * h + y) * w + (w - 1 - x)];
  out.image = Tensor::from(s.image.shape(), std::move(img));
  return out;
}

inline Tensor to_gray(const Tensor& image) {
  const std::size_t plane = image.dim(1) * image.dim(2);
  std::vector<double> img(image.numel());
  const auto& v = image.values();
  for (std::size_t i = 0; i < plane; ++i) {
    const double g = 0.299 * v[i] + 0.587 * v[plane + i] + 0.114 * v[2 * plane + i];
    img[i] = img[plane + i] = img[2 * plane + i] = g;
  }
  return Tensor::from(image.shape(), std::move(img));
}

/// Blanks an axis-aligned pixel rectangle [x0, x1) x [y0, y1) to black.
inline Tensor occlude(const Tensor& image, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1) {
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> img(image.values());
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = y0; y < std::min(y1, h); ++y)
      for (std::size_t x = x0; x < std::min(x1, w); ++x) img[(c * h + y) * w + x] = 0.0;
  return Tensor::from(image.shape(), std::move(img));
}

/// Random flip, similarity warp, gray conversion and occlusion. Geometric
/// draws that push an outer eye corner out of frame are redrawn up to 10
/// times, after which the sample is returned unchanged. Occlusion never
/// alters landmarks.
inline Sample augment(const Sample& sample, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double w = static_cast<double>(sample.image.dim(2));
  const double h = static_cast<double>(sample.image.dim(1));
  auto inside = [&](const Point& p) { return p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0; };

  for (int attempt = 0; attempt < 10; ++attempt) {
    const bool flip = u01(rng) < cfg.flip_prob;
    SimilarityTransform t{1.0 + cfg.scale_range * u(rng), cfg.rotation_deg * std::numbers::pi / 180.0 * u(rng),
                          cfg.translation_px * u(rng), cfg.translation_px * u(rng)};
    const bool gray = u01(rng) < cfg.gray_prob;
    const bool occ = u01(rng) < cfg.occlusion_prob;
    const double ow = (0.1 + 0.3 * u01(rng)) * w, oh = (0.1 + 0.3 * u01(rng)) * h;
    const double ox = u01(rng) * (w - ow), oy = u01(rng) * (h - oh);

    const bool identity_warp = t.scale == 1.0 && t.rotation_rad == 0.0 && t.tx == 0.0 && t.ty == 0.0;
    Sample out = identity_warp ? sample : apply_similarity(sample, t);
    if (flip) out = flip_horizontal(out, cfg.flip_map);
    if (!inside(out.landmarks[cfg.eye_left]) || !inside(out.landmarks[cfg.eye_right])) continue;
    if (gray) out.image = to_gray(out.image);
    if (occ) {
      out.image = occlude(out.image, static_cast<std::size_t>(ox), static_cast<std::size_t>(oy),
                          static_cast<std::size_t>(ox + ow), static_cast<std::size_t>(oy + oh));
    }
    return out;
  }
  return sample;
}

/// Per-landmark mean of the annotations (input-image pixels).
inline LandmarkSet mean_face(const std::vector<Sample>& dataset) {
  if (dataset.empty()) throw InputError("mean_face of an empty dataset");
  const std::size_t n = dataset[0].landmarks.size();
  std::vector<double> sx(n, 0.0), sy(n, 0.0);
  for (const auto& s : dataset) {
    if (s.landmarks.size() != n) throw InputError("mean_face: inconsistent landmark counts");
    for (std::size_t k = 0; k < n; ++k) {
      sx[k] += s.landmarks[k].x;
      sy[k] += s.landmarks[k].y;
    }
  }
  LandmarkSet m;
  const double cnt = static_cast<double>(dataset.size());
  for (std::size_t k = 0; k < n; ++k) m.points.push_back({sx[k] / cnt, sy[k] / cnt});
  return m;
}

}  // namespace slpt
