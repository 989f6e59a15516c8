// SPDX-License-Identifier: Apache-2.0
//
// Supporting-patch geometry: rectangles centered on landmarks, bilinear
// crop-and-resize from feature maps, and the map between patch-local
// fractional positions and image coordinates.
//
// Coordinates are index-space: pixel (row i, column j) sits at (x=j, y=i).
// A feature map with image_to_feature_scale s places feature pixel j at
// image coordinate s*j.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "slpt/tensor.hpp"

namespace slpt {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// Ordered landmark coordinates in input-image pixels.
struct LandmarkSet {
  std::vector<Point> points;

  LandmarkSet() = default;
  explicit LandmarkSet(std::vector<Point> p) : points(std::move(p)) {}

  std::size_t size() const { return points.size(); }
  const Point& operator[](std::size_t i) const { return points[i]; }
  Point& operator[](std::size_t i) { return points[i]; }
  bool operator==(const LandmarkSet&) const = default;

  /// [N, 2] tensor without gradient.
  Tensor to_tensor() const {
    std::vector<double> v;
    v.reserve(points.size() * 2);
    for (const auto& p : points) {
      v.push_back(p.x);
      v.push_back(p.y);
    }
    return Tensor::from({points.size(), 2}, std::move(v));
  }

  static LandmarkSet from_tensor(const Tensor& t) {
    if (t.ndim() != 2 || t.dim(1) != 2) throw DimensionError("landmarks need [N,2], got " + shape_str(t.shape()));
    LandmarkSet s;
    for (std::size_t i = 0; i < t.dim(0); ++i) s.points.push_back({t[2 * i], t[2 * i + 1]});
    return s;
  }
};

/// Axis-aligned patch in feature-map pixels.
struct PatchRect {
  double x = 0.0;  // left-top
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  Point center() const { return {x + w / 2.0, y + h / 2.0}; }
  bool operator==(const PatchRect&) const = default;
};

/// Rectangles of size (w, h) feature pixels centered on each landmark
/// mapped into feature coordinates. Rectangles are never clamped.
inline std::vector<PatchRect> rects_from_landmarks(const LandmarkSet& landmarks, double patch_w,
                                                   double patch_h, double image_to_feature_scale) {
  if (!(image_to_feature_scale > 0.0)) throw InputError("image_to_feature_scale must be positive");
  if (!(patch_w > 0.0) || !(patch_h > 0.0)) throw InputError("patch size must be positive");
  std::vector<PatchRect> rects;
  rects.reserve(landmarks.size());
  for (std::size_t i = 0; i < landmarks.size(); ++i) {
    const Point& p = landmarks[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
      throw InputError("landmark " + std::to_string(i) + " is not finite");
    }
    const double cx = p.x / image_to_feature_scale;
    const double cy = p.y / image_to_feature_scale;
    rects.push_back({cx - patch_w / 2.0, cy - patch_h / 2.0, patch_w, patch_h});
  }
  return rects;
}

namespace detail {

// Tap j of K along an extent starting at `lo` with length `len`
// (align-corners: end taps on the rectangle edges).
inline double tap_position(double lo, double len, std::size_t j, std::size_t k) {
  if (k == 1) return lo + len / 2.0;
  return lo + static_cast<double>(j) * len / static_cast<double>(k - 1);
}

struct BilinearTap {
  std::size_t i00, i01, i10, i11;
  double w00, w01, w10, w11;
};

inline BilinearTap bilinear_tap(double u, double v, std::size_t height, std::size_t width) {
  u = std::clamp(u, 0.0, static_cast<double>(width - 1));
  v = std::clamp(v, 0.0, static_cast<double>(height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(u));
  const auto y0 = static_cast<std::size_t>(std::floor(v));
  const std::size_t x1 = std::min(x0 + 1, width - 1);
  const std::size_t y1 = std::min(y0 + 1, height - 1);
  const double fx = u - static_cast<double>(x0);
  const double fy = v - static_cast<double>(y0);
  return {y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1,
          (1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
}

}  // namespace detail

/// Crops every rectangle from `feature_map` [C, H, W] and resamples it to
/// K x K with bilinear taps; returns [N, C, K, K]. Differentiable with
/// respect to the feature values only; rectangle coordinates are constants.
inline Tensor crop_resize(const Tensor& feature_map, const std::vector<PatchRect>& rects,
                          std::size_t k) {
  if (k < 1) throw InputError("crop_resize: K must be >= 1");
  if (feature_map.ndim() != 3) throw DimensionError("crop_resize: feature map " + shape_str(feature_map.shape()));
  if (feature_map.numel() == 0) throw InputError("crop_resize: empty feature map");
  const std::size_t c = feature_map.dim(0);
  const std::size_t h = feature_map.dim(1);
  const std::size_t w = feature_map.dim(2);
  const std::size_t n = rects.size();
  const std::size_t plane = h * w;

  std::vector<detail::BilinearTap> taps;
  taps.reserve(n * k * k);
  for (const auto& r : rects) {
    for (std::size_t a = 0; a < k; ++a) {
      const double v = detail::tap_position(r.y, r.h, a, k);
      for (std::size_t b = 0; b < k; ++b) {
        taps.push_back(detail::bilinear_tap(detail::tap_position(r.x, r.w, b, k), v, h, w));
      }
    }
  }
  const std::size_t kk = k * k;
  std::vector<double> out(n * c * kk);
  const double* f = feature_map.values().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* fp = f + ch * plane;
      double* op = out.data() + (i * c + ch) * kk;
      for (std::size_t t = 0; t < kk; ++t) {
        const auto& tp = taps[i * kk + t];
        op[t] = tp.w00 * fp[tp.i00] + tp.w01 * fp[tp.i01] + tp.w10 * fp[tp.i10] + tp.w11 * fp[tp.i11];
      }
    }
  return detail::make_op({n, c, k, k}, std::move(out), {feature_map},
                         [n, c, kk, plane, taps = std::move(taps)](detail::Node& self) {
                           double* g = detail::input_grad(self, 0);
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               double* gp = g + ch * plane;
                               const double* og = self.grad.data() + (i * c + ch) * kk;
                               for (std::size_t t = 0; t < kk; ++t) {
                                 const auto& tp = taps[i * kk + t];
                                 gp[tp.i00] += tp.w00 * og[t];
                                 gp[tp.i01] += tp.w01 * og[t];
                                 gp[tp.i10] += tp.w10 * og[t];
                                 gp[tp.i11] += tp.w11 * og[t];
                               }
                             }
                         });
}

/// Single-rectangle form; returns [C, K, K].
inline Tensor crop_resize(const Tensor& feature_map, const PatchRect& rect, std::size_t k) {
  Tensor batched = crop_resize(feature_map, std::vector<PatchRect>{rect}, k);
  return reshape(batched, {feature_map.dim(0), k, k});
}

/// Patch-local fraction (t_x, t_y) to image pixels:
/// x = scale * (x_lt + w * t_x), and likewise for y.
inline Point local_to_global(Point t, const PatchRect& rect, double feature_to_image_scale) {
  return {feature_to_image_scale * (rect.x + rect.w * t.x),
          feature_to_image_scale * (rect.y + rect.h * t.y)};
}

inline Point global_to_local(Point p, const PatchRect& rect, double feature_to_image_scale) {
  return {(p.x / feature_to_image_scale - rect.x) / rect.w,
          (p.y / feature_to_image_scale - rect.y) / rect.h};
}

/// Differentiable form over all landmarks: t [N, 2] -> image coords [N, 2].
inline Tensor local_to_global(const Tensor& t, const std::vector<PatchRect>& rects,
                              double feature_to_image_scale) {
  if (t.ndim() != 2 || t.dim(1) != 2 || t.dim(0) != rects.size()) {
    throw DimensionError("local_to_global: t " + shape_str(t.shape()) + " for " +
                         std::to_string(rects.size()) + " rects");
  }
  std::vector<double> gain, offset;
  for (const auto& r : rects) {
    gain.push_back(feature_to_image_scale * r.w);
    gain.push_back(feature_to_image_scale * r.h);
    offset.push_back(feature_to_image_scale * r.x);
    offset.push_back(feature_to_image_scale * r.y);
  }
  const Shape s{rects.size(), 2};
  return add(mul(t, Tensor::from(s, std::move(gain))), Tensor::from(s, std::move(offset)));
}

}  // namespace slpt
