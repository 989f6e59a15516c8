// SPDX-License-Identifier: Apache-2.0
//
// Small strided-conv feature extractor. Two stride-2 stem convolutions
// reach stride 4; single-level mode projects that map to C_I channels with
// a 1x1 conv, multi-level mode continues to strides 8/16/32 and reduces
// each of the four levels to C_I/4 channels.
#pragma once

#include <string>
#include <vector>

#include "slpt/geometry.hpp"
#include "slpt/tensor.hpp"

namespace slpt {

struct BackboneConfig {
  std::size_t input_h = 256;
  std::size_t input_w = 256;
  std::size_t in_channels = 3;
  std::vector<std::size_t> stem_channels{16, 32};    // stride 2, stride 4
  std::vector<std::size_t> level_channels{32, 64, 64};  // strides 8, 16, 32 (multi-level)
  bool multi_level = false;
  std::size_t embed_dim = 256;  // C_I

  void validate() const {
    if (input_h == 0 || input_w == 0) throw InputError("backbone input size must be positive");
    if (stem_channels.size() != 2) throw InputError("backbone needs exactly two stem stages");
    if (multi_level && level_channels.size() != 3) throw InputError("multi-level backbone needs three extra stages");
    if (multi_level && embed_dim % 4 != 0) throw InputError("multi-level mode needs C_I divisible by 4");
  }
};

struct ConvParams {
  Tensor weight;  // [O, C, kh, kw]
  Tensor bias;    // [O]
};

struct BackboneParams {
  std::vector<ConvParams> stem;     // 3x3 stride 2
  std::vector<ConvParams> down;     // 3x3 stride 2, multi-level only
  std::vector<ConvParams> reduce;   // 1x1 per output level

  static BackboneParams init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    auto conv = [&rng](std::size_t out, std::size_t in, std::size_t k) {
      return ConvParams{kaiming_uniform({out, in, k, k}, in * k * k, rng), Tensor::zeros({out}, true)};
    };
    BackboneParams p;
    p.stem.push_back(conv(cfg.stem_channels[0], cfg.in_channels, 3));
    p.stem.push_back(conv(cfg.stem_channels[1], cfg.stem_channels[0], 3));
    if (!cfg.multi_level) {
      p.reduce.push_back(conv(cfg.embed_dim, cfg.stem_channels[1], 1));
      return p;
    }
    std::size_t prev = cfg.stem_channels[1];
    for (std::size_t c : cfg.level_channels) {
      p.down.push_back(conv(c, prev, 3));
      prev = c;
    }
    const std::size_t quarter = cfg.embed_dim / 4;
    p.reduce.push_back(conv(quarter, cfg.stem_channels[1], 1));
    for (std::size_t c : cfg.level_channels) p.reduce.push_back(conv(quarter, c, 1));
    return p;
  }

  void collect(std::vector<std::pair<std::string, Tensor>>& out) const {
    auto put = [&out](const std::string& prefix, const std::vector<ConvParams>& convs) {
      for (std::size_t i = 0; i < convs.size(); ++i) {
        out.emplace_back(prefix + std::to_string(i) + ".weight", convs[i].weight);
        out.emplace_back(prefix + std::to_string(i) + ".bias", convs[i].bias);
      }
    };
    put("backbone.stem", stem);
    put("backbone.down", down);
    put("backbone.reduce", reduce);
  }
};

struct FeatureLevel {
  Tensor map;    // [C, H_k, W_k]
  double scale;  // image pixels per feature pixel
};

struct FeaturePyramid {
  std::vector<FeatureLevel> levels;
};

inline FeaturePyramid forward_backbone(const Tensor& image, const BackboneConfig& cfg,
                                       const BackboneParams& params) {
  if (image.shape() != Shape{cfg.in_channels, cfg.input_h, cfg.input_w}) {
    throw InputError("backbone expects image " +
                     shape_str({cfg.in_channels, cfg.input_h, cfg.input_w}) + ", got " +
                     shape_str(image.shape()));
  }
  Tensor x = relu(conv2d(image, params.stem[0].weight, params.stem[0].bias, 2, 1));
  x = relu(conv2d(x, params.stem[1].weight, params.stem[1].bias, 2, 1));
  FeaturePyramid pyr;
  auto reduce = [&](const Tensor& t, std::size_t i) {
    return conv2d(t, params.reduce[i].weight, params.reduce[i].bias, 1, 0);
  };
  pyr.levels.push_back({reduce(x, 0), 4.0});
  if (!cfg.multi_level) return pyr;
  double s = 4.0;
  for (std::size_t i = 0; i < params.down.size(); ++i) {
    x = relu(conv2d(x, params.down[i].weight, params.down[i].bias, 2, 1));
    s *= 2.0;
    pyr.levels.push_back({reduce(x, i + 1), s});
  }
  return pyr;
}

/// Crops one K x K patch per landmark from each of four levels and stacks
/// them on the channel axis. `patch_w`/`patch_h` are in pixels of the
/// finest level; coarser levels use the same image-space extent.
inline Tensor multi_level_patch_features(const FeaturePyramid& pyramid, const LandmarkSet& landmarks,
                                         double patch_w, double patch_h, std::size_t k) {
  if (pyramid.levels.size() != 4) {
    throw ContractError("multi-level crop needs 4 levels, got " + std::to_string(pyramid.levels.size()));
  }
  const double base = pyramid.levels[0].scale;
  std::vector<Tensor> parts;
  for (const auto& level : pyramid.levels) {
    const double f = base / level.scale;
    parts.push_back(crop_resize(level.map, rects_from_landmarks(landmarks, patch_w * f, patch_h * f, level.scale), k));
  }
  return concat(parts, 1);
}

/// Patch features for either backbone mode: [N, C_I, K, K].
inline Tensor pyramid_patch_features(const FeaturePyramid& pyramid, const LandmarkSet& landmarks,
                                     double patch_w, double patch_h, std::size_t k) {
  if (pyramid.levels.size() == 1) {
    const auto& level = pyramid.levels[0];
    return crop_resize(level.map, rects_from_landmarks(landmarks, patch_w, patch_h, level.scale), k);
  }
  return multi_level_patch_features(pyramid, landmarks, patch_w, patch_h, k);
}

}  // namespace slpt
