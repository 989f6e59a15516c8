// SPDX-License-Identifier: Apache-2.0
//
// Coarse-to-fine cascade: the backbone runs once, then the same SLPT runs
// once per stage on patches re-centered on the previous stage's estimate,
// halving the patch size each stage.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "slpt/backbone.hpp"
#include "slpt/geometry.hpp"
#include "slpt/model.hpp"
#include "slpt/tensor.hpp"

namespace slpt {

struct CascadeConfig {
  std::size_t stages = 3;
  double initial_patch_fraction = 0.25;  // of the finest feature map extent
  std::size_t min_patch = 2;             // feature pixels

  void validate() const {
    if (stages < 1) throw InputError("need at least one cascade stage");
    if (!(initial_patch_fraction > 0.0)) throw InputError("initial patch fraction must be positive");
    if (min_patch < 1) throw InputError("minimum patch size must be >= 1");
  }
};

struct ModelConfig {
  BackboneConfig backbone;
  SlptConfig slpt;
  CascadeConfig cascade;

  void validate() const {
    backbone.validate();
    slpt.validate();
    cascade.validate();
    if (backbone.embed_dim != slpt.dim) {
      throw InputError("backbone C_I=" + std::to_string(backbone.embed_dim) +
                       " differs from SLPT C_I=" + std::to_string(slpt.dim));
    }
  }
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Backbone + SLPT weights plus the mean-face initialization. One SLPT
/// serves every stage.
struct Model {
  ModelConfig config;
  BackboneParams backbone;
  SlptParams slpt;
  LandmarkSet mean_face;

  /// The backbone and the SLPT draw from separate streams of the seed, so
  /// settings that only alter the SLPT share the backbone initialization.
  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    Rng backbone_rng(seed);
    Rng slpt_rng(seed ^ 0x9E3779B97F4A7C15ULL);
    m.backbone = BackboneParams::init(cfg.backbone, backbone_rng);
    m.slpt = SlptParams::init(cfg.slpt, slpt_rng);
    return m;
  }

  NamedTensors named_parameters() const {
    NamedTensors out;
    backbone.collect(out);
    slpt.collect(out);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }
};

struct PatchSize {
  double w;
  double h;
};

/// Per-stage patch size in finest-level feature pixels: the initial size
/// is a fraction of the feature extent, each later stage halves the
/// previous one (rounding down), never below `min_patch`.
inline std::vector<PatchSize> patch_schedule(std::size_t feature_w, std::size_t feature_h,
                                             const CascadeConfig& cfg) {
  const auto floor_min = [&cfg](double v) {
    return std::max(static_cast<double>(cfg.min_patch), std::floor(v));
  };
  std::vector<PatchSize> out;
  PatchSize s{floor_min(static_cast<double>(feature_w) * cfg.initial_patch_fraction),
              floor_min(static_cast<double>(feature_h) * cfg.initial_patch_fraction)};
  for (std::size_t i = 0; i < cfg.stages; ++i) {
    out.push_back(s);
    s = {floor_min(s.w / 2.0), floor_min(s.h / 2.0)};
  }
  return out;
}

struct StageRecord {
  LandmarkSet centers;                   // patch centers (previous estimate)
  std::vector<PatchRect> rects;          // finest-level feature pixels
  double feature_scale = 4.0;            // image pixels per finest feature pixel
  PatchSize patch{0.0, 0.0};             // finest-level feature pixels
  std::vector<Tensor> layer_landmarks;   // per layer [N, 2], image pixels
  AttentionRecord attention;
  LandmarkSet prediction;                // last layer, values only

  PatchSize patch_in_image() const { return {patch.w * feature_scale, patch.h * feature_scale}; }
};

struct StageTrace {
  std::vector<StageRecord> stages;

  const LandmarkSet& final_prediction() const { return stages.back().prediction; }
};

/// Runs the full cascade on one image [3, H, W]. Stage 1 is centered on
/// `init`; stage s on stage s-1's last-layer prediction, taken as a
/// constant. `pinned_centers`, when given, replaces those centers (one set
/// per stage) so that the crop positions are fixed across evaluations.
inline StageTrace run_cascade(const Tensor& image, const LandmarkSet& init, const Model& model,
                              const std::vector<LandmarkSet>* pinned_centers = nullptr) {
  const auto& cfg = model.config;
  if (init.size() != cfg.slpt.num_landmarks) {
    throw ContractError("run_cascade: initial shape has " + std::to_string(init.size()) +
                        " landmarks, model expects " + std::to_string(cfg.slpt.num_landmarks));
  }
  if (pinned_centers && pinned_centers->size() != cfg.cascade.stages) {
    throw ContractError("run_cascade: pinned centers for " + std::to_string(pinned_centers->size()) +
                        " stages, model has " + std::to_string(cfg.cascade.stages));
  }
  FeaturePyramid pyr = forward_backbone(image, cfg.backbone, model.backbone);
  const auto& fine = pyr.levels[0];
  const auto schedule = patch_schedule(fine.map.dim(2), fine.map.dim(1), cfg.cascade);

  StageTrace trace;
  LandmarkSet current = init;
  for (std::size_t s = 0; s < cfg.cascade.stages; ++s) {
    StageRecord rec;
    rec.centers = pinned_centers ? (*pinned_centers)[s] : current;
    rec.patch = schedule[s];
    rec.feature_scale = fine.scale;
    rec.rects = rects_from_landmarks(rec.centers, rec.patch.w, rec.patch.h, fine.scale);
    Tensor patches = pyramid_patch_features(pyr, rec.centers, rec.patch.w, rec.patch.h, cfg.slpt.patch_k);
    SlptOutput out = slpt_forward(patches, model.slpt, cfg.slpt);
    for (const auto& t : out.local) rec.layer_landmarks.push_back(local_to_global(t, rec.rects, fine.scale));
    rec.attention = std::move(out.attention);
    rec.prediction = LandmarkSet::from_tensor(rec.layer_landmarks.back());
    for (const auto& q : rec.prediction.points) {
      if (!std::isfinite(q.x) || !std::isfinite(q.y)) {
        throw NumericError("stage " + std::to_string(s + 1) + " predicted non-finite landmarks");
      }
    }
    current = rec.prediction;
    trace.stages.push_back(std::move(rec));
  }
  return trace;
}

/// Mean over stages, layers and landmarks of the Euclidean error divided
/// by d.
inline Tensor cascade_loss(const StageTrace& trace, const LandmarkSet& gt, double d) {
  if (!(d > 0.0)) throw InputError("normalization distance must be positive, got " + std::to_string(d));
  if (trace.stages.empty()) throw ContractError("cascade_loss: empty trace");
  const Tensor target = gt.to_tensor();
  Tensor total;
  std::size_t terms = 0;
  for (const auto& stage : trace.stages) {
    for (const auto& pred : stage.layer_landmarks) {
      Tensor err = sum(row_norm(sub(pred, target)));
      total = total.defined() ? add(total, err) : err;
      terms += pred.dim(0);
    }
  }
  return scale(total, 1.0 / (static_cast<double>(terms) * d));
}

/// Distance between two landmarks (the outer eye corners for NME).
inline double inter_ocular_distance(const LandmarkSet& gt, std::size_t left, std::size_t right) {
  if (left >= gt.size() || right >= gt.size() || left == right) {
    throw InputError("inter-ocular indices " + std::to_string(left) + "," + std::to_string(right) +
                     " invalid for " + std::to_string(gt.size()) + " landmarks");
  }
  return std::hypot(gt[left].x - gt[right].x, gt[left].y - gt[right].y);
}

}  // namespace slpt
