// SPDX-License-Identifier: Apache-2.0
//
// Shared test helpers: central finite differences, random tensors and a
// tiny cascade configuration.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "slpt/cascade.hpp"
#include "slpt/data.hpp"
#include "slpt/tensor.hpp"

namespace slpt::testutil {

struct GradCheck {
  double worst_rel = 0.0;  // largest |a-n| / max(|a|,|n|) among failing-scale entries
  std::size_t failures = 0;
  std::size_t checked = 0;
  std::string first_failure;
};

/// Compares analytic gradients of `loss` w.r.t. every tensor in `params`
/// with central differences (step h). An entry passes when
/// |a - n| <= max(rel * max(|a|, |n|), abs_floor).
inline GradCheck check_gradients(std::vector<Tensor> params, const std::function<Tensor()>& loss,
                                 double rel = 1e-4, double abs_floor = 1e-7, double h = 1e-5,
                                 const std::vector<std::string>& names = {}) {
  zero_grad(params);
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }
  GradCheck gc;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double orig = data[k];
      data[k] = orig + h;
      const double up = loss().item();
      data[k] = orig - h;
      const double down = loss().item();
      data[k] = orig;
      const double num = (up - down) / (2.0 * h);
      const double a = analytic[i][k];
      const double diff = std::abs(a - num);
      const double scale_v = std::max(std::abs(a), std::abs(num));
      ++gc.checked;
      if (scale_v > abs_floor) gc.worst_rel = std::max(gc.worst_rel, diff / scale_v);
      if (diff > std::max(rel * scale_v, abs_floor)) {
        if (gc.failures++ == 0) {
          gc.first_failure = (i < names.size() ? names[i] : "param " + std::to_string(i)) + "[" +
                             std::to_string(k) + "]: analytic " + std::to_string(a) + " numeric " +
                             std::to_string(num);
        }
      }
    }
  }
  return gc;
}

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scale_v = 1.0) {
  return normal(std::move(shape), 0.0, scale_v, rng, requires_grad);
}

/// N=4, C_I=16, H=2, D=2, K=3, 2 stages on 16x16 input.
inline ModelConfig tiny_model_config(bool multi_level = false) {
  ModelConfig c;
  c.backbone.input_h = c.backbone.input_w = 16;
  c.backbone.stem_channels = {4, 6};
  c.backbone.level_channels = {6, 6, 6};
  c.backbone.multi_level = multi_level;
  c.backbone.embed_dim = 16;
  c.slpt.num_landmarks = 4;
  c.slpt.dim = 16;
  c.slpt.heads = 2;
  c.slpt.layers = 2;
  c.slpt.patch_k = 3;
  c.slpt.mlp_hidden = 24;
  c.slpt.head_hidden = 12;
  c.cascade.stages = 2;
  return c;
}

inline SyntheticSpec tiny_synthetic(std::uint64_t seed = 1) {
  SyntheticSpec s;
  s.num_landmarks = 4;
  s.image_size = 16;
  s.max_translate = 1;
  s.landmark_jitter = 0.25;
  s.blob_sigma = 0.6;
  s.seed = seed;
  return s;
}

/// The zero-initialized output layer of the head blocks every upstream
/// gradient; gradient checks replace it with random weights.
inline void randomize_head_output(Model& m, Rng& rng, double sd = 0.5) {
  std::normal_distribution<double> g(0.0, sd);
  for (double& v : m.slpt.head.mlp.w2.mutable_data()) v = g(rng);
}

/// Checks every learnable parameter of the tiny model against central
/// differences of the cascade loss. Crop centers are pinned to those of
/// the unperturbed run so the loss is a smooth function of the weights.
inline GradCheck cascade_gradient_check(bool multi_level, std::uint64_t seed = 1) {
  const ModelConfig cfg = tiny_model_config(multi_level);
  Model m = Model::init(cfg, seed);
  Rng rng(seed + 100);
  randomize_head_output(m, rng);
  const auto spec = tiny_synthetic(seed);
  const Sample s = generate_synthetic(spec, 0);
  const LandmarkSet init = synthetic_canonical(spec);
  const double d = inter_ocular_distance(s.landmarks, spec.eye_left(), spec.eye_right());
  std::vector<LandmarkSet> pinned;
  {
    NoGradGuard g;
    for (const auto& st : run_cascade(s.image, init, m).stages) pinned.push_back(st.centers);
  }
  std::vector<Tensor> params;
  std::vector<std::string> names;
  for (auto& [n, t] : m.named_parameters()) {
    params.push_back(t);
    names.push_back(n);
  }
  return check_gradients(params, [&] { return cascade_loss(run_cascade(s.image, init, m, &pinned), s.landmarks, d); },
                         1e-4, 1e-7, 1e-5, names);
}

}  // namespace slpt::testutil
