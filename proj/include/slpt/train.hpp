// SPDX-License-Identifier: Apache-2.0
//
// Training loop (mini-batch Adam with step decay) and evaluation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "slpt/cascade.hpp"
#include "slpt/config.hpp"
#include "slpt/data.hpp"
#include "slpt/metrics.hpp"
#include "slpt/tensor.hpp"

namespace slpt {

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  AdamOptions adam{};
  std::vector<std::size_t> milestones;  // lr *= decay once epoch >= milestone
  double decay = 0.1;
  std::uint64_t seed = 1;
  std::size_t eye_left = 0;
  std::size_t eye_right = 1;
  std::optional<AugmentConfig> augment;

  void validate() const {
    if (batch_size == 0) throw InputError("batch size must be positive");
    if (!(adam.lr >= 0.0)) throw InputError("learning rate must be non-negative");
    if (augment) augment->validate();
  }

  /// Learning rate for 0-based `epoch`.
  double lr_at(std::size_t epoch) const {
    double lr = adam.lr;
    for (std::size_t m : milestones) {
      if (epoch >= m) lr *= decay;
    }
    return lr;
  }
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;             // mean per-sample loss
  std::vector<double> stage_nme; // mean per-stage NME (%) on the epoch's samples

  /// One machine-parseable line with a fixed field order.
  std::string log_line() const {
    std::string s = "epoch=" + std::to_string(epoch) + " lr=" + format_double(lr) + " loss=" + format_double(loss);
    for (std::size_t i = 0; i < stage_nme.size(); ++i) {
      s += " nme_s" + std::to_string(i + 1) + "=" + format_double(stage_nme[i]);
    }
    return s;
  }
};

/// Samples visited in `epoch` (0-based), a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(detail::mix64(seed ^ detail::mix64(epoch + 1)));
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

/// One pass over `dataset`: per batch, zero grads, run the cascade and the
/// deep-supervised loss per sample, backpropagate the batch mean and take
/// an Adam step. `epoch` is 0-based.
inline EpochStats train_epoch(const std::vector<Sample>& dataset, Model& model, AdamState& state,
                              const TrainOptions& opt, std::size_t epoch) {
  opt.validate();
  if (dataset.empty()) throw InputError("training set is empty");
  if (model.mean_face.size() != model.config.slpt.num_landmarks) {
    throw ContractError("model has no mean face for " + std::to_string(model.config.slpt.num_landmarks) + " landmarks");
  }
  auto params = model.parameters();
  if (state.m.empty()) state = AdamState::for_params(params);
  AdamOptions adam = opt.adam;
  adam.lr = opt.lr_at(epoch);

  const auto order = epoch_order(dataset.size(), opt.seed, epoch);
  const std::size_t stages = model.config.cascade.stages;
  EpochStats st;
  st.epoch = epoch + 1;
  st.lr = adam.lr;
  st.stage_nme.assign(stages, 0.0);
  // per-sample values, summed in dataset order
  std::vector<double> sample_loss(dataset.size(), 0.0);
  std::vector<std::vector<double>> sample_nme(stages, std::vector<double>(dataset.size(), 0.0));

  for (std::size_t start = 0, batch = 0; start < order.size(); start += opt.batch_size, ++batch) {
    const std::size_t end = std::min(order.size(), start + opt.batch_size);
    const double inv_b = 1.0 / static_cast<double>(end - start);
    zero_grad(params);
    for (std::size_t i = start; i < end; ++i) {
      const std::size_t idx = order[i];
      Sample s = dataset[idx];
      if (opt.augment) {
        Rng rng(detail::mix64(opt.seed ^ detail::mix64((epoch << 32) ^ idx)));
        s = augment(s, *opt.augment, rng);
      }
      const double d = inter_ocular_distance(s.landmarks, opt.eye_left, opt.eye_right);
      if (!(d > 0.0)) throw InputError("sample " + std::to_string(idx) + " has zero inter-ocular distance");
      const std::string where =
          "epoch " + std::to_string(epoch + 1) + " batch " + std::to_string(batch) + " (sample " + std::to_string(idx) + ")";
      StageTrace trace;
      try {
        trace = run_cascade(s.image, model.mean_face, model);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " in " + where);
      }
      Tensor loss = cascade_loss(trace, s.landmarks, d);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError("non-finite loss in " + where);
      sample_loss[idx] = lv;
      for (std::size_t k = 0; k < stages; ++k) sample_nme[k][idx] = nme(trace.stages[k].prediction, s.landmarks, d);
      backward(scale(loss, inv_b));
    }
    adam_step(params, state, adam);
  }
  const double n = static_cast<double>(dataset.size());
  double loss_sum = 0.0;
  for (double v : sample_loss) loss_sum += v;
  st.loss = loss_sum / n;
  for (std::size_t k = 0; k < stages; ++k) {
    for (double v : sample_nme[k]) st.stage_nme[k] += v;
    st.stage_nme[k] /= n;
  }
  return st;
}

struct EvalOptions {
  std::size_t eye_left = 0;
  std::size_t eye_right = 1;
  double threshold = 10.0;  // percent of d
  std::size_t curve_samples = 101;
  bool keep_attention = false;
};

struct Evaluation {
  EvalReport report;
  std::vector<LandmarkSet> predictions;           // final stage
  std::vector<AttentionRecord> attention;         // last stage, when kept
};

inline Evaluation evaluate(const Model& model, const std::vector<Sample>& dataset, const EvalOptions& opt) {
  if (dataset.empty()) throw InputError("evaluation set is empty");
  NoGradGuard no_grad;
  const std::size_t stages = model.config.cascade.stages;
  std::vector<std::vector<double>> stage_nmes(stages);
  Evaluation ev;
  for (const auto& s : dataset) {
    const double d = inter_ocular_distance(s.landmarks, opt.eye_left, opt.eye_right);
    StageTrace trace = run_cascade(s.image, model.mean_face, model);
    for (std::size_t k = 0; k < stages; ++k) stage_nmes[k].push_back(nme(trace.stages[k].prediction, s.landmarks, d));
    ev.predictions.push_back(trace.final_prediction());
    if (opt.keep_attention) ev.attention.push_back(std::move(trace.stages.back().attention));
  }
  ev.report = make_report(stage_nmes, opt.threshold, opt.curve_samples);
  return ev;
}

/// Trains for opt.epochs epochs, calling `on_epoch` after each.
inline std::vector<EpochStats> fit(const std::vector<Sample>& train_set, Model& model, AdamState& state,
                                   const TrainOptions& opt, std::size_t first_epoch = 0,
                                   const std::function<void(const EpochStats&)>& on_epoch = {}) {
  std::vector<EpochStats> history;
  for (std::size_t e = first_epoch; e < opt.epochs; ++e) {
    history.push_back(train_epoch(train_set, model, state, opt, e));
    if (on_epoch) on_epoch(history.back());
  }
  return history;
}

}  // namespace slpt
