// SPDX-License-Identifier: Apache-2.0
//
// Landmark error metrics (NME, failure rate, CED/AUC), attention summaries
// and complexity/parameter accounting.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "slpt/cascade.hpp"
#include "slpt/geometry.hpp"
#include "slpt/model.hpp"
#include "slpt/tensor.hpp"

namespace slpt {

/// Normalized mean error in percent.
inline double nme(const LandmarkSet& pred, const LandmarkSet& gt, double d) {
  if (pred.size() != gt.size() || gt.size() == 0) {
    throw InputError("nme: " + std::to_string(pred.size()) + " predicted vs " +
                     std::to_string(gt.size()) + " ground-truth landmarks");
  }
  if (!(d > 0.0)) throw InputError("nme: normalization distance must be positive");
  double s = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) s += std::hypot(pred[i].x - gt[i].x, pred[i].y - gt[i].y);
  return s / (static_cast<double>(gt.size()) * d) * 100.0;
}

/// Percentage of NMEs strictly above `threshold` (both in percent).
inline double failure_rate(const std::vector<double>& nmes, double threshold) {
  if (nmes.empty()) throw InputError("failure_rate: no NME values");
  if (!(threshold > 0.0)) throw InputError("failure_rate: threshold must be positive");
  const auto fails = std::count_if(nmes.begin(), nmes.end(), [threshold](double e) { return e > threshold; });
  return 100.0 * static_cast<double>(fails) / static_cast<double>(nmes.size());
}

struct CedCurve {
  std::vector<double> x;  // NME (%)
  std::vector<double> y;  // fraction of images with NME <= x
};

struct AucResult {
  double auc = 0.0;
  CedCurve ced;
};

/// Area under the cumulative error distribution from 0 to `threshold`,
/// divided by `threshold` so a perfect result scores 1. The integral is
/// exact for the step function; `samples` points of the curve are
/// returned for plotting.
inline AucResult auc_ced(const std::vector<double>& nmes, double threshold, std::size_t samples) {
  if (nmes.empty()) throw InputError("auc_ced: no NME values");
  if (!(threshold > 0.0)) throw InputError("auc_ced: threshold must be positive");
  if (samples < 2) throw InputError("auc_ced: need at least 2 curve samples");
  std::vector<double> sorted(nmes);
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());

  // CED jumps by 1/n at each sorted NME; integrate segment by segment.
  double area = 0.0;
  double prev = 0.0;
  for (std::size_t i = 0; i < sorted.size() && sorted[i] < threshold; ++i) {
    const double x = std::max(sorted[i], 0.0);
    area += static_cast<double>(i) / n * (x - prev);
    prev = x;
  }
  // The last segment runs to the threshold at the count strictly below it.
  const auto reached = static_cast<double>(
      std::lower_bound(sorted.begin(), sorted.end(), threshold) - sorted.begin());
  area += reached / n * (threshold - prev);

  AucResult r;
  r.auc = area / threshold;
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = threshold * static_cast<double>(i) / static_cast<double>(samples - 1);
    const auto c = std::upper_bound(sorted.begin(), sorted.end(), x) - sorted.begin();
    r.ced.x.push_back(x);
    r.ced.y.push_back(static_cast<double>(c) / n);
  }
  return r;
}

struct StageMetrics {
  double nme = 0.0;  // %
  double fr = 0.0;   // %
  double auc = 0.0;
};

struct EvalReport {
  double threshold = 10.0;           // % of d
  std::vector<double> per_image_nme;  // final stage, dataset order
  double nme = 0.0;
  double fr = 0.0;
  double auc = 0.0;
  std::vector<double> ced;           // sorted per-image NME
  CedCurve curve;
  std::vector<StageMetrics> stages;

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "images=" << per_image_nme.size() << '\n'
       << "threshold=" << threshold << '\n'
       << "nme=" << nme << '\n'
       << "fr=" << fr << '\n'
       << "auc=" << auc << '\n'
       << "stages=" << stages.size() << '\n';
    for (std::size_t s = 0; s < stages.size(); ++s) {
      os << "stage" << s + 1 << ".nme=" << stages[s].nme << '\n'
         << "stage" << s + 1 << ".fr=" << stages[s].fr << '\n'
         << "stage" << s + 1 << ".auc=" << stages[s].auc << '\n';
    }
    return os.str();
  }

  std::string curve_text() const {
    std::ostringstream os;
    os << std::setprecision(10);
    for (std::size_t i = 0; i < curve.x.size(); ++i) os << curve.x[i] << ' ' << curve.y[i] << '\n';
    return os.str();
  }

  /// One row per stage: stage NME FR AUC.
  std::string stage_table() const {
    std::ostringstream os;
    os << "stage nme fr auc\n" << std::fixed;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      os << s + 1 << ' ' << std::setprecision(4) << stages[s].nme << ' ' << stages[s].fr << ' '
         << std::setprecision(4) << stages[s].auc << '\n';
    }
    return os.str();
  }
};

/// Fills summary metrics from per-stage per-image NME lists.
inline EvalReport make_report(const std::vector<std::vector<double>>& stage_nmes, double threshold,
                              std::size_t curve_samples = 101) {
  if (stage_nmes.empty()) throw InputError("make_report: no stages");
  EvalReport r;
  r.threshold = threshold;
  for (const auto& v : stage_nmes) {
    StageMetrics m;
    m.nme = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    m.fr = failure_rate(v, threshold);
    m.auc = auc_ced(v, threshold, 2).auc;
    r.stages.push_back(m);
  }
  r.per_image_nme = stage_nmes.back();
  r.nme = r.stages.back().nme;
  r.fr = r.stages.back().fr;
  auto a = auc_ced(r.per_image_nme, threshold, curve_samples);
  r.auc = a.auc;
  r.curve = std::move(a.ced);
  r.ced = r.per_image_nme;
  std::sort(r.ced.begin(), r.ced.end());
  return r;
}

// ---------------------------------------------------------------------------
// Attention summaries

struct AttentionSummary {
  std::vector<Tensor> msa;  // per layer [N, N]
  std::vector<Tensor> mca;
};

/// Mean over images and heads of each layer's attention matrices.
inline AttentionSummary attention_interaction_summary(const std::vector<AttentionRecord>& records) {
  if (records.empty()) throw InputError("attention_interaction_summary: no records");
  auto average = [&records](auto member) {
    std::vector<Tensor> out;
    const auto& first = records[0].*member;
    for (std::size_t l = 0; l < first.size(); ++l) {
      const std::size_t h = first[l].dim(0), n = first[l].dim(1);
      std::vector<double> acc(n * n, 0.0);
      for (const auto& rec : records) {
        const auto& a = (rec.*member).at(l).values();
        for (std::size_t k = 0; k < h; ++k)
          for (std::size_t i = 0; i < n * n; ++i) acc[i] += a[k * n * n + i];
      }
      const double inv = 1.0 / static_cast<double>(records.size() * h);
      for (double& v : acc) v *= inv;
      out.push_back(Tensor::from({n, n}, std::move(acc)));
    }
    return out;
  };
  return {average(&AttentionRecord::msa), average(&AttentionRecord::mca)};
}

/// Column of the largest entry in each row of an [N, N] matrix.
inline std::vector<std::size_t> argmax_connections(const Tensor& m) {
  if (m.ndim() != 2) throw DimensionError("argmax_connections needs a matrix, got " + shape_str(m.shape()));
  const std::size_t n = m.dim(0), c = m.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = m.data().subspan(i * c, c);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cost accounting

struct CostModel {
  std::uint64_t landmarks;   // N
  std::uint64_t heads;       // H
  std::uint64_t head_dim;    // C_h
  std::uint64_t map_tokens;  // W_I * H_I / (P_w * P_h)
};

/// Cross-attention cost over N sparse patch tokens: 4HNC_h² + 2HN²C_h.
inline std::uint64_t omega_sparse(const CostModel& m) {
  const auto h = m.heads, n = m.landmarks, c = m.head_dim;
  return 4 * h * n * c * c + 2 * h * n * n * c;
}

/// Cross-attention cost over the full feature-map token grid:
/// (2N + 2T)HC_h² + 2NHTC_h with T map tokens.
inline std::uint64_t omega_full(const CostModel& m) {
  const auto h = m.heads, n = m.landmarks, c = m.head_dim, t = m.map_tokens;
  return (2 * n + 2 * t) * h * c * c + 2 * n * h * t * c;
}

/// Multiplies executed by one cross-attention block of `cfg` on random
/// inputs, counted by the instrumented tensor ops.
inline std::uint64_t measure_mca_macs(const SlptConfig& cfg, std::uint64_t seed = 1) {
  Rng rng(seed);
  const std::size_t n = cfg.num_landmarks, c = cfg.dim;
  auto attn = AttentionParams::init(cfg, rng);
  Tensor t = normal({n, c}, 0, 1, rng, false), q = normal({n, c}, 0, 1, rng, false);
  Tensor r = normal({n, c}, 0, 1, rng, false), p = normal({n, c}, 0, 1, rng, false);
  NoGradGuard no_grad;
  MacCounter counter;
  (void)mca_block(t, q, r, p, attn, cfg);
  return counter.count();
}

struct ParamCount {
  std::uint64_t total = 0;
  std::map<std::string, std::uint64_t> by_module;
};

/// Learnable scalars, grouped by module prefix (backbone, slpt.embed,
/// slpt.structure_encoding, slpt.landmark_queries, slpt.layerN, slpt.head).
inline ParamCount count_params(const Model& model) {
  ParamCount pc;
  for (const auto& [name, t] : model.named_parameters()) {
    std::string module = name.substr(0, name.find('.'));
    if (module == "slpt") {
      const auto second = name.find('.', 5);
      module = name.substr(0, second);
    }
    pc.by_module[module] += t.numel();
    pc.total += t.numel();
  }
  return pc;
}

/// Closed-form parameter count of one inherent relation layer.
inline std::uint64_t relation_layer_param_count(const SlptConfig& cfg) {
  const std::uint64_t ci = cfg.dim, h = cfg.heads, c = cfg.head_dim(), hid = cfg.mlp_width();
  const std::uint64_t out_proj = cfg.dense_output_projection ? ci * ci : h * c * c;
  const std::uint64_t attention = 3 * h * c * c + out_proj + 2 * ci;  // + pre-LN affine
  std::uint64_t n = (ci * hid + hid + hid * ci + ci) + 2 * ci;
  if (cfg.use_msa) n += attention;
  if (cfg.use_mca) n += attention;
  return n;
}

}  // namespace slpt
