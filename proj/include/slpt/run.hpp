// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and the train / eval / export-attention / sweep
// commands. Every artifact is plain text (or a binary checkpoint) under the
// run's output directory and is a deterministic function of the config.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "slpt/checkpoint.hpp"
#include "slpt/config.hpp"
#include "slpt/data.hpp"
#include "slpt/metrics.hpp"
#include "slpt/train.hpp"

namespace slpt {

struct RunConfig {
  std::string command = "train";
  std::string dataset = "synthetic";  // "synthetic" or an annotation path
  std::string format = "pts68";       // file datasets only
  std::string test_dataset;           // file datasets only
  std::size_t train_size = 2000;      // synthetic only
  std::size_t test_size = 500;        // synthetic only
  std::uint64_t data_seed = 1;        // synthetic only
  ModelConfig model = default_model();
  std::size_t epochs = 150;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::vector<std::size_t> milestones{120, 140};
  double decay = 0.1;
  bool augment = false;
  std::uint64_t seed = 1;
  std::string out = "runs/default";
  double threshold = 0.1;  // failure threshold as a fraction of d
  std::string checkpoint;  // eval / export-attention; default <out>/checkpoint_final.bin
  std::string axis;        // sweep: stages, patch_k, layers, blocks, encoding
  std::size_t jobs = 1;    // sweep: settings trained concurrently

  static ModelConfig default_model() {
    ModelConfig m;
    m.slpt.num_landmarks = 10;
    return m;
  }

  bool synthetic() const { return dataset == "synthetic"; }

  DatasetLayout layout() const {
    if (synthetic()) return synthetic_spec().layout();
    return layout_for(parse_annotation_format(format));
  }

  SyntheticSpec synthetic_spec() const {
    SyntheticSpec s;
    const double f = static_cast<double>(model.backbone.input_h) / 64.0;
    s.num_landmarks = model.slpt.num_landmarks;
    s.image_size = model.backbone.input_h;
    s.max_translate *= f;
    s.landmark_jitter *= f;
    s.blob_sigma *= f;
    s.seed = data_seed;
    return s;
  }

  void validate() const {
    if (command != "train" && command != "eval" && command != "export-attention" && command != "sweep") {
      throw InputError("unknown command '" + command + "'");
    }
    model.validate();
    if (synthetic()) {
      if (model.backbone.input_h != model.backbone.input_w) throw InputError("synthetic data needs a square input");
      (void)synthetic_spec().layout();
      if (model.slpt.num_landmarks < 2 || model.slpt.num_landmarks % 2) {
        throw InputError("synthetic data needs an even landmark count, got " + std::to_string(model.slpt.num_landmarks));
      }
      if (train_size == 0 || test_size == 0) throw InputError("synthetic train/test sizes must be positive");
    } else {
      const auto l = layout();
      if (l.num_landmarks != model.slpt.num_landmarks) {
        throw InputError("format " + format + " has " + std::to_string(l.num_landmarks) + " landmarks, config sets " +
                         std::to_string(model.slpt.num_landmarks));
      }
    }
    if (batch == 0) throw InputError("batch must be positive");
    if (!(lr >= 0.0)) throw InputError("lr must be non-negative");
    if (!(threshold > 0.0 && threshold <= 1.0)) throw InputError("threshold must lie in (0, 1]");
    if (jobs == 0) throw InputError("jobs must be positive");
    if (out.empty()) throw InputError("output directory must be set");
  }

  static const std::vector<std::string>& run_keys() {
    static const std::vector<std::string> keys{"command", "dataset", "format", "test_dataset", "train_size",
                                               "test_size", "data_seed", "epochs", "batch", "lr", "milestones",
                                               "decay", "augment", "seed", "out", "threshold", "checkpoint",
                                               "axis", "jobs", "input_size"};
    return keys;
  }

  /// Overlays `kv` onto this config; unknown keys are rejected.
  void apply(const KeyValues& kv) {
    std::vector<std::string> known = run_keys();
    known.insert(known.end(), model_config_keys().begin(), model_config_keys().end());
    kv.require_known(known);
    command = kv.get("command", command);
    dataset = kv.get("dataset", dataset);
    format = kv.get("format", format);
    test_dataset = kv.get("test_dataset", test_dataset);
    train_size = kv.get_size("train_size", train_size);
    test_size = kv.get_size("test_size", test_size);
    data_seed = kv.get_u64("data_seed", data_seed);
    if (kv.has("input_size")) model.backbone.input_h = model.backbone.input_w = kv.get_size("input_size", 0);
    if (!synthetic() && !kv.has("landmarks")) model.slpt.num_landmarks = layout().num_landmarks;
    model = read_model_config(kv, model);
    epochs = kv.get_size("epochs", epochs);
    batch = kv.get_size("batch", batch);
    lr = kv.get_double("lr", lr);
    milestones = kv.get_sizes("milestones", milestones);
    decay = kv.get_double("decay", decay);
    augment = kv.get_bool("augment", augment);
    seed = kv.get_u64("seed", seed);
    out = kv.get("out", out);
    threshold = kv.get_double("threshold", threshold);
    checkpoint = kv.get("checkpoint", checkpoint);
    axis = kv.get("axis", axis);
    jobs = kv.get_size("jobs", jobs);
  }

  std::string to_text() const {
    KeyValues kv;
    write_model_config(kv, model);
    kv.set("command", command);
    kv.set("dataset", dataset);
    kv.set("format", format);
    kv.set("test_dataset", test_dataset);
    kv.set("train_size", std::to_string(train_size));
    kv.set("test_size", std::to_string(test_size));
    kv.set("data_seed", std::to_string(data_seed));
    kv.set("epochs", std::to_string(epochs));
    kv.set("batch", std::to_string(batch));
    kv.set("lr", format_double(lr));
    kv.set("milestones", join_sizes(milestones));
    kv.set("decay", format_double(decay));
    kv.set("augment", augment ? "true" : "false");
    kv.set("seed", std::to_string(seed));
    kv.set("out", out);
    kv.set("threshold", format_double(threshold));
    kv.set("checkpoint", checkpoint);
    kv.set("axis", axis);
    kv.set("jobs", std::to_string(jobs));
    return kv.to_text();
  }

  TrainOptions train_options() const {
    TrainOptions t;
    t.epochs = epochs;
    t.batch_size = batch;
    t.adam.lr = lr;
    t.milestones = milestones;
    t.decay = decay;
    t.seed = seed;
    const auto l = layout();
    t.eye_left = l.eye_left;
    t.eye_right = l.eye_right;
    if (augment) {
      AugmentConfig a;
      a.flip_map = l.flip_map;
      a.eye_left = l.eye_left;
      a.eye_right = l.eye_right;
      a.translation_px *= static_cast<double>(model.backbone.input_w) / 256.0;
      t.augment = a;
    }
    return t;
  }

  EvalOptions eval_options() const {
    const auto l = layout();
    EvalOptions e;
    e.eye_left = l.eye_left;
    e.eye_right = l.eye_right;
    e.threshold = threshold * 100.0;
    return e;
  }
};

struct Datasets {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

inline Datasets load_datasets(const RunConfig& cfg, bool need_train = true) {
  Datasets d;
  if (cfg.synthetic()) {
    const auto spec = cfg.synthetic_spec();
    if (need_train) d.train = generate_synthetic_set(spec, 0, cfg.train_size);
    d.test = generate_synthetic_set(spec, std::uint64_t{1} << 40, cfg.test_size);
    return d;
  }
  const auto fmt = parse_annotation_format(cfg.format);
  LoadOptions lo;
  lo.input_h = cfg.model.backbone.input_h;
  lo.input_w = cfg.model.backbone.input_w;
  if (need_train) d.train = load_annotations(cfg.dataset, fmt, lo);
  d.test = load_annotations(cfg.test_dataset.empty() ? cfg.dataset : cfg.test_dataset, fmt, lo);
  return d;
}

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw InputError("cannot write " + p.string());
  out << text;
}

inline std::string matrix_text(const Tensor& m) {
  std::ostringstream os;
  os << std::setprecision(10);
  const std::size_t r = m.dim(0), c = m.dim(1);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) os << (j ? " " : "") << m[i * c + j];
    os << '\n';
  }
  return os.str();
}

inline std::filesystem::path checkpoint_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? std::filesystem::path(cfg.out) / "checkpoint_final.bin"
                                : std::filesystem::path(cfg.checkpoint);
}

}  // namespace detail

struct TrainResult {
  Model model;
  std::vector<EpochStats> history;
  std::vector<double> test_nme;  // per epoch, final stage; empty when nothing is logged
  EvalReport final_report;
};

/// Trains on the configured dataset. When `write_artifacts` is set, writes
/// config.txt, train.log, checkpoint_best.bin (lowest held-out NME) and
/// checkpoint_final.bin under cfg.out.
inline TrainResult run_training(const RunConfig& cfg, const Datasets& data, bool write_artifacts,
                                std::ostream* log = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path out(cfg.out);
  if (write_artifacts) {
    fs::create_directories(out);
    detail::write_text(out / "config.txt", cfg.to_text());
  }
  std::ofstream train_log;
  if (write_artifacts) train_log.open(out / "train.log", std::ios::trunc);

  TrainResult res{Model::init(cfg.model, cfg.seed), {}, {}, {}};
  res.model.mean_face = mean_face(data.train);
  AdamState state;
  const TrainOptions opt = cfg.train_options();
  const EvalOptions eo = cfg.eval_options();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    EpochStats st = train_epoch(data.train, res.model, state, opt, e);
    res.history.push_back(st);
    if (!log && !write_artifacts) continue;
    const EvalReport rep = evaluate(res.model, data.test, eo).report;
    res.test_nme.push_back(rep.nme);
    const std::string line = st.log_line() + " test_nme=" + format_double(rep.nme);
    if (log) *log << line << '\n' << std::flush;
    if (write_artifacts) {
      train_log << line << '\n' << std::flush;
      if (rep.nme < best) {
        best = rep.nme;
        save_checkpoint(out / "checkpoint_best.bin", res.model, &state, e + 1);
      }
    }
  }
  if (write_artifacts) save_checkpoint(out / "checkpoint_final.bin", res.model, &state, opt.epochs);
  res.final_report = opt.epochs ? evaluate(res.model, data.test, eo).report : EvalReport{};
  return res;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& log) {
  const Datasets data = load_datasets(cfg);
  run_training(cfg, data, true, &log);
  return 0;
}

inline void write_report(const std::filesystem::path& dir, const EvalReport& r) {
  detail::write_text(dir / "report.txt", r.to_text());
  detail::write_text(dir / "ced.txt", r.curve_text());
  detail::write_text(dir / "stages.txt", r.stage_table());
  std::ostringstream os;
  os << std::setprecision(10);
  for (double v : r.per_image_nme) os << v << '\n';
  detail::write_text(dir / "per_image_nme.txt", os.str());
}

/// Evaluates the checkpoint on the held-out set; writes report.txt,
/// ced.txt, stages.txt and per_image_nme.txt under <out>/eval.
inline int cmd_eval(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Checkpoint ck = load_checkpoint(detail::checkpoint_path(cfg), &cfg.model);
  const Datasets data = load_datasets(cfg, false);
  const Evaluation ev = evaluate(ck.model, data.test, cfg.eval_options());
  const std::filesystem::path dir = std::filesystem::path(cfg.out) / "eval";
  std::filesystem::create_directories(dir);
  write_report(dir, ev.report);
  log << ev.report.stage_table();
  return 0;
}

/// Writes per-layer mean attention matrices of the last stage
/// (msa_layerL.txt, mca_layerL.txt), the structure-encoding cosine
/// similarity (encoding_similarity.txt) and per-image argmax connections
/// (connections.txt) under <out>/attention.
inline int cmd_export_attention(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Checkpoint ck = load_checkpoint(detail::checkpoint_path(cfg), &cfg.model);
  const Datasets data = load_datasets(cfg, false);
  EvalOptions eo = cfg.eval_options();
  eo.keep_attention = true;
  const Evaluation ev = evaluate(ck.model, data.test, eo);
  const std::filesystem::path dir = std::filesystem::path(cfg.out) / "attention";
  std::filesystem::create_directories(dir);
  const AttentionSummary sum = attention_interaction_summary(ev.attention);
  for (std::size_t l = 0; l < sum.msa.size(); ++l) {
    detail::write_text(dir / ("msa_layer" + std::to_string(l + 1) + ".txt"), detail::matrix_text(sum.msa[l]));
  }
  for (std::size_t l = 0; l < sum.mca.size(); ++l) {
    detail::write_text(dir / ("mca_layer" + std::to_string(l + 1) + ".txt"), detail::matrix_text(sum.mca[l]));
  }
  if (ck.model.slpt.structure.defined()) {
    detail::write_text(dir / "encoding_similarity.txt", detail::matrix_text(encoding_similarity(ck.model.slpt.structure)));
  }
  std::ostringstream os;
  for (std::size_t i = 0; i < ev.attention.size(); ++i) {
    const auto write = [&](const char* kind, const std::vector<Tensor>& layers) {
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::size_t h = layers[l].dim(0), n = layers[l].dim(1);
        std::vector<double> mean(n * n, 0.0);
        for (std::size_t k = 0; k < h; ++k)
          for (std::size_t j = 0; j < n * n; ++j) mean[j] += layers[l][k * n * n + j] / static_cast<double>(h);
        os << "image=" << i << ' ' << kind << "_layer=" << l + 1;
        for (auto c : argmax_connections(Tensor::from({n, n}, std::move(mean)))) os << ' ' << c;
        os << '\n';
      }
    };
    write("msa", ev.attention[i].msa);
    write("mca", ev.attention[i].mca);
  }
  detail::write_text(dir / "connections.txt", os.str());
  log << "wrote " << sum.msa.size() << " MSA and " << sum.mca.size() << " MCA matrices to " << dir.string() << '\n';
  return 0;
}

struct SweepSetting {
  std::string label;
  RunConfig config;
};

/// Settings for one sweep axis; every setting keeps the base seed.
inline std::vector<SweepSetting> sweep_settings(const RunConfig& base, const std::string& axis) {
  std::vector<SweepSetting> out;
  auto add = [&](std::string label, const std::function<void(RunConfig&)>& edit) {
    RunConfig c = base;
    c.command = "train";
    edit(c);
    c.out = (std::filesystem::path(base.out) / (axis + "_" + label)).string();
    out.push_back({std::move(label), std::move(c)});
  };
  if (axis == "stages") {
    for (std::size_t s = 1; s <= 4; ++s) add(std::to_string(s), [s](RunConfig& c) { c.model.cascade.stages = s; });
  } else if (axis == "patch_k") {
    for (std::size_t k : {5, 7, 9}) add(std::to_string(k), [k](RunConfig& c) { c.model.slpt.patch_k = k; });
  } else if (axis == "layers") {
    for (std::size_t d : {2, 4, 6, 12}) add(std::to_string(d), [d](RunConfig& c) { c.model.slpt.layers = d; });
  } else if (axis == "blocks") {
    const std::pair<bool, bool> rows[] = {{false, false}, {true, false}, {false, true}, {true, true}};
    const char* names[] = {"none", "msa", "mca", "both"};
    for (int i = 0; i < 4; ++i) {
      add(names[i], [r = rows[i]](RunConfig& c) {
        c.model.slpt.use_msa = r.first;
        c.model.slpt.use_mca = r.second;
      });
    }
  } else if (axis == "encoding") {
    add("off", [](RunConfig& c) { c.model.slpt.use_structure_encoding = false; });
    add("on", [](RunConfig& c) { c.model.slpt.use_structure_encoding = true; });
  } else {
    throw InputError("unknown sweep axis '" + axis + "' (stages, patch_k, layers, blocks, encoding)");
  }
  return out;
}

/// Comparison table for a sweep: one row per setting with per-stage NME
/// columns (stages axis) or the final NME/FR/AUC.
inline std::string sweep_table(const std::string& axis, const std::vector<SweepSetting>& settings,
                               const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  if (axis == "stages") {
    std::size_t max_stages = 0;
    for (const auto& r : reports) max_stages = std::max(max_stages, r.stages.size());
    os << "stages";
    for (std::size_t s = 1; s <= max_stages; ++s) os << " nme_s" << s;
    os << " fr auc\n";
    for (std::size_t i = 0; i < settings.size(); ++i) {
      os << settings[i].label;
      for (std::size_t s = 0; s < max_stages; ++s) {
        if (s < reports[i].stages.size()) os << ' ' << reports[i].stages[s].nme;
        else os << " -";
      }
      os << ' ' << reports[i].fr << ' ' << reports[i].auc << '\n';
    }
    return os.str();
  }
  if (axis == "blocks") {
    os << "msa mca nme fr auc\n";
    for (std::size_t i = 0; i < settings.size(); ++i) {
      const auto& m = settings[i].config.model.slpt;
      os << (m.use_msa ? "yes" : "no") << ' ' << (m.use_mca ? "yes" : "no") << ' ' << reports[i].nme << ' '
         << reports[i].fr << ' ' << reports[i].auc << '\n';
    }
    return os.str();
  }
  os << axis << " nme fr auc\n";
  for (std::size_t i = 0; i < settings.size(); ++i) {
    os << settings[i].label << ' ' << reports[i].nme << ' ' << reports[i].fr << ' ' << reports[i].auc << '\n';
  }
  return os.str();
}

/// Trains and evaluates each setting of cfg.axis; writes each setting's
/// artifacts under <out>/<axis>_<label> and the table to
/// <out>/sweep_<axis>.txt. With jobs > 1 settings run on worker threads;
/// results do not depend on the job count.
inline int cmd_sweep(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto settings = sweep_settings(cfg, cfg.axis);
  for (const auto& s : settings) s.config.validate();
  const Datasets data = load_datasets(cfg);
  std::vector<EvalReport> reports(settings.size());
  std::vector<std::exception_ptr> errors(settings.size());
  auto work = [&](std::size_t i) {
    try {
      reports[i] = run_training(settings[i].config, data, true).final_report;
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (cfg.jobs <= 1) {
    for (std::size_t i = 0; i < settings.size(); ++i) work(i);
  } else {
    std::size_t next = 0;
    while (next < settings.size()) {
      std::vector<std::thread> pool;
      for (std::size_t j = 0; j < cfg.jobs && next < settings.size(); ++j) pool.emplace_back(work, next++);
      for (auto& t : pool) t.join();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  const std::string table = sweep_table(cfg.axis, settings, reports);
  std::filesystem::create_directories(cfg.out);
  detail::write_text(std::filesystem::path(cfg.out) / ("sweep_" + cfg.axis + ".txt"), table);
  log << table;
  return 0;
}

inline int run_command(const RunConfig& cfg, std::ostream& log) {
  if (cfg.command == "train") return cmd_train(cfg, log);
  if (cfg.command == "eval") return cmd_eval(cfg, log);
  if (cfg.command == "export-attention") return cmd_export_attention(cfg, log);
  if (cfg.command == "sweep") return cmd_sweep(cfg, log);
  throw InputError("unknown command '" + cfg.command + "'");
}

}  // namespace slpt
