// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value text: parsing, and the canonical text form of a model
// configuration (used for checkpoints and config echoes).
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "slpt/cascade.hpp"

namespace slpt {

/// Ordered key=value store. Blank lines and lines starting with '#' are
/// ignored; keys and values are trimmed.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ParseError(origin + ":" + std::to_string(line_no) + ": expected key=value, got '" + t + "'");
      }
      kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse(os.str(), path);
  }

  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw ParseError("empty config key");
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    if (!has(key)) return fallback;
    return parse_size(key, values_.at(key));
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    return parse_size(key, values_.at(key));
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = values_.at(key);
    std::size_t used = 0;
    double d = 0.0;
    try {
      d = std::stod(v, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != v.size() || !std::isfinite(d)) throw InputError(key + ": not a number: '" + v + "'");
    return d;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = values_.at(key);
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw InputError(key + ": not a boolean: '" + v + "'");
  }

  std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) const {
    if (!has(key)) return fallback;
    std::vector<std::size_t> out;
    std::string item;
    std::istringstream in(values_.at(key));
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(parse_size(key, item));
    }
    return out;
  }

  /// Throws on any key outside `known`.
  void require_known(const std::vector<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      if (std::find(known.begin(), known.end(), k) == known.end()) throw InputError("unknown config key '" + k + "'");
    }
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  static std::uint64_t parse_size(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
      throw InputError(key + ": not a non-negative integer: '" + v + "'");
    }
    return out;
  }

  std::map<std::string, std::string> values_;
};

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline const char* to_string(Activation a) { return a == Activation::kGelu ? "gelu" : "relu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  throw InputError("unknown activation '" + s + "' (relu, gelu)");
}

inline const char* to_string(CrossValueSource s) {
  return s == CrossValueSource::kQueryStream ? "query" : "representations";
}

inline CrossValueSource parse_cross_values(const std::string& s) {
  if (s == "representations") return CrossValueSource::kRepresentations;
  if (s == "query") return CrossValueSource::kQueryStream;
  throw InputError("unknown cross-attention value source '" + s + "' (representations, query)");
}

inline void write_model_config(KeyValues& kv, const ModelConfig& c) {
  kv.set("input_h", std::to_string(c.backbone.input_h));
  kv.set("input_w", std::to_string(c.backbone.input_w));
  kv.set("in_channels", std::to_string(c.backbone.in_channels));
  kv.set("stem_channels", join_sizes(c.backbone.stem_channels));
  kv.set("level_channels", join_sizes(c.backbone.level_channels));
  kv.set("multi_level", c.backbone.multi_level ? "true" : "false");
  kv.set("landmarks", std::to_string(c.slpt.num_landmarks));
  kv.set("dim", std::to_string(c.slpt.dim));
  kv.set("heads", std::to_string(c.slpt.heads));
  kv.set("layers", std::to_string(c.slpt.layers));
  kv.set("patch_k", std::to_string(c.slpt.patch_k));
  kv.set("mlp_hidden", std::to_string(c.slpt.mlp_hidden));
  kv.set("head_hidden", std::to_string(c.slpt.head_hidden));
  kv.set("activation", to_string(c.slpt.activation));
  kv.set("msa", c.slpt.use_msa ? "true" : "false");
  kv.set("mca", c.slpt.use_mca ? "true" : "false");
  kv.set("structure_encoding", c.slpt.use_structure_encoding ? "true" : "false");
  kv.set("dense_output_projection", c.slpt.dense_output_projection ? "true" : "false");
  kv.set("cross_values", to_string(c.slpt.cross_values));
  kv.set("stages", std::to_string(c.cascade.stages));
  kv.set("initial_patch_fraction", format_double(c.cascade.initial_patch_fraction));
  kv.set("min_patch", std::to_string(c.cascade.min_patch));
}

inline const std::vector<std::string>& model_config_keys() {
  static const std::vector<std::string> keys{
      "input_h", "input_w", "in_channels", "stem_channels", "level_channels", "multi_level", "landmarks", "dim",
      "heads", "layers", "patch_k", "mlp_hidden", "head_hidden", "activation", "msa", "mca", "structure_encoding",
      "dense_output_projection", "cross_values", "stages", "initial_patch_fraction", "min_patch"};
  return keys;
}

/// Overlays any model keys present in `kv` onto `base`.
inline ModelConfig read_model_config(const KeyValues& kv, ModelConfig base = {}) {
  ModelConfig c = base;
  c.backbone.input_h = kv.get_size("input_h", c.backbone.input_h);
  c.backbone.input_w = kv.get_size("input_w", c.backbone.input_w);
  c.backbone.in_channels = kv.get_size("in_channels", c.backbone.in_channels);
  c.backbone.stem_channels = kv.get_sizes("stem_channels", c.backbone.stem_channels);
  c.backbone.level_channels = kv.get_sizes("level_channels", c.backbone.level_channels);
  c.backbone.multi_level = kv.get_bool("multi_level", c.backbone.multi_level);
  c.slpt.num_landmarks = kv.get_size("landmarks", c.slpt.num_landmarks);
  c.slpt.dim = kv.get_size("dim", c.slpt.dim);
  c.backbone.embed_dim = c.slpt.dim;
  c.slpt.heads = kv.get_size("heads", c.slpt.heads);
  c.slpt.layers = kv.get_size("layers", c.slpt.layers);
  c.slpt.patch_k = kv.get_size("patch_k", c.slpt.patch_k);
  c.slpt.mlp_hidden = kv.get_size("mlp_hidden", c.slpt.mlp_hidden);
  c.slpt.head_hidden = kv.get_size("head_hidden", c.slpt.head_hidden);
  c.slpt.activation = parse_activation(kv.get("activation", to_string(c.slpt.activation)));
  c.slpt.use_msa = kv.get_bool("msa", c.slpt.use_msa);
  c.slpt.use_mca = kv.get_bool("mca", c.slpt.use_mca);
  c.slpt.use_structure_encoding = kv.get_bool("structure_encoding", c.slpt.use_structure_encoding);
  c.slpt.dense_output_projection = kv.get_bool("dense_output_projection", c.slpt.dense_output_projection);
  c.slpt.cross_values = parse_cross_values(kv.get("cross_values", to_string(c.slpt.cross_values)));
  c.cascade.stages = kv.get_size("stages", c.cascade.stages);
  c.cascade.initial_patch_fraction = kv.get_double("initial_patch_fraction", c.cascade.initial_patch_fraction);
  c.cascade.min_patch = kv.get_size("min_patch", c.cascade.min_patch);
  return c;
}

inline std::string model_config_text(const ModelConfig& c) {
  KeyValues kv;
  write_model_config(kv, c);
  return kv.to_text();
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace slpt
