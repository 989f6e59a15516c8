// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoints. Layout (all integers little-endian, doubles as their
// IEEE-754 bit patterns in little-endian order):
//
//   "SLPTCKPT"                      8 bytes
//   version                         u32 (currently 1)
//   config digest                   u64, FNV-1a of the config text
//   config text                     u64 length + bytes (key=value lines)
//   epoch                           u64
//   parameter count P               u64
//   P x { name (u64 length + bytes), rank u64, dims u64[rank], f64[numel] }
//   mean face                       u64 count + f64[2 * count] (x, y pairs)
//   optimizer flag                  u8 (0 = none, 1 = Adam state follows)
//   Adam state                      step u64, then per parameter m f64[numel], v f64[numel]
//   payload length                  u64, bytes before this field
//   checksum                        u64, FNV-1a of those bytes
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "slpt/cascade.hpp"
#include "slpt/config.hpp"
#include "slpt/tensor.hpp"

namespace slpt {

inline constexpr char kCheckpointMagic[8] = {'S', 'L', 'P', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::optional<AdamState> optimizer;
  std::uint64_t epoch = 0;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes_ += s;
  }
  void raw(const char* p, std::size_t n) { bytes_.append(p, n); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64s(std::uint64_t n) {
    need(n * 8);
    std::vector<double> out(n);
    for (auto& v : out) v = f64();
    return out;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) throw IntegrityError("checkpoint payload ends early");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Model& model,
                            const AdamState* optimizer = nullptr, std::uint64_t epoch = 0) {
  const auto params = model.named_parameters();
  if (optimizer && (optimizer->m.size() != params.size() || optimizer->v.size() != params.size())) {
    throw ContractError("optimizer state does not match the model parameters");
  }
  const std::string cfg_text = model_config_text(model.config);
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(fnv1a64(cfg_text));
  w.str(cfg_text);
  w.u64(epoch);
  w.u64(params.size());
  for (const auto& [name, t] : params) {
    w.str(name);
    w.u64(t.ndim());
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  w.u64(model.mean_face.size());
  for (const auto& p : model.mean_face.points) {
    w.f64(p.x);
    w.f64(p.y);
  }
  w.u8(optimizer ? 1 : 0);
  if (optimizer) {
    w.u64(optimizer->step);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (optimizer->m[i].size() != params[i].second.numel() || optimizer->v[i].size() != params[i].second.numel()) {
        throw ContractError("optimizer slot size mismatch for " + params[i].first);
      }
      for (double v : optimizer->m[i]) w.f64(v);
      for (double v : optimizer->v[i]) w.f64(v);
    }
  }
  const std::string& payload = w.bytes();
  detail::ByteWriter tail;
  tail.u64(payload.size());
  tail.u64(fnv1a64(payload));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.write(tail.bytes().data(), static_cast<std::streamsize>(tail.bytes().size()));
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

namespace detail {

inline void check_compatible(const ModelConfig& stored, const ModelConfig& expected) {
  KeyValues a, b;
  write_model_config(a, stored);
  write_model_config(b, expected);
  for (const auto& [key, value] : a.entries()) {
    const std::string other = b.get(key, "");
    if (value != other) {
      throw IncompatibleError("checkpoint " + key + "=" + value + " but configuration expects " + key + "=" + other);
    }
  }
}

}  // namespace detail

/// Loads a checkpoint; when `expected` is given, every model setting must
/// match it.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  const std::string bytes = os.str();

  if (bytes.size() < sizeof kCheckpointMagic + 16) throw IntegrityError(path.string() + ": file too short");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  }
  const std::size_t payload_size = bytes.size() - 16;
  const std::string trailer = bytes.substr(payload_size);
  detail::ByteReader tail(trailer, 16);
  const std::uint64_t stored_len = tail.u64();
  const std::uint64_t stored_sum = tail.u64();
  if (stored_len != payload_size) {
    throw IntegrityError(path.string() + ": length field " + std::to_string(stored_len) + " but payload has " +
                         std::to_string(payload_size) + " bytes");
  }
  if (stored_sum != fnv1a64(std::string_view(bytes.data(), payload_size))) {
    throw IntegrityError(path.string() + ": checksum mismatch");
  }

  detail::ByteReader r(bytes, payload_size);
  for (std::size_t i = 0; i < sizeof kCheckpointMagic; ++i) r.u8();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IncompatibleError("checkpoint version " + std::to_string(version) + ", reader supports " +
                            std::to_string(kCheckpointVersion));
  }
  const std::uint64_t digest = r.u64();
  const std::string cfg_text = r.str();
  if (digest != fnv1a64(cfg_text)) throw IntegrityError(path.string() + ": config digest mismatch");
  const ModelConfig cfg = read_model_config(KeyValues::parse(cfg_text, path.string()));
  if (expected) detail::check_compatible(cfg, *expected);

  Checkpoint ck;
  ck.model = Model::init(cfg, 0);
  ck.epoch = r.u64();
  auto params = ck.model.named_parameters();
  const std::uint64_t count = r.u64();
  if (count != params.size()) {
    throw IncompatibleError("checkpoint holds " + std::to_string(count) + " tensors, configuration builds " +
                            std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const std::string stored = r.str();
    if (stored != name) throw IncompatibleError("checkpoint tensor " + stored + " where " + name + " is expected");
    Shape shape(r.u64());
    for (auto& d : shape) d = r.u64();
    if (shape != t.shape()) {
      throw IncompatibleError(name + ": checkpoint shape " + shape_str(shape) + ", model shape " + shape_str(t.shape()));
    }
    auto values = r.f64s(t.numel());
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
  const std::uint64_t n_mean = r.u64();
  for (std::uint64_t i = 0; i < n_mean; ++i) {
    const double x = r.f64();
    const double y = r.f64();
    ck.model.mean_face.points.push_back({x, y});
  }
  if (r.u8() == 1) {
    AdamState st;
    st.step = r.u64();
    for (const auto& [name, t] : params) {
      st.m.push_back(r.f64s(t.numel()));
      st.v.push_back(r.f64s(t.numel()));
    }
    ck.optimizer = std::move(st);
  }
  if (!r.done()) throw IntegrityError(path.string() + ": trailing bytes after payload");
  return ck;
}

}  // namespace slpt
