// SPDX-License-Identifier: Apache-2.0
//
// Sparse local patch transformer: one token per landmark built from its
// supporting patch, a stack of inherent-relation layers (self-attention
// among landmark queries, cross-attention onto patch representations, MLP),
// and a shared head that predicts each landmark's fractional position
// inside its patch.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "slpt/tensor.hpp"

namespace slpt {

enum class Activation { kRelu, kGelu };

/// Where cross-attention reads its values from. The representation stream
/// is the working default; kQueryStream reproduces the literal symbol
/// placement A'·T'·W'v, under which patch content reaches the output only
/// through attention weights applied to identical rows.
enum class CrossValueSource { kRepresentations, kQueryStream };

struct SlptConfig {
  std::size_t num_landmarks = 98;  // N
  std::size_t dim = 256;           // C_I
  std::size_t heads = 8;           // H
  std::size_t layers = 6;          // D
  std::size_t patch_k = 7;         // K
  std::size_t mlp_hidden = 0;      // 0 -> 4 * C_I
  std::size_t head_hidden = 0;     // 0 -> C_I
  Activation activation = Activation::kRelu;
  bool use_msa = true;
  bool use_mca = true;
  bool use_structure_encoding = true;
  bool dense_output_projection = false;
  CrossValueSource cross_values = CrossValueSource::kRepresentations;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t mlp_width() const { return mlp_hidden ? mlp_hidden : 4 * dim; }
  std::size_t head_width() const { return head_hidden ? head_hidden : dim; }

  void validate() const {
    if (num_landmarks == 0) throw InputError("N must be positive");
    if (heads == 0 || dim == 0 || dim % heads != 0) {
      throw InputError("C_I=" + std::to_string(dim) + " is not divisible by H=" + std::to_string(heads));
    }
    if (layers < 1) throw InputError("need at least one inherent relation layer");
    if (patch_k < 1) throw InputError("K must be >= 1");
  }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams init(std::size_t width) {
    return {Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
  }
};

/// Per-head C_h x C_h projections stored as [H, C_h, C_h] in row-vector
/// convention (x·W). The output projection is per head unless
/// dense_output_projection is set, in which case it is [C_I, C_I].
struct AttentionParams {
  Tensor w_q, w_k, w_v, w_out;

  static AttentionParams init(const SlptConfig& cfg, Rng& rng) {
    const std::size_t h = cfg.heads, c = cfg.head_dim();
    AttentionParams p;
    p.w_q = kaiming_uniform({h, c, c}, c, rng);
    p.w_k = kaiming_uniform({h, c, c}, c, rng);
    p.w_v = kaiming_uniform({h, c, c}, c, rng);
    p.w_out = cfg.dense_output_projection ? kaiming_uniform({cfg.dim, cfg.dim}, cfg.dim, rng)
                                          : kaiming_uniform({h, c, c}, c, rng);
    return p;
  }
};

struct MlpParams {
  Tensor w1, b1, w2, b2;  // [hidden, in], [hidden], [out, hidden], [out]

  static MlpParams init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
                        bool zero_output = false) {
    MlpParams p;
    p.w1 = kaiming_uniform({hidden, in}, in, rng);
    p.b1 = Tensor::zeros({hidden}, true);
    p.w2 = zero_output ? Tensor::zeros({out, hidden}, true) : kaiming_uniform({out, hidden}, hidden, rng);
    p.b2 = Tensor::zeros({out}, true);
    return p;
  }
};

struct RelationLayerParams {
  LayerNormParams ln_msa, ln_mca, ln_mlp;
  AttentionParams msa, mca;  // undefined tensors when the block is disabled
  MlpParams mlp;
};

struct HeadParams {
  LayerNormParams ln;
  MlpParams mlp;
};

struct SlptParams {
  Tensor embed_w;     // [C_I, C_I * K * K]: K x K conv on each K x K patch
  Tensor embed_b;     // [C_I]
  Tensor structure;   // P [N, C_I]; undefined when structure encoding is off
  Tensor queries;     // Q [N, C_I]
  std::vector<RelationLayerParams> layers;
  HeadParams head;

  static SlptParams init(const SlptConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t ci = cfg.dim, fan = ci * cfg.patch_k * cfg.patch_k;
    SlptParams p;
    p.embed_w = kaiming_uniform({ci, fan}, fan, rng);
    p.embed_b = Tensor::zeros({ci}, true);
    if (cfg.use_structure_encoding) p.structure = normal({cfg.num_landmarks, ci}, 0.0, 0.02, rng);
    p.queries = normal({cfg.num_landmarks, ci}, 0.0, 0.02, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      RelationLayerParams lp;
      if (cfg.use_msa) {
        lp.ln_msa = LayerNormParams::init(ci);
        lp.msa = AttentionParams::init(cfg, rng);
      }
      if (cfg.use_mca) {
        lp.ln_mca = LayerNormParams::init(ci);
        lp.mca = AttentionParams::init(cfg, rng);
      }
      lp.ln_mlp = LayerNormParams::init(ci);
      lp.mlp = MlpParams::init(ci, cfg.mlp_width(), ci, rng);
      p.layers.push_back(std::move(lp));
    }
    p.head.ln = LayerNormParams::init(ci);
    p.head.mlp = MlpParams::init(ci, cfg.head_width(), 2, rng, /*zero_output=*/true);
    return p;
  }

  void collect(std::vector<std::pair<std::string, Tensor>>& out) const {
    auto put = [&out](const std::string& name, const Tensor& t) {
      if (t.defined()) out.emplace_back(name, t);
    };
    auto put_ln = [&](const std::string& n, const LayerNormParams& ln) {
      put(n + ".gamma", ln.gamma);
      put(n + ".beta", ln.beta);
    };
    auto put_mlp = [&](const std::string& n, const MlpParams& m) {
      put(n + ".w1", m.w1);
      put(n + ".b1", m.b1);
      put(n + ".w2", m.w2);
      put(n + ".b2", m.b2);
    };
    auto put_attn = [&](const std::string& n, const AttentionParams& a) {
      put(n + ".w_q", a.w_q);
      put(n + ".w_k", a.w_k);
      put(n + ".w_v", a.w_v);
      put(n + ".w_out", a.w_out);
    };
    put("slpt.embed.weight", embed_w);
    put("slpt.embed.bias", embed_b);
    put("slpt.structure_encoding", structure);
    put("slpt.landmark_queries", queries);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string n = "slpt.layer" + std::to_string(l);
      put_ln(n + ".ln_msa", layers[l].ln_msa);
      put_attn(n + ".msa", layers[l].msa);
      put_ln(n + ".ln_mca", layers[l].ln_mca);
      put_attn(n + ".mca", layers[l].mca);
      put_ln(n + ".ln_mlp", layers[l].ln_mlp);
      put_mlp(n + ".mlp", layers[l].mlp);
    }
    put_ln("slpt.head.ln", head.ln);
    put_mlp("slpt.head.mlp", head.mlp);
  }
};

/// Attention matrices per layer, each [H, N, N]. A disabled block leaves
/// its vector empty.
struct AttentionRecord {
  std::vector<Tensor> msa;
  std::vector<Tensor> mca;
};

struct AttentionOutput {
  Tensor out;      // [N, C_I]
  Tensor weights;  // [H, N, N]
};

inline Tensor activate(const Tensor& x, Activation a) {
  return a == Activation::kGelu ? gelu(x) : relu(x);
}

/// Flattens each K x K patch and applies the K x K embedding conv, which on
/// a K x K input is a single dot product per output channel.
inline Tensor embed_patches(const Tensor& patches, const SlptParams& params, const SlptConfig& cfg) {
  const std::size_t k = cfg.patch_k;
  if (patches.ndim() != 4 || patches.dim(1) != cfg.dim || patches.dim(2) != k || patches.dim(3) != k) {
    throw ContractError("embed_patches: expected [N," + std::to_string(cfg.dim) + "," +
                        std::to_string(k) + "," + std::to_string(k) + "], got " +
                        shape_str(patches.shape()));
  }
  const std::size_t n = patches.dim(0);
  return linear(reshape(patches, {n, cfg.dim * k * k}), params.embed_w, params.embed_b);
}

/// softmax((q_in·W^q)(k_in·W^k)ᵀ/√C_h) per head, applied to v_in·W^v, then
/// the output projection.
inline AttentionOutput multi_head_attention(const Tensor& query_in, const Tensor& key_in,
                                            const Tensor& value_in, const AttentionParams& p,
                                            const SlptConfig& cfg) {
  const std::size_t h = cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  Tensor q = matmul(split_heads(query_in, h), p.w_q);
  Tensor k = matmul(split_heads(key_in, h), p.w_k);
  Tensor v = matmul(split_heads(value_in, h), p.w_v);
  Tensor a = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt));
  Tensor heads = matmul(a, v, /*order_invariant=*/true);
  Tensor out = cfg.dense_output_projection ? matmul(merge_heads(heads), p.w_out)
                                           : merge_heads(matmul(heads, p.w_out));
  return {out, a};
}

/// Self-attention among landmark queries. `t` is the (normalized) query
/// stream; queries and keys come from t + Q, values from t alone.
inline AttentionOutput msa_block(const Tensor& t, const Tensor& q, const AttentionParams& p,
                                 const SlptConfig& cfg) {
  Tensor qk = add(t, q);
  return multi_head_attention(qk, qk, t, p, cfg);
}

/// Cross-attention from the query stream onto patch representations:
/// queries from t + Q, keys from R + P. `p_enc` may be undefined.
inline AttentionOutput mca_block(const Tensor& t, const Tensor& q, const Tensor& r,
                                 const Tensor& p_enc, const AttentionParams& p,
                                 const SlptConfig& cfg) {
  Tensor keys = p_enc.defined() ? add(r, p_enc) : r;
  const Tensor& values = cfg.cross_values == CrossValueSource::kRepresentations ? r : t;
  return multi_head_attention(add(t, q), keys, values, p, cfg);
}

inline Tensor mlp_forward(const Tensor& x, const MlpParams& m, Activation act) {
  return linear(activate(linear(x, m.w1, m.b1), act), m.w2, m.b2);
}

struct LayerOutput {
  Tensor t;
  Tensor msa_weights;  // undefined when MSA is disabled
  Tensor mca_weights;  // undefined when MCA is disabled
};

/// One pre-LN inherent relation layer with residual connections.
/// `t_is_zero` marks the first layer's all-zero input, which enters the
/// self-attention block as-is (values 0·W^v give an exactly zero update).
inline LayerOutput inherent_relation_layer(const Tensor& t_in, bool t_is_zero, const Tensor& q,
                                           const Tensor& r, const Tensor& p_enc,
                                           const RelationLayerParams& lp, const SlptConfig& cfg) {
  LayerOutput out;
  Tensor t = t_in;
  if (cfg.use_msa) {
    Tensor x = t_is_zero ? t : layernorm(t, lp.ln_msa.gamma, lp.ln_msa.beta);
    auto a = msa_block(x, q, lp.msa, cfg);
    t = add(t, a.out);
    out.msa_weights = a.weights;
  }
  if (cfg.use_mca) {
    auto a = mca_block(layernorm(t, lp.ln_mca.gamma, lp.ln_mca.beta), q, r, p_enc, lp.mca, cfg);
    t = add(t, a.out);
    out.mca_weights = a.weights;
  }
  t = add(t, mlp_forward(layernorm(t, lp.ln_mlp.gamma, lp.ln_mlp.beta), lp.mlp, cfg.activation));
  out.t = t;
  return out;
}

/// LayerNorm + MLP + sigmoid: fractional patch positions in (0, 1)^2.
inline Tensor prediction_head(const Tensor& t, const HeadParams& hp, const SlptConfig& cfg) {
  return sigmoid(mlp_forward(layernorm(t, hp.ln.gamma, hp.ln.beta), hp.mlp, cfg.activation));
}

struct SlptOutput {
  Tensor representations;     // R [N, C_I]
  std::vector<Tensor> local;  // one [N, 2] per layer; the last is the estimate
  AttentionRecord attention;
};

/// Embeds the patches, runs every inherent relation layer and feeds each
/// layer's output through the shared head. Without cross-attention the
/// representations themselves seed the query stream.
inline SlptOutput slpt_forward(const Tensor& patch_features, const SlptParams& params,
                               const SlptConfig& cfg) {
  SlptOutput out;
  out.representations = embed_patches(patch_features, params, cfg);
  const std::size_t n = out.representations.dim(0);
  if (n != cfg.num_landmarks) {
    throw ContractError("slpt_forward: " + std::to_string(n) + " patches for N=" +
                        std::to_string(cfg.num_landmarks));
  }
  const Tensor& r = out.representations;
  Tensor t = cfg.use_mca ? Tensor::zeros({n, cfg.dim}) : r;
  bool t_is_zero = cfg.use_mca;
  for (const auto& lp : params.layers) {
    auto lo = inherent_relation_layer(t, t_is_zero, params.queries, r, params.structure, lp, cfg);
    t = lo.t;
    t_is_zero = false;
    if (lo.msa_weights.defined()) out.attention.msa.push_back(lo.msa_weights);
    if (lo.mca_weights.defined()) out.attention.mca.push_back(lo.mca_weights);
    out.local.push_back(prediction_head(t, params.head, cfg));
  }
  return out;
}

/// Cosine similarity between every pair of rows of P [N, C].
inline Tensor encoding_similarity(const Tensor& p) {
  if (p.ndim() != 2) throw DimensionError("encoding_similarity needs [N,C], got " + shape_str(p.shape()));
  const std::size_t n = p.dim(0), c = p.dim(1);
  const auto& v = p.values();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += v[i * c + k] * v[i * c + k];
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) throw NumericError("encoding_similarity: row " + std::to_string(i) + " has zero norm");
  }
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += v[i * c + k] * v[j * c + k];
      out[i * n + j] = out[j * n + i] = s / (norms[i] * norms[j]);
    }
  }
  return Tensor::from({n, n}, std::move(out));
}

}  // namespace slpt
