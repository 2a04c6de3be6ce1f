#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vitidle/engine.hpp"
#include "vitidle/errors.hpp"
#include "vitidle/rng.hpp"
#include "vitidle/tensor.hpp"

namespace vitidle {

inline constexpr double kLayerNormEps = 1e-6;

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels_in = 1;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t num_layers = 8;
  std::size_t ffn_ratio = 4;
  std::size_t num_classes = 4;

  void validate() const {
    if (image_size == 0 || patch_size == 0 || channels_in == 0 || embed_dim == 0 ||
        num_heads == 0 || num_layers == 0 || ffn_ratio == 0 || num_classes == 0) {
      throw ContractError("config: all extents must be positive");
    }
    if (image_size % patch_size != 0) {
      throw ContractError("config: image_size must be divisible by patch_size");
    }
    if (embed_dim % num_heads != 0) {
      throw ContractError("config: embed_dim must be divisible by num_heads");
    }
  }

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_image_tokens() const { return grid() * grid(); }
  std::size_t num_tokens() const { return num_image_tokens() + 1; }  // + [CLS]
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels_in; }
  double attn_scale() const { return std::sqrt(static_cast<double>(head_dim())); }
};

/// Per-layer parameters. T is Tensor for storage, or an engine handle once
/// staged onto an engine. Attention weights are stored per head: wq/wk/wv are
/// C-by-d_head slices, wo holds the d_head-by-C row blocks of the output
/// projection (summing the per-head products equals the concat-then-project
/// form).
template <class T>
struct LayerParamsT {
  std::vector<T> wq, wk, wv;  // H entries, C x d_head
  std::vector<T> bq, bk, bv;  // H entries, 1 x d_head
  std::vector<T> wo;          // H entries, d_head x C
  T bo;                       // 1 x C
  T ln1_gamma, ln1_beta;      // 1 x C
  T ln2_gamma, ln2_beta;      // 1 x C
  T ffn_w1, ffn_b1;           // C x rC, 1 x rC
  T ffn_w2, ffn_b2;           // rC x C, 1 x C
};

template <class T>
struct ModelParamsT {
  T patch_weight;  // patch_dim x C
  T patch_bias;    // 1 x C
  T cls_token;     // 1 x C
  T pos_embed;     // N x C
  std::vector<LayerParamsT<T>> layers;
  T head_gamma, head_beta;  // 1 x C
  T head_weight;            // C x num_classes
  T head_bias;              // 1 x num_classes
};

using LayerParams = LayerParamsT<Tensor>;
using ModelParams = ModelParamsT<Tensor>;

inline std::string pad2(std::size_t v) {
  std::string s = std::to_string(v);
  return s.size() < 2 ? "0" + s : s;
}

/// Visits every parameter in a fixed order with a stable name. The order is
/// the contract for checkpoints, staging and optimizer state.
template <class T, class F>
void for_each_param(ModelParamsT<T>& p, F&& f) {
  f("patch.weight", p.patch_weight);
  f("patch.bias", p.patch_bias);
  f("cls_token", p.cls_token);
  f("pos_embed", p.pos_embed);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    LayerParamsT<T>& lp = p.layers[l];
    const std::string prefix = "layer" + pad2(l) + ".";
    for (std::size_t h = 0; h < lp.wq.size(); ++h) {
      const std::string hs = std::to_string(h);
      f(prefix + "attn.wq" + hs, lp.wq[h]);
      f(prefix + "attn.bq" + hs, lp.bq[h]);
      f(prefix + "attn.wk" + hs, lp.wk[h]);
      f(prefix + "attn.bk" + hs, lp.bk[h]);
      f(prefix + "attn.wv" + hs, lp.wv[h]);
      f(prefix + "attn.bv" + hs, lp.bv[h]);
      f(prefix + "attn.wo" + hs, lp.wo[h]);
    }
    f(prefix + "attn.bo", lp.bo);
    f(prefix + "ln1.gamma", lp.ln1_gamma);
    f(prefix + "ln1.beta", lp.ln1_beta);
    f(prefix + "ln2.gamma", lp.ln2_gamma);
    f(prefix + "ln2.beta", lp.ln2_beta);
    f(prefix + "ffn.w1", lp.ffn_w1);
    f(prefix + "ffn.b1", lp.ffn_b1);
    f(prefix + "ffn.w2", lp.ffn_w2);
    f(prefix + "ffn.b2", lp.ffn_b2);
  }
  f("head.gamma", p.head_gamma);
  f("head.beta", p.head_beta);
  f("head.weight", p.head_weight);
  f("head.bias", p.head_bias);
}

template <class T, class F>
void for_each_param(const ModelParamsT<T>& p, F&& f) {
  for_each_param(const_cast<ModelParamsT<T>&>(p),
                 [&f](const std::string& n, T& t) { f(n, static_cast<const T&>(t)); });
}

/// Allocates a parameter set with the extents implied by the config,
/// zero-filled (T = Tensor) or default-constructed handles.
template <class T>
ModelParamsT<T> param_shape(const ViTConfig& cfg) {
  ModelParamsT<T> p;
  p.layers.resize(cfg.num_layers);
  for (auto& lp : p.layers) {
    lp.wq.resize(cfg.num_heads);
    lp.wk.resize(cfg.num_heads);
    lp.wv.resize(cfg.num_heads);
    lp.bq.resize(cfg.num_heads);
    lp.bk.resize(cfg.num_heads);
    lp.bv.resize(cfg.num_heads);
    lp.wo.resize(cfg.num_heads);
  }
  return p;
}

/// Truncated-normal initialization (DeiT-style 0.02 scale), zero biases,
/// unit LayerNorm gains.
inline ModelParams init_params(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t c = cfg.embed_dim;
  const std::size_t dh = cfg.head_dim();
  const std::size_t rc = cfg.ffn_ratio * c;
  Rng rng(seed);
  auto randm = [&rng](std::size_t r, std::size_t cc) {
    Tensor t({r, cc});
    for (double& v : t.data) v = rng.trunc_normal(0.02);
    return t;
  };
  ModelParams p = param_shape<Tensor>(cfg);
  p.patch_weight = randm(cfg.patch_dim(), c);
  p.patch_bias = Tensor::matrix(1, c);
  p.cls_token = randm(1, c);
  p.pos_embed = randm(cfg.num_tokens(), c);
  for (auto& lp : p.layers) {
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      lp.wq[h] = randm(c, dh);
      lp.wk[h] = randm(c, dh);
      lp.wv[h] = randm(c, dh);
      lp.bq[h] = Tensor::matrix(1, dh);
      lp.bk[h] = Tensor::matrix(1, dh);
      lp.bv[h] = Tensor::matrix(1, dh);
      lp.wo[h] = randm(dh, c);
    }
    lp.bo = Tensor::matrix(1, c);
    lp.ln1_gamma = Tensor::matrix(1, c, 1.0);
    lp.ln1_beta = Tensor::matrix(1, c);
    lp.ln2_gamma = Tensor::matrix(1, c, 1.0);
    lp.ln2_beta = Tensor::matrix(1, c);
    lp.ffn_w1 = randm(c, rc);
    lp.ffn_b1 = Tensor::matrix(1, rc);
    lp.ffn_w2 = randm(rc, c);
    lp.ffn_b2 = Tensor::matrix(1, c);
  }
  p.head_gamma = Tensor::matrix(1, c, 1.0);
  p.head_beta = Tensor::matrix(1, c);
  p.head_weight = randm(c, cfg.num_classes);
  p.head_bias = Tensor::matrix(1, cfg.num_classes);
  return p;
}

inline void validate_params(ModelParams& p, const ViTConfig& cfg) {
  cfg.validate();
  // Extents checked against a freshly initialized reference, plus finiteness.
  std::vector<std::pair<std::string, Tensor*>> got, want;
  for_each_param(p, [&](const std::string& n, Tensor& t) { got.emplace_back(n, &t); });
  ModelParams expect = init_params(cfg, 0);
  for_each_param(expect, [&](const std::string& n, Tensor& t) { want.emplace_back(n, &t); });
  if (got.size() != want.size()) throw ContractError("params: parameter count mismatch");
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (got[i].first != want[i].first) throw ContractError("params: name mismatch at " + got[i].first);
    if (got[i].second->dims != want[i].second->dims) {
      throw ContractError("params: extent mismatch at " + got[i].first);
    }
    if (!got[i].second->all_finite()) {
      throw ContractError("params: non-finite values at " + got[i].first);
    }
  }
}

/// Registers every parameter tensor as an engine input, preserving order.
template <class E>
ModelParamsT<typename E::Handle> stage_params(E& eng, const ModelParams& src,
                                              const ViTConfig& cfg) {
  ModelParamsT<typename E::Handle> dst = param_shape<typename E::Handle>(cfg);
  std::vector<const Tensor*> sp;
  std::vector<typename E::Handle*> dp;
  for_each_param(src, [&](const std::string&, const Tensor& t) { sp.push_back(&t); });
  for_each_param(dst, [&](const std::string&, typename E::Handle& h) { dp.push_back(&h); });
  for (std::size_t i = 0; i < sp.size(); ++i) *dp[i] = eng.input(*sp[i]);
  return dst;
}

// ---------------------------------------------------------------------------
// Patch embedding
// ---------------------------------------------------------------------------

/// Flattens non-overlapping patches of an image_size x image_size x channels
/// grid into an (N-1) x patch_dim matrix, row-major over the patch grid.
inline Tensor extract_patches(const Tensor& image, const ViTConfig& cfg) {
  if (image.dims != std::vector<std::size_t>{cfg.image_size, cfg.image_size, cfg.channels_in}) {
    throw ShapeError("patch_embed: image extents do not match config");
  }
  const std::size_t g = cfg.grid(), ps = cfg.patch_size, ch = cfg.channels_in;
  Tensor out({g * g, cfg.patch_dim()});
  for (std::size_t py = 0; py < g; ++py) {
    for (std::size_t px = 0; px < g; ++px) {
      double* row = &out.data[(py * g + px) * cfg.patch_dim()];
      std::size_t k = 0;
      for (std::size_t y = 0; y < ps; ++y) {
        for (std::size_t x = 0; x < ps; ++x) {
          for (std::size_t c = 0; c < ch; ++c) {
            row[k++] = image.data[((py * ps + y) * cfg.image_size + (px * ps + x)) * ch + c];
          }
        }
      }
    }
  }
  return out;
}

/// Patch projection, class token at row 0, positional embeddings added.
template <class E>
typename E::Handle patch_embed_h(E& eng, const Tensor& image,
                                 const ModelParamsT<typename E::Handle>& p,
                                 const ViTConfig& cfg) {
  auto patches = eng.constant(extract_patches(image, cfg));
  auto tokens = eng.add_row(eng.matmul(patches, p.patch_weight), p.patch_bias);
  auto x = eng.concat_rows(p.cls_token, tokens);
  return eng.add(x, p.pos_embed);
}

/// Eager convenience used by tests and diagnostics.
inline Tensor patch_embed(const Tensor& image, const ModelParams& params, const ViTConfig& cfg) {
  EagerEngine eng;
  auto staged = stage_params(eng, params, cfg);
  return patch_embed_h(eng, image, staged, cfg);
}

// ---------------------------------------------------------------------------
// Transformer blocks (pre-norm)
// ---------------------------------------------------------------------------

template <class E>
struct MhsaOut {
  typename E::Handle features;
  std::vector<typename E::Handle> attention;  // one row-stochastic map per head
};

/// Pre-norm multi-head self-attention with residual connection over the
/// participating rows of x.
template <class E>
MhsaOut<E> mhsa_block(E& eng, typename E::Handle x, const LayerParamsT<typename E::Handle>& lp,
                      const ViTConfig& cfg) {
  const double scale = cfg.attn_scale();
  auto xn = eng.layer_norm(x, lp.ln1_gamma, lp.ln1_beta, kLayerNormEps);
  MhsaOut<E> out;
  typename E::Handle proj{};
  bool first = true;
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    auto q = eng.add_row(eng.matmul(xn, lp.wq[h]), lp.bq[h]);
    auto k = eng.add_row(eng.matmul(xn, lp.wk[h]), lp.bk[h]);
    auto v = eng.add_row(eng.matmul(xn, lp.wv[h]), lp.bv[h]);
    auto attn = eng.row_softmax(eng.matmul(q, eng.transpose(k)), scale);
    out.attention.push_back(attn);
    auto head_out = eng.matmul(eng.matmul(attn, v), lp.wo[h]);
    proj = first ? head_out : eng.add(proj, head_out);
    first = false;
  }
  proj = eng.add_row(proj, lp.bo);
  out.features = eng.add(x, proj);
  return out;
}

/// Pre-norm feed-forward block with residual connection; rows are independent.
template <class E>
typename E::Handle ffn_block(E& eng, typename E::Handle x,
                             const LayerParamsT<typename E::Handle>& lp) {
  auto y = eng.layer_norm(x, lp.ln2_gamma, lp.ln2_beta, kLayerNormEps);
  auto hidden = eng.gelu(eng.add_row(eng.matmul(y, lp.ffn_w1), lp.ffn_b1));
  auto o = eng.add_row(eng.matmul(hidden, lp.ffn_w2), lp.ffn_b2);
  return eng.add(x, o);
}

template <class E>
MhsaOut<E> transformer_block(E& eng, typename E::Handle x,
                             const LayerParamsT<typename E::Handle>& lp, const ViTConfig& cfg) {
  MhsaOut<E> attn = mhsa_block(eng, x, lp, cfg);
  attn.features = ffn_block(eng, attn.features, lp);
  return attn;
}

/// Eager single-layer MHSA on the given feature rows: returns the residual
/// output and the per-head attention maps.
inline std::pair<Tensor, std::vector<Tensor>> mhsa(const Tensor& x, const LayerParams& lp,
                                                   const ViTConfig& cfg) {
  EagerEngine eng;
  auto out = mhsa_block(eng, x, lp, cfg);
  return {out.features, out.attention};
}

inline Tensor ffn(const Tensor& x, const LayerParams& lp) {
  EagerEngine eng;
  return ffn_block(eng, x, lp);
}

// ---------------------------------------------------------------------------
// Classification head: LayerNorm then linear map of the class token.
// ---------------------------------------------------------------------------

template <class E>
typename E::Handle classifier_head(E& eng, typename E::Handle features,
                                   const ModelParamsT<typename E::Handle>& p) {
  auto cls = eng.gather_rows(features, {0});
  auto normed = eng.layer_norm(cls, p.head_gamma, p.head_beta, kLayerNormEps);
  return eng.add_row(eng.matmul(normed, p.head_weight), p.head_bias);
}

}  // namespace vitidle
