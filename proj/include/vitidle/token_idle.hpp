#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "vitidle/errors.hpp"
#include "vitidle/tensor.hpp"
#include "vitidle/vit.hpp"

namespace vitidle {

// ---------------------------------------------------------------------------
// Keep schedule: base ratio k, per-layer ratio k^(i-1) for the layer's stage.
// ---------------------------------------------------------------------------

/// Splits L layers into `stages` groups whose sizes differ by at most one,
/// larger groups first.
inline std::vector<std::size_t> stage_sizes(std::size_t num_layers, std::size_t num_stages) {
  if (num_stages == 0) throw ContractError("schedule: num_stages must be positive");
  std::vector<std::size_t> sizes(num_stages, num_layers / num_stages);
  for (std::size_t i = 0; i < num_layers % num_stages; ++i) sizes[i] += 1;
  return sizes;
}

struct KeepSchedule {
  double base_ratio = 1.0;
  std::size_t num_layers = 0;
  std::size_t num_stages = 4;
  std::vector<double> layer_ratios;

  static KeepSchedule make(double k, std::size_t num_layers, std::size_t num_stages = 4) {
    if (!(k > 0.0) || k > 1.0) throw ContractError("schedule: base ratio must be in (0, 1]");
    if (num_layers == 0) throw ContractError("schedule: num_layers must be positive");
    KeepSchedule s;
    s.base_ratio = k;
    s.num_layers = num_layers;
    s.num_stages = num_stages;
    const std::vector<std::size_t> sizes = stage_sizes(num_layers, num_stages);
    for (std::size_t stage = 0; stage < sizes.size(); ++stage) {
      const double ratio = std::pow(k, static_cast<double>(stage));
      for (std::size_t i = 0; i < sizes[stage]; ++i) s.layer_ratios.push_back(ratio);
    }
    return s;
  }
};

inline double stage_keep_ratio(std::size_t layer, const KeepSchedule& s) {
  if (layer >= s.num_layers) throw ContractError("schedule: layer index out of range");
  return s.layer_ratios[layer];
}

// ---------------------------------------------------------------------------
// Token partition: global token indices, [CLS] = 0 always selected.
// ---------------------------------------------------------------------------

struct TokenPartition {
  std::vector<std::size_t> selected;  // sorted, always contains 0
  std::vector<std::size_t> idle;      // sorted

  std::size_t num_tokens() const { return selected.size() + idle.size(); }

  bool is_selected(std::size_t token) const {
    return std::binary_search(selected.begin(), selected.end(), token);
  }

  static TokenPartition all_selected(std::size_t num_tokens) {
    TokenPartition p;
    p.selected.resize(num_tokens);
    std::iota(p.selected.begin(), p.selected.end(), 0);
    return p;
  }

  void validate(std::size_t num_tokens_expected) const {
    if (num_tokens() != num_tokens_expected) {
      throw ContractError("partition: token count mismatch");
    }
    if (selected.empty() || selected.front() != 0) {
      throw ContractError("partition: class token must be selected");
    }
    std::vector<bool> seen(num_tokens_expected, false);
    for (const auto* set : {&selected, &idle}) {
      for (std::size_t i = 0; i < set->size(); ++i) {
        const std::size_t v = (*set)[i];
        if (v >= num_tokens_expected) throw ContractError("partition: index out of range");
        if (seen[v]) throw ContractError("partition: sets overlap or repeat");
        seen[v] = true;
        if (i > 0 && (*set)[i - 1] >= v) throw ContractError("partition: sets must be sorted");
      }
    }
  }
};

/// Number of image tokens kept at the given ratio.
inline std::size_t keep_count(double ratio, std::size_t num_image_tokens) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(num_image_tokens)));
}

/// Top-K image tokens by score plus the class token; ties keep the lower
/// token index. Scores are indexed by image token (global index minus one).
inline TokenPartition select_tokens(const std::vector<double>& scores, double ratio,
                                    std::size_t num_image_tokens) {
  if (!(ratio > 0.0) || ratio > 1.0) throw ContractError("select_tokens: ratio must be in (0, 1]");
  if (scores.size() != num_image_tokens) {
    throw ContractError("select_tokens: score count mismatch");
  }
  const std::size_t k = keep_count(ratio, num_image_tokens);
  if (k == 0) throw ContractError("select_tokens: schedule would empty the selected set");
  std::vector<std::size_t> order(num_image_tokens);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  TokenPartition p;
  p.selected.push_back(0);
  for (std::size_t i = 0; i < k; ++i) p.selected.push_back(order[i] + 1);
  for (std::size_t i = k; i < num_image_tokens; ++i) p.idle.push_back(order[i] + 1);
  std::sort(p.selected.begin(), p.selected.end());
  std::sort(p.idle.begin(), p.idle.end());
  return p;
}

// ---------------------------------------------------------------------------
// Class-attention score cache. Restricted inference only produces attention
// over the participating tokens, so idle tokens keep the score from the last
// layer in which they took part; stage 1 runs at ratio 1 and initializes
// every entry.
// ---------------------------------------------------------------------------

struct ScoreCache {
  std::vector<double> scores;    // per image token
  std::vector<int> last_update;  // layer index of last refresh, -1 = never

  explicit ScoreCache(std::size_t num_image_tokens = 0)
      : scores(num_image_tokens, 0.0), last_update(num_image_tokens, -1) {}

  bool initialized() const {
    return std::all_of(last_update.begin(), last_update.end(), [](int v) { return v >= 0; });
  }

  const std::vector<double>& checked_scores() const {
    if (!initialized()) {
      throw ContractError("score cache: idle token has no score before the first full layer");
    }
    return scores;
  }
};

/// Refreshes the cache from the class-token attention row. `covered` lists
/// the global token index of each attention row/column; tokens outside
/// `covered` retain their cached score. The score is the arithmetic mean over
/// heads of the class row entry.
inline void class_attention_scores(const std::vector<Tensor>& head_attention,
                                   const std::vector<std::size_t>& covered, ScoreCache& cache,
                                   int layer) {
  if (head_attention.empty()) throw ContractError("class_attention_scores: no attention maps");
  const std::size_t n = covered.size();
  for (const Tensor& a : head_attention) {
    if (a.rows() != n || a.cols() != n) {
      throw ShapeError("class_attention_scores: attention extent mismatch");
    }
  }
  if (n == 0 || covered[0] != 0) {
    throw ContractError("class_attention_scores: class token must be covered");
  }
  const double inv_heads = 1.0 / static_cast<double>(head_attention.size());
  for (std::size_t j = 1; j < n; ++j) {
    double s = 0.0;
    for (const Tensor& a : head_attention) s += a.at(0, j);
    const std::size_t image_token = covered[j] - 1;
    cache.scores[image_token] = s * inv_heads;
    cache.last_update[image_token] = layer;
  }
}

// ---------------------------------------------------------------------------
// Idle skip-through execution
// ---------------------------------------------------------------------------

/// Scatters the processed selected rows and untouched idle rows back to their
/// original positions.
inline Tensor idle_concat(const Tensor& selected_out, const Tensor& idle_in,
                          const TokenPartition& partition) {
  if (selected_out.rows() != partition.selected.size() ||
      (partition.idle.empty() ? false : idle_in.rows() != partition.idle.size()) ||
      (!partition.idle.empty() && idle_in.cols() != selected_out.cols())) {
    throw ShapeError("idle_concat: extents do not match partition");
  }
  Tensor out({partition.num_tokens(), selected_out.cols()});
  for (std::size_t i = 0; i < partition.selected.size(); ++i) {
    std::copy_n(&selected_out.data[i * out.cols()], out.cols(),
                &out.data[partition.selected[i] * out.cols()]);
  }
  for (std::size_t i = 0; i < partition.idle.size(); ++i) {
    std::copy_n(&idle_in.data[i * out.cols()], out.cols(),
                &out.data[partition.idle[i] * out.cols()]);
  }
  return out;
}

template <class E>
struct IdleLayerOut {
  typename E::Handle features;
  std::vector<typename E::Handle> attention;  // per head; restricted or full
};

/// Restricted execution: MHSA and FFN run only over the selected rows, idle
/// rows of the output are bit-identical to the input. The returned attention
/// covers partition.selected in order.
template <class E>
IdleLayerOut<E> layer_forward_inference(E& eng, typename E::Handle x,
                                        const TokenPartition& partition,
                                        const LayerParamsT<typename E::Handle>& lp,
                                        const ViTConfig& cfg) {
  partition.validate(eng.value(x).rows());
  auto xs = eng.gather_rows(x, partition.selected);
  MhsaOut<E> block = transformer_block(eng, xs, lp, cfg);
  IdleLayerOut<E> out;
  out.features = eng.scatter_rows(x, block.features, partition.selected);
  out.attention = std::move(block.attention);
  return out;
}

/// Finetuning execution: attention and FFN run over all tokens so the full
/// attention map exists, then idle rows of the block output are reset to the
/// input rows. The returned attention is the full N x N map per head.
template <class E>
IdleLayerOut<E> layer_forward_finetune(E& eng, typename E::Handle x,
                                       const TokenPartition& partition,
                                       const LayerParamsT<typename E::Handle>& lp,
                                       const ViTConfig& cfg) {
  partition.validate(eng.value(x).rows());
  MhsaOut<E> block = transformer_block(eng, x, lp, cfg);
  IdleLayerOut<E> out;
  auto kept = eng.gather_rows(block.features, partition.selected);
  out.features = eng.scatter_rows(x, kept, partition.selected);
  out.attention = std::move(block.attention);
  return out;
}

}  // namespace vitidle
