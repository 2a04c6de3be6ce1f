#pragma once

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitidle/engine.hpp"
#include "vitidle/errors.hpp"
#include "vitidle/token_idle.hpp"
#include "vitidle/vit.hpp"

namespace vitidle {

enum class RunMode { inference, finetune };

/// Per-layer record of one forward pass. Attention is kept only in finetune
/// mode (the full per-head maps feeding the cut loss); `scores` snapshots the
/// class-attention cache at selection time for the trace export.
template <class H>
struct LayerTraceT {
  std::size_t layer = 0;
  TokenPartition partition;
  H features{};
  std::vector<H> attention;
  bool full_attention = false;
  std::vector<double> scores;
};

template <class E>
struct ForwardResultT {
  typename E::Handle logits{};
  std::vector<LayerTraceT<typename E::Handle>> traces;
};

using LayerTrace = LayerTraceT<Tensor>;
using ForwardResult = ForwardResultT<EagerEngine>;

template <class E>
std::vector<Tensor> values_of(E& eng, const std::vector<typename E::Handle>& handles) {
  std::vector<Tensor> out;
  out.reserve(handles.size());
  for (const auto& h : handles) out.push_back(eng.value(h));
  return out;
}

/// Runs patch embedding and all transformer layers. Without a schedule this
/// is the plain backbone (every token participates, blocks applied directly).
/// With a schedule, layers delegate to the token-idle execution paths:
///   inference  - restricted MHSA/FFN over the selected rows, idle rows pass
///                through bit-identically;
///   finetune   - full-size attention, idle rows of each block output reset
///                to their inputs, full maps recorded for the cut loss.
/// Selection happens at the start of every layer from the previous layer's
/// class-attention scores.
template <class E>
ForwardResultT<E> vit_forward(E& eng, const Tensor& image,
                              const ModelParamsT<typename E::Handle>& params,
                              const ViTConfig& cfg, const KeepSchedule* schedule, RunMode mode) {
  cfg.validate();
  if (schedule != nullptr && schedule->num_layers != cfg.num_layers) {
    throw ContractError("vit_forward: schedule layer count differs from config");
  }
  if (mode == RunMode::finetune && schedule == nullptr) {
    throw ContractError("vit_forward: finetune mode requires a keep schedule");
  }

  const std::size_t n_tokens = cfg.num_tokens();
  const std::size_t n_img = cfg.num_image_tokens();
  ForwardResultT<E> result;
  auto x = patch_embed_h(eng, image, params, cfg);
  ScoreCache cache(n_img);

  std::vector<std::size_t> all_tokens = TokenPartition::all_selected(n_tokens).selected;

  for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
    LayerTraceT<typename E::Handle> trace;
    trace.layer = layer;
    trace.scores = cache.scores;

    const double ratio = schedule ? stage_keep_ratio(layer, *schedule) : 1.0;
    if (ratio >= 1.0) {
      trace.partition = TokenPartition::all_selected(n_tokens);
    } else {
      trace.partition = select_tokens(cache.checked_scores(), ratio, n_img);
    }

    if (schedule == nullptr) {
      // Vanilla backbone: no gather/scatter round trip.
      MhsaOut<E> block = transformer_block(eng, x, params.layers[layer], cfg);
      x = block.features;
      class_attention_scores(values_of(eng, block.attention), all_tokens, cache,
                             static_cast<int>(layer));
    } else if (mode == RunMode::inference) {
      IdleLayerOut<E> out =
          layer_forward_inference(eng, x, trace.partition, params.layers[layer], cfg);
      x = out.features;
      class_attention_scores(values_of(eng, out.attention), trace.partition.selected, cache,
                             static_cast<int>(layer));
    } else {
      IdleLayerOut<E> out =
          layer_forward_finetune(eng, x, trace.partition, params.layers[layer], cfg);
      x = out.features;
      class_attention_scores(values_of(eng, out.attention), all_tokens, cache,
                             static_cast<int>(layer));
      trace.attention = std::move(out.attention);
      trace.full_attention = true;
    }

    trace.features = x;
    result.traces.push_back(std::move(trace));
  }

  result.logits = classifier_head(eng, x, params);
  return result;
}

/// Eager forward with plain tensors in the result.
inline ForwardResult run_forward(const Tensor& image, const ModelParams& params,
                                 const ViTConfig& cfg, const KeepSchedule* schedule,
                                 RunMode mode) {
  EagerEngine eng;
  auto staged = stage_params(eng, params, cfg);
  return vit_forward(eng, image, staged, cfg, schedule, mode);
}

/// One JSON record per layer: layer index, selected indices and the
/// per-image-token scores the selection used.
template <class H>
void write_partition_trace_jsonl(const std::vector<LayerTraceT<H>>& traces, std::ostream& os) {
  for (const auto& t : traces) {
    nlohmann::json rec;
    rec["layer"] = t.layer;
    rec["selected"] = t.partition.selected;
    rec["scores"] = t.scores;
    os << rec.dump() << '\n';
  }
}

}  // namespace vitidle
