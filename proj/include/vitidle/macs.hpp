#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitidle/errors.hpp"
#include "vitidle/token_idle.hpp"
#include "vitidle/vit.hpp"

namespace vitidle {

// Analytic multiply-accumulate accounting. Only matrix products are counted
// (the dominant GMACs convention): biases, norms, softmax and activations are
// excluded.

struct LayerMacs {
  std::uint64_t qkv = 0;
  std::uint64_t attn_logits = 0;
  std::uint64_t attn_apply = 0;
  std::uint64_t out_proj = 0;
  std::uint64_t ffn = 0;

  std::uint64_t total() const { return qkv + attn_logits + attn_apply + out_proj + ffn; }
};

/// Per-layer counts with n participating tokens:
/// qkv 3nC^2, logits n^2 C, weighted sum n^2 C, projection nC^2, ffn 2r nC^2.
inline LayerMacs layer_macs(std::uint64_t n, std::uint64_t embed_dim, std::uint64_t ffn_ratio) {
  if (n == 0) throw ContractError("layer_macs: token count must be positive");
  const std::uint64_t c2 = embed_dim * embed_dim;
  LayerMacs m;
  m.qkv = 3 * n * c2;
  m.attn_logits = n * n * embed_dim;
  m.attn_apply = n * n * embed_dim;
  m.out_proj = n * c2;
  m.ffn = 2 * ffn_ratio * n * c2;
  return m;
}

struct MacsReport {
  double keep_ratio = 1.0;
  std::vector<LayerMacs> layers;
  std::uint64_t patch_embed = 0;
  std::uint64_t classifier = 0;
  std::uint64_t total = 0;
  std::vector<std::size_t> tokens_per_layer;
};

/// Whole-model count under a keep schedule. Linear maps (QKV, projection,
/// FFN) run at the participating count floor(k^(i-1) * N_img) + 1; the two
/// attention matrix products are counted at the full token count every layer
/// since idle tokens stay addressable in the attention map. At k = 1 this
/// coincides exactly with L * layer_macs(N).
inline MacsReport model_macs(const ViTConfig& cfg, const KeepSchedule& schedule) {
  cfg.validate();
  if (schedule.num_layers != cfg.num_layers) {
    throw ContractError("model_macs: schedule layer count differs from config");
  }
  const std::uint64_t c = cfg.embed_dim;
  const std::uint64_t n_full = cfg.num_tokens();
  MacsReport report;
  report.keep_ratio = schedule.base_ratio;
  report.patch_embed = static_cast<std::uint64_t>(cfg.num_image_tokens()) * cfg.patch_dim() * c;
  report.classifier = c * cfg.num_classes;
  report.total = report.patch_embed + report.classifier;
  for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
    const double ratio = stage_keep_ratio(layer, schedule);
    const std::uint64_t n = keep_count(ratio, cfg.num_image_tokens()) + 1;
    LayerMacs m = layer_macs(n, c, cfg.ffn_ratio);
    m.attn_logits = n_full * n_full * c;
    m.attn_apply = n_full * n_full * c;
    report.layers.push_back(m);
    report.tokens_per_layer.push_back(n);
    report.total += m.total();
  }
  return report;
}

inline nlohmann::json macs_report_json(const MacsReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    const LayerMacs& m = r.layers[i];
    layers.push_back({{"layer", i},
                      {"tokens", r.tokens_per_layer[i]},
                      {"qkv", m.qkv},
                      {"attn_logits", m.attn_logits},
                      {"attn_apply", m.attn_apply},
                      {"out_proj", m.out_proj},
                      {"ffn", m.ffn},
                      {"total", m.total()}});
  }
  return nlohmann::json{{"keep_ratio", r.keep_ratio},
                        {"patch_embed", r.patch_embed},
                        {"classifier", r.classifier},
                        {"layers", layers},
                        {"total", r.total},
                        {"gmacs", static_cast<double>(r.total) / 1e9}};
}

/// Aligned sweep over base keep ratios, with the reduction against k = 1.
inline std::string macs_table(const ViTConfig& cfg, const std::vector<double>& ratios) {
  const double base =
      static_cast<double>(model_macs(cfg, KeepSchedule::make(1.0, cfg.num_layers)).total);
  std::ostringstream os;
  os << "keep ratio    GMACs    reduction\n";
  for (double k : ratios) {
    const MacsReport r = model_macs(cfg, KeepSchedule::make(k, cfg.num_layers));
    const double g = static_cast<double>(r.total) / 1e9;
    const double red = (static_cast<double>(r.total) / base - 1.0) * 100.0;
    os << std::left << std::setw(14) << k << std::setw(9) << std::fixed << std::setprecision(3)
       << g << std::showpos << std::setprecision(1) << red << "%" << std::noshowpos << '\n';
    os.unsetf(std::ios::fixed);
    os << std::setprecision(6);
  }
  return os.str();
}

}  // namespace vitidle
