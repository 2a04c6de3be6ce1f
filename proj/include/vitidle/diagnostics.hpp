#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitidle/cut_loss.hpp"
#include "vitidle/dataset.hpp"
#include "vitidle/errors.hpp"
#include "vitidle/forward.hpp"
#include "vitidle/tensor.hpp"
#include "vitidle/token_idle.hpp"
#include "vitidle/vit.hpp"

namespace vitidle {

// ---------------------------------------------------------------------------
// Over-smoothing diagnostic: mean pairwise cosine similarity of image tokens.
// ---------------------------------------------------------------------------

/// Mean cosine similarity over unordered distinct pairs of the given token
/// rows. Zero-norm tokens contribute similarity 0.
inline double cosine_smoothness(const Tensor& tokens) {
  tokens.require_matrix();
  const std::size_t n = tokens.rows(), c = tokens.cols();
  if (n < 2) throw ContractError("cosine_smoothness: needs at least two tokens");
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += tokens.at(i, j) * tokens.at(i, j);
    norms[i] = std::sqrt(s);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (norms[i] == 0.0 || norms[j] == 0.0) continue;  // counts as 0
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += tokens.at(i, k) * tokens.at(j, k);
      total += dot / (norms[i] * norms[j]);
    }
  }
  return total / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

/// Image-token rows of a feature map (drops the class token at row 0).
inline Tensor image_token_rows(const Tensor& features) {
  std::vector<std::size_t> idx(features.rows() - 1);
  std::iota(idx.begin(), idx.end(), 1);
  return kernels::gather_rows(features, idx);
}

// ---------------------------------------------------------------------------
// Re-selection statistics
// ---------------------------------------------------------------------------

struct SelectionTrace {
  std::vector<std::vector<TokenPartition>> samples;  // [sample][layer]
  KeepSchedule schedule;
  std::size_t num_image_tokens = 0;
};

template <class H>
std::vector<TokenPartition> partitions_of(const std::vector<LayerTraceT<H>>& traces) {
  std::vector<TokenPartition> out;
  for (const auto& t : traces) out.push_back(t.partition);
  return out;
}

struct ReselectionStats {
  double p_a = 0.0;  // fraction of image tokens ever re-selected
  double p_r = 0.0;  // fraction re-selected and selected in the last layer
  double p_l = 0.0;  // fraction selected in the last layer
  double r_l = 0.0;  // p_r / p_l
};

/// A token is re-selected iff it is idle in at least one layer and selected
/// in some later layer. Fractions are means over samples.
inline ReselectionStats reselection_stats(const SelectionTrace& trace) {
  if (trace.samples.empty()) throw ContractError("reselection_stats: empty trace");
  const std::size_t n_img = trace.num_image_tokens;
  ReselectionStats st;
  for (const auto& layers : trace.samples) {
    if (layers.size() != trace.schedule.num_layers) {
      throw ContractError("reselection_stats: trace does not cover all layers");
    }
    std::size_t re = 0, re_last = 0, last = 0;
    for (std::size_t tok = 1; tok <= n_img; ++tok) {
      bool seen_idle = false, reselected = false;
      for (const TokenPartition& p : layers) {
        if (p.is_selected(tok)) {
          if (seen_idle) reselected = true;
        } else {
          seen_idle = true;
        }
      }
      const bool in_last = layers.back().is_selected(tok);
      re += reselected ? 1 : 0;
      re_last += (reselected && in_last) ? 1 : 0;
      last += in_last ? 1 : 0;
    }
    const double inv = 1.0 / static_cast<double>(n_img);
    st.p_a += static_cast<double>(re) * inv;
    st.p_r += static_cast<double>(re_last) * inv;
    st.p_l += static_cast<double>(last) * inv;
  }
  const double inv_s = 1.0 / static_cast<double>(trace.samples.size());
  st.p_a *= inv_s;
  st.p_r *= inv_s;
  st.p_l *= inv_s;
  st.r_l = st.p_l > 0.0 ? st.p_r / st.p_l : 0.0;
  return st;
}

// ---------------------------------------------------------------------------
// Hard-prune ablation: the comparison baseline. Tokens dropped at a stage
// transition are removed permanently; every surviving token participates in
// every layer (no skip-through).
// ---------------------------------------------------------------------------

struct HardPruneResult {
  std::vector<Tensor> per_layer_features;            // present rows, CLS first
  std::vector<std::vector<std::size_t>> survivors;   // image-token global indices per layer
};

inline HardPruneResult hard_prune_forward(const Tensor& image, const ModelParams& params,
                                          const ViTConfig& cfg, const KeepSchedule& schedule) {
  cfg.validate();
  if (schedule.num_layers != cfg.num_layers) {
    throw ContractError("hard_prune: schedule layer count differs from config");
  }
  EagerEngine eng;
  auto staged = stage_params(eng, params, cfg);
  Tensor x = patch_embed_h(eng, image, staged, cfg);

  std::vector<std::size_t> present(cfg.num_tokens());  // global indices, CLS included
  std::iota(present.begin(), present.end(), 0);
  ScoreCache cache(cfg.num_image_tokens());

  HardPruneResult result;
  for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
    const double ratio = stage_keep_ratio(layer, schedule);
    const std::size_t target = keep_count(ratio, cfg.num_image_tokens()) + 1;
    if (target < present.size()) {
      // Keep the top-scored survivors; dropped tokens never return.
      std::vector<std::size_t> img(present.begin() + 1, present.end());
      const auto& scores = cache.checked_scores();
      std::sort(img.begin(), img.end(), [&scores](std::size_t a, std::size_t b) {
        if (scores[a - 1] != scores[b - 1]) return scores[a - 1] > scores[b - 1];
        return a < b;
      });
      img.resize(target - 1);
      std::sort(img.begin(), img.end());
      std::vector<std::size_t> keep_positions;
      std::vector<std::size_t> new_present{0};
      keep_positions.push_back(0);
      for (std::size_t pos = 1; pos < present.size(); ++pos) {
        if (std::binary_search(img.begin(), img.end(), present[pos])) {
          keep_positions.push_back(pos);
          new_present.push_back(present[pos]);
        }
      }
      x = kernels::gather_rows(x, keep_positions);
      present = std::move(new_present);
    }
    MhsaOut<EagerEngine> block = transformer_block(eng, x, staged.layers[layer], cfg);
    x = block.features;
    class_attention_scores(block.attention, present, cache, static_cast<int>(layer));
    result.per_layer_features.push_back(x);
    result.survivors.emplace_back(present.begin() + 1, present.end());
  }
  return result;
}

// ---------------------------------------------------------------------------
// PGM export (binary P5, 8-bit, linear value mapping)
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) throw ContractError("pgm: pixel count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("pgm: cannot open for write: " + path);
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
  if (!os) throw ContractError("pgm: write failure: " + path);
}

inline std::uint8_t linear_byte(double v, double lo, double hi) {
  if (hi <= lo) return 0;
  const double t = (v - lo) / (hi - lo);
  return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
}

/// Heat map of a head-averaged attention matrix with rows and columns
/// permuted by descending class-attention score (class token pinned first,
/// ties keep the lower token index).
inline void export_attention_heatmap(const Tensor& attention, const std::vector<double>& scores,
                                     const std::string& path) {
  attention.require_matrix();
  const std::size_t n = attention.rows();
  if (attention.cols() != n) throw ContractError("heatmap: attention must be square");
  if (scores.size() != n - 1) throw ContractError("heatmap: score count mismatch");
  std::vector<std::size_t> perm{0};
  std::vector<std::size_t> img(n - 1);
  std::iota(img.begin(), img.end(), 1);
  std::sort(img.begin(), img.end(), [&scores](std::size_t a, std::size_t b) {
    if (scores[a - 1] != scores[b - 1]) return scores[a - 1] > scores[b - 1];
    return a < b;
  });
  perm.insert(perm.end(), img.begin(), img.end());
  double lo = attention.data[0], hi = attention.data[0];
  for (double v : attention.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<std::uint8_t> pixels(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      pixels[i * n + j] = linear_byte(attention.at(perm[i], perm[j]), lo, hi);
    }
  }
  write_pgm(path, n, n, pixels);
}

/// Per-layer patch-grid bitmaps: selected patches white, idle black.
/// Files are named <prefix>layer_XX_mask.pgm inside `dir`.
inline std::vector<std::string> export_selection_masks(
    const std::vector<TokenPartition>& partitions, const ViTConfig& cfg, const std::string& dir,
    const std::string& prefix = "") {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::size_t g = cfg.grid();
  std::vector<std::string> paths;
  for (std::size_t layer = 0; layer < partitions.size(); ++layer) {
    partitions[layer].validate(cfg.num_tokens());
    std::vector<std::uint8_t> pixels(g * g, 0);
    for (std::size_t tok : partitions[layer].selected) {
      if (tok == 0) continue;
      pixels[tok - 1] = 255;
    }
    const std::string path =
        (fs::path(dir) / (prefix + "layer_" + pad2(layer) + "_mask.pgm")).string();
    write_pgm(path, g, g, pixels);
    paths.push_back(path);
  }
  return paths;
}

// ---------------------------------------------------------------------------
// Combined diagnostics over a dataset
// ---------------------------------------------------------------------------

struct DiagnoseResult {
  std::vector<double> cosine_idle;        // per layer, mean over samples
  std::vector<double> cosine_hard_prune;  // per layer, mean over samples
  ReselectionStats reselection;
  double oversmoothing_win_fraction = 0.0;  // idle <= hard-prune at final layer
  double mean_final_cosine_idle = 0.0;
  double mean_final_cosine_hard_prune = 0.0;
};

inline DiagnoseResult run_diagnostics(const ModelParams& params, const ViTConfig& cfg,
                                      const KeepSchedule& schedule, const SyntheticDataset& ds) {
  if (ds.size() == 0) throw ContractError("diagnostics: empty dataset");
  DiagnoseResult out;
  out.cosine_idle.assign(cfg.num_layers, 0.0);
  out.cosine_hard_prune.assign(cfg.num_layers, 0.0);
  SelectionTrace strace;
  strace.schedule = schedule;
  strace.num_image_tokens = cfg.num_image_tokens();
  std::size_t wins = 0;

  for (std::size_t i = 0; i < ds.size(); ++i) {
    ForwardResult fwd = run_forward(ds.images[i], params, cfg, &schedule, RunMode::inference);
    strace.samples.push_back(partitions_of(fwd.traces));
    double idle_final = 0.0;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const double cs = cosine_smoothness(image_token_rows(fwd.traces[l].features));
      out.cosine_idle[l] += cs;
      if (l + 1 == cfg.num_layers) idle_final = cs;
    }
    HardPruneResult hp = hard_prune_forward(ds.images[i], params, cfg, schedule);
    double hp_final = 0.0;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const double cs = cosine_smoothness(image_token_rows(hp.per_layer_features[l]));
      out.cosine_hard_prune[l] += cs;
      if (l + 1 == cfg.num_layers) hp_final = cs;
    }
    out.mean_final_cosine_idle += idle_final;
    out.mean_final_cosine_hard_prune += hp_final;
    if (idle_final <= hp_final) ++wins;
  }

  const double inv = 1.0 / static_cast<double>(ds.size());
  for (double& v : out.cosine_idle) v *= inv;
  for (double& v : out.cosine_hard_prune) v *= inv;
  out.mean_final_cosine_idle *= inv;
  out.mean_final_cosine_hard_prune *= inv;
  out.oversmoothing_win_fraction = static_cast<double>(wins) * inv;
  out.reselection = reselection_stats(strace);
  return out;
}

inline std::string diagnose_cosine_csv(const DiagnoseResult& r) {
  std::ostringstream os;
  os << "layer,cosine_idle,cosine_hard_prune\n";
  for (std::size_t l = 0; l < r.cosine_idle.size(); ++l) {
    os << l << ',' << r.cosine_idle[l] << ',' << r.cosine_hard_prune[l] << '\n';
  }
  return os.str();
}

inline nlohmann::json reselection_json(const ReselectionStats& st) {
  return nlohmann::json{{"P_A", st.p_a}, {"P_R", st.p_r}, {"P_L", st.p_l}, {"R_L", st.r_l}};
}

inline nlohmann::json oversmoothing_json(const DiagnoseResult& r) {
  return nlohmann::json{{"win_fraction", r.oversmoothing_win_fraction},
                        {"mean_final_cosine_idle", r.mean_final_cosine_idle},
                        {"mean_final_cosine_hard_prune", r.mean_final_cosine_hard_prune}};
}

}  // namespace vitidle
