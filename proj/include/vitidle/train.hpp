#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitidle/checkpoint.hpp"
#include "vitidle/cut_loss.hpp"
#include "vitidle/dataset.hpp"
#include "vitidle/engine.hpp"
#include "vitidle/errors.hpp"
#include "vitidle/forward.hpp"
#include "vitidle/losses.hpp"
#include "vitidle/rng.hpp"
#include "vitidle/token_idle.hpp"
#include "vitidle/vit.hpp"

namespace vitidle {

inline constexpr double kMomentum = 0.9;

struct TrainConfig {
  ViTConfig model;
  double base_ratio = 1.0;
  std::size_t num_stages = 4;
  LossWeights weights;
  double learning_rate = 1e-3;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  std::string teacher_checkpoint;
  std::string data_dir;         // empty: generate from seed/data_count
  std::size_t data_count = 256;

  void validate() const {
    model.validate();
    weights.validate();
    if (!(learning_rate > 0.0)) throw ContractError("train config: learning rate must be positive");
    if (epochs == 0 || batch_size == 0) {
      throw ContractError("train config: epochs and batch size must be positive");
    }
    KeepSchedule::make(base_ratio, model.num_layers, num_stages);  // ratio/stage validity
  }

  KeepSchedule schedule() const {
    return KeepSchedule::make(base_ratio, model.num_layers, num_stages);
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"model", config_to_json(c.model)},
                        {"keep", {{"base_ratio", c.base_ratio}, {"num_stages", c.num_stages}}},
                        {"loss_weights",
                         {{"alpha", c.weights.alpha},
                          {"beta", c.weights.beta},
                          {"theta", c.weights.theta}}},
                        {"learning_rate", c.learning_rate},
                        {"epochs", c.epochs},
                        {"batch_size", c.batch_size},
                        {"seed", c.seed},
                        {"teacher_checkpoint", c.teacher_checkpoint},
                        {"data", c.data_dir},
                        {"data_count", c.data_count}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("model")) c.model = config_from_json(j.at("model"));
    if (j.contains("keep")) {
      c.base_ratio = j.at("keep").value("base_ratio", c.base_ratio);
      c.num_stages = j.at("keep").value("num_stages", c.num_stages);
    }
    if (j.contains("loss_weights")) {
      const auto& w = j.at("loss_weights");
      c.weights.alpha = w.value("alpha", c.weights.alpha);
      c.weights.beta = w.value("beta", c.weights.beta);
      c.weights.theta = w.value("theta", c.weights.theta);
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.teacher_checkpoint = j.value("teacher_checkpoint", c.teacher_checkpoint);
    c.data_dir = j.value("data", c.data_dir);
    c.data_count = j.value("data_count", c.data_count);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("train config json: ") + e.what());
  }
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("train config: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("train config json: ") + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Batch loss assembly — the single definition of the finetuning objective,
// shared by the training loop (tape) and by gradient checking (eager).
// ---------------------------------------------------------------------------

struct BatchSample {
  const Tensor* image = nullptr;
  std::size_t label = 0;
  const Tensor* teacher_logits = nullptr;    // null: logit distillation off
  const Tensor* teacher_features = nullptr;  // null: feature distillation off
};

template <class E>
struct BatchLossNodes {
  typename E::Handle total{}, cls{}, logit{}, feature{}, cut{};
  std::vector<typename E::Handle> per_layer_cut;     // batch-mean inter+intra per layer
  std::vector<typename E::Handle> sample_logits;     // per sample, for accuracy
  std::vector<double> sample_cross_mass;             // per sample, metric only
};

/// Total objective over one batch in finetune mode:
///   L = L_cls + alpha * L_logit + beta * L_feature + theta * L_cut,
/// every term a batch mean. Feature distillation targets the final-layer
/// feature map over all tokens.
template <class E>
BatchLossNodes<E> batch_loss_node(E& eng, const ModelParamsT<typename E::Handle>& staged,
                                  const ViTConfig& cfg, const KeepSchedule& schedule,
                                  const LossWeights& w, const std::vector<BatchSample>& batch) {
  if (batch.empty()) throw ContractError("batch loss: empty batch");
  using H = typename E::Handle;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  BatchLossNodes<E> out;
  H cls_sum{}, kl_sum{}, mse_sum{}, cut_sum{};
  std::vector<H> layer_cut_sums;
  bool first = true;
  bool have_kl = false, have_mse = false;
  for (const BatchSample& s : batch) {
    ForwardResultT<E> fwd = vit_forward(eng, *s.image, staged, cfg, &schedule, RunMode::finetune);
    out.sample_logits.push_back(fwd.logits);
    H ce = cross_entropy_node(eng, fwd.logits, s.label);
    CutLossNodes<E> cut = total_cut_loss_node(eng, fwd.traces);
    double cross = 0.0;
    std::size_t cross_layers = 0;
    for (std::size_t l = 0; l < fwd.traces.size(); ++l) {
      if (fwd.traces[l].partition.idle.empty()) continue;
      cross += cross_set_mass(eng.value(cut.head_avg[l]), fwd.traces[l].partition);
      ++cross_layers;
    }
    out.sample_cross_mass.push_back(cross_layers ? cross / static_cast<double>(cross_layers)
                                                 : 0.0);
    if (first) {
      cls_sum = ce;
      cut_sum = cut.total;
      for (std::size_t l = 0; l < cut.inter.size(); ++l) {
        layer_cut_sums.push_back(eng.add(cut.inter[l], cut.intra[l]));
      }
    } else {
      cls_sum = eng.add(cls_sum, ce);
      cut_sum = eng.add(cut_sum, cut.total);
      for (std::size_t l = 0; l < cut.inter.size(); ++l) {
        layer_cut_sums[l] = eng.add(layer_cut_sums[l], eng.add(cut.inter[l], cut.intra[l]));
      }
    }
    if (s.teacher_logits != nullptr) {
      H kl = kl_logit_node(eng, fwd.logits, *s.teacher_logits);
      kl_sum = have_kl ? eng.add(kl_sum, kl) : kl;
      have_kl = true;
    }
    if (s.teacher_features != nullptr) {
      H mse = feature_mse_node(eng, fwd.traces.back().features, *s.teacher_features);
      mse_sum = have_mse ? eng.add(mse_sum, mse) : mse;
      have_mse = true;
    }
    first = false;
  }
  out.cls = eng.scale(cls_sum, inv_b);
  out.cut = eng.scale(cut_sum, inv_b);
  out.logit = have_kl ? eng.scale(kl_sum, inv_b) : eng.constant(Tensor({1, 1}, 0.0));
  out.feature = have_mse ? eng.scale(mse_sum, inv_b) : eng.constant(Tensor({1, 1}, 0.0));
  for (H& h : layer_cut_sums) out.per_layer_cut.push_back(eng.scale(h, inv_b));
  out.total = eng.add(
      eng.add(out.cls, eng.scale(out.logit, w.alpha)),
      eng.add(eng.scale(out.feature, w.beta), eng.scale(out.cut, w.theta)));
  return out;
}

// ---------------------------------------------------------------------------
// Training loop: plain gradient descent with momentum, fixed learning rate,
// single-threaded and bit-reproducible for a given config.
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  LossBreakdown losses;
  double accuracy = 0.0;
  std::vector<double> cut_per_layer;
  double cross_set_mass = 0.0;
};

struct TeacherOutputs {
  std::vector<Tensor> logits;
  std::vector<Tensor> features;
};

inline TeacherOutputs run_teacher(const ModelParams& params, const ViTConfig& cfg,
                                  const SyntheticDataset& ds) {
  TeacherOutputs out;
  for (const Tensor& img : ds.images) {
    ForwardResult fwd = run_forward(img, params, cfg, nullptr, RunMode::inference);
    out.logits.push_back(fwd.logits);
    out.features.push_back(fwd.traces.back().features);
  }
  return out;
}

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> metrics;
};

inline TrainResult train(const TrainConfig& tc, std::ostream* log = nullptr) {
  tc.validate();
  if (tc.teacher_checkpoint.empty() && (tc.weights.alpha > 0.0 || tc.weights.beta > 0.0)) {
    throw ContractError("train: distillation weights require a teacher checkpoint");
  }
  const ViTConfig& cfg = tc.model;
  const KeepSchedule schedule = tc.schedule();

  SyntheticDataset data = tc.data_dir.empty()
                              ? gen_synthetic_dataset(tc.seed, tc.data_count, cfg.num_classes, cfg)
                              : load_dataset(tc.data_dir);

  ModelParams params;
  const bool distill = !tc.teacher_checkpoint.empty();
  TeacherOutputs teacher;
  if (distill) {
    auto [tparams, tcfg] = load_checkpoint(tc.teacher_checkpoint);
    ModelParams teacher_params = std::move(tparams);
    if (config_to_json(tcfg) != config_to_json(cfg)) {
      throw ContractError("train: teacher checkpoint config differs from train config");
    }
    // The pretrained model is both the starting point and the frozen teacher,
    // which runs full-size (no schedule).
    params = teacher_params;
    teacher = run_teacher(teacher_params, cfg, data);
  } else {
    params = init_params(cfg, tc.seed + 1000003);
  }

  std::vector<Tensor*> param_ptrs;
  for_each_param(params, [&](const std::string&, Tensor& t) { param_ptrs.push_back(&t); });
  std::vector<Tensor> velocity;
  for (Tensor* t : param_ptrs) velocity.emplace_back(t->dims);

  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    Rng shuffle_rng(tc.seed + 0x9e3779b9ull * (epoch + 1));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.index(i)]);
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.cut_per_layer.assign(cfg.num_layers, 0.0);
    double correct = 0.0;
    double cross_sum = 0.0;

    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      std::vector<BatchSample> batch;
      for (std::size_t i = start; i < end; ++i) {
        BatchSample s;
        s.image = &data.images[order[i]];
        s.label = data.labels[order[i]];
        if (distill && tc.weights.alpha > 0.0) s.teacher_logits = &teacher.logits[order[i]];
        if (distill && tc.weights.beta > 0.0) s.teacher_features = &teacher.features[order[i]];
        batch.push_back(s);
      }

      Tape tape;
      auto staged = stage_params(tape, params, cfg);
      BatchLossNodes<Tape> nodes = batch_loss_node(tape, staged, cfg, schedule, tc.weights, batch);
      const double batch_total = tape.value(nodes.total).data[0];
      if (!std::isfinite(batch_total)) {
        throw NumericError("train: loss diverged (non-finite) at epoch " +
                           std::to_string(epoch) + ", batch starting " + std::to_string(start));
      }
      tape.backward(nodes.total);

      std::vector<Tape::Handle> handles;
      for_each_param(staged, [&](const std::string&, Tape::Handle& h) { handles.push_back(h); });
      for (std::size_t i = 0; i < param_ptrs.size(); ++i) {
        const Tensor& g = tape.grad(handles[i]);
        Tensor& v = velocity[i];
        Tensor& p = *param_ptrs[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
          v.data[j] = kMomentum * v.data[j] + g.data[j];
          p.data[j] -= tc.learning_rate * v.data[j];
        }
      }

      const double bsz = static_cast<double>(batch.size());
      em.losses.total += batch_total * bsz;
      em.losses.cls += tape.value(nodes.cls).data[0] * bsz;
      em.losses.logit += tape.value(nodes.logit).data[0] * bsz;
      em.losses.feature += tape.value(nodes.feature).data[0] * bsz;
      em.losses.cut += tape.value(nodes.cut).data[0] * bsz;
      for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        em.cut_per_layer[l] += tape.value(nodes.per_layer_cut[l]).data[0] * bsz;
      }
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const Tensor& lg = tape.value(nodes.sample_logits[i]);
        std::size_t arg = 0;
        for (std::size_t cidx = 1; cidx < lg.cols(); ++cidx) {
          if (lg.data[cidx] > lg.data[arg]) arg = cidx;
        }
        if (arg == batch[i].label) correct += 1.0;
        cross_sum += nodes.sample_cross_mass[i];
      }
    }

    const double n = static_cast<double>(data.size());
    em.losses.total /= n;
    em.losses.cls /= n;
    em.losses.logit /= n;
    em.losses.feature /= n;
    em.losses.cut /= n;
    for (double& v : em.cut_per_layer) v /= n;
    em.accuracy = correct / n;
    em.cross_set_mass = cross_sum / n;
    result.metrics.push_back(em);
    if (log != nullptr) {
      (*log) << "epoch " << epoch << " loss " << em.losses.total << " acc " << em.accuracy
             << '\n';
    }
  }

  result.params = std::move(params);
  return result;
}

inline nlohmann::json epoch_metrics_json(const EpochMetrics& m) {
  return nlohmann::json{{"epoch", m.epoch},
                        {"total", m.losses.total},
                        {"cls", m.losses.cls},
                        {"logit", m.losses.logit},
                        {"feature", m.losses.feature},
                        {"cut", m.losses.cut},
                        {"accuracy", m.accuracy},
                        {"cut_per_layer", m.cut_per_layer},
                        {"cross_set_mass", m.cross_set_mass}};
}

inline void write_metrics_jsonl(std::ostream& os, const std::vector<EpochMetrics>& metrics) {
  for (const EpochMetrics& m : metrics) os << epoch_metrics_json(m).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation (inference mode unless full attention diagnostics are wanted).
// ---------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  double cls_loss = 0.0;
  double cut_loss = 0.0;        // finetune mode only
  double cross_set_mass = 0.0;  // finetune mode only
};

inline EvalResult evaluate(const ModelParams& params, const ViTConfig& cfg,
                           const KeepSchedule* schedule, const SyntheticDataset& ds,
                           RunMode mode) {
  if (ds.size() == 0) throw ContractError("evaluate: empty dataset");
  EagerEngine eng;
  auto staged = stage_params(eng, params, cfg);
  EvalResult r;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ForwardResult fwd = vit_forward(eng, ds.images[i], staged, cfg, schedule, mode);
    r.cls_loss += cross_entropy_node(eng, fwd.logits, ds.labels[i]).data[0];
    std::size_t arg = 0;
    for (std::size_t c = 1; c < fwd.logits.cols(); ++c) {
      if (fwd.logits.data[c] > fwd.logits.data[arg]) arg = c;
    }
    if (arg == ds.labels[i]) r.accuracy += 1.0;
    if (mode == RunMode::finetune) {
      r.cut_loss += total_cut_loss(fwd.traces).total;
      r.cross_set_mass += mean_cross_set_mass(fwd.traces);
    }
  }
  const double n = static_cast<double>(ds.size());
  r.accuracy /= n;
  r.cls_loss /= n;
  r.cut_loss /= n;
  r.cross_set_mass /= n;
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checking: analytic gradients of the composite objective against
// central finite differences on a deterministic sample of coordinates.
// ---------------------------------------------------------------------------

inline double grad_check(const ViTConfig& cfg, double keep_ratio, const LossWeights& weights,
                         std::uint64_t seed, std::size_t coords_per_tensor = 6,
                         double step = 1e-5) {
  cfg.validate();
  const KeepSchedule schedule = KeepSchedule::make(keep_ratio, cfg.num_layers);
  ModelParams params = init_params(cfg, seed);
  ModelParams teacher_params = init_params(cfg, seed + 1);  // distinct teacher
  SyntheticDataset ds = gen_synthetic_dataset(seed + 2, cfg.num_classes, cfg.num_classes, cfg);
  ds.images.resize(std::min<std::size_t>(2, ds.images.size()));
  ds.labels.resize(ds.images.size());
  TeacherOutputs teacher = run_teacher(teacher_params, cfg, ds);

  std::vector<BatchSample> batch;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    BatchSample s;
    s.image = &ds.images[i];
    s.label = ds.labels[i];
    if (weights.alpha > 0.0) s.teacher_logits = &teacher.logits[i];
    if (weights.beta > 0.0) s.teacher_features = &teacher.features[i];
    batch.push_back(s);
  }

  Tape tape;
  auto staged = stage_params(tape, params, cfg);
  BatchLossNodes<Tape> nodes = batch_loss_node(tape, staged, cfg, schedule, weights, batch);
  tape.backward(nodes.total);

  std::vector<Tensor*> tensors;
  std::vector<Tape::Handle> handles;
  for_each_param(params, [&](const std::string&, Tensor& t) { tensors.push_back(&t); });
  for_each_param(staged, [&](const std::string&, Tape::Handle& h) { handles.push_back(h); });

  auto loss_value = [&]() {
    EagerEngine eng;
    auto eager_staged = stage_params(eng, params, cfg);
    return batch_loss_node(eng, eager_staged, cfg, schedule, weights, batch).total.data[0];
  };

  Rng coord_rng(seed + 3);
  double max_rel = 0.0;
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    Tensor& t = *tensors[ti];
    const Tensor& analytic = tape.grad(handles[ti]);
    const std::size_t samples = std::min<std::size_t>(coords_per_tensor, t.numel());
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t ci = static_cast<std::size_t>(coord_rng.index(t.numel()));
      const double orig = t.data[ci];
      t.data[ci] = orig + step;
      const double fp = loss_value();
      t.data[ci] = orig - step;
      const double fm = loss_value();
      t.data[ci] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic.data[ci];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace vitidle
