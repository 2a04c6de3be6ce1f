#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vitidle/checkpoint.hpp"
#include "vitidle/dataset.hpp"
#include "vitidle/diagnostics.hpp"
#include "vitidle/errors.hpp"
#include "vitidle/forward.hpp"
#include "vitidle/macs.hpp"
#include "vitidle/train.hpp"

namespace vitidle::cli {

// Exit codes: 0 success, 1 usage error, 2 contract/validation error,
// 3 numeric failure.

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("cannot open for write: " + path);
  os << text;
}

inline KeepSchedule schedule_for(const ViTConfig& cfg, double keep_ratio) {
  return KeepSchedule::make(keep_ratio, cfg.num_layers);
}

}  // namespace detail

inline int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vision transformer with dynamic token idling: training, "
               "complexity accounting and diagnostics"};
  app.require_subcommand(1);

  // --- init-config ---
  std::string init_out;
  CLI::App* init = app.add_subcommand("init-config", "Write a default train config JSON");
  init->add_option("--out", init_out, "Output path")->required();

  // --- gen-data ---
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_count = 0;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--config", gen_config, "Train config JSON")->required();
  gen->add_option("--seed", gen_seed, "Generator seed")->required();
  gen->add_option("--count", gen_count, "Number of images")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();

  // --- train ---
  std::string train_config, train_out;
  CLI::App* tr = app.add_subcommand("train", "Finetune / train per the config");
  tr->add_option("--config", train_config, "Train config JSON")->required();
  tr->add_option("--out", train_out, "Output directory")->required();

  // --- eval ---
  std::string eval_ckpt, eval_data, eval_mode = "inference";
  double eval_keep = 1.0;
  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  ev->add_option("--data", eval_data, "Dataset directory")->required();
  ev->add_option("--keep-ratio", eval_keep, "Base keep ratio")->required();
  ev->add_option("--mode", eval_mode, "inference|finetune")
      ->check(CLI::IsMember({"inference", "finetune"}));

  // --- count-macs ---
  std::string macs_config;
  double macs_keep = 1.0;
  bool macs_table_flag = false;
  CLI::App* cm = app.add_subcommand("count-macs", "Analytic multiply-accumulate report");
  cm->add_option("--config", macs_config, "Train config JSON (model section used)")->required();
  cm->add_option("--keep-ratio", macs_keep, "Base keep ratio");
  cm->add_flag("--table", macs_table_flag, "Print the sweep table over keep ratios");

  // --- grad-check ---
  std::string gc_config;
  std::uint64_t gc_seed = 0;
  CLI::App* gc = app.add_subcommand("grad-check", "Finite-difference gradient verification");
  gc->add_option("--config", gc_config, "Train config JSON")->required();
  gc->add_option("--seed", gc_seed, "Seed")->required();

  // --- diagnose ---
  std::string diag_ckpt, diag_data, diag_out;
  double diag_keep = 0.5;
  CLI::App* dg = app.add_subcommand("diagnose", "Over-smoothing and re-selection diagnostics");
  dg->add_option("--checkpoint", diag_ckpt, "Checkpoint directory")->required();
  dg->add_option("--data", diag_data, "Dataset directory")->required();
  dg->add_option("--keep-ratio", diag_keep, "Base keep ratio")->required();
  dg->add_option("--out", diag_out, "Output directory")->required();

  // --- export ---
  std::string ex_ckpt, ex_image, ex_out;
  double ex_keep = 0.5;
  CLI::App* ex = app.add_subcommand("export", "Attention heat maps and selection masks");
  ex->add_option("--checkpoint", ex_ckpt, "Checkpoint directory")->required();
  ex->add_option("--image", ex_image, "Image tensor file (H x W x C)")->required();
  ex->add_option("--keep-ratio", ex_keep, "Base keep ratio")->required();
  ex->add_option("--out", ex_out, "Output directory")->required();

  std::vector<const char*> argv;
  argv.push_back("vitidle");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    namespace fs = std::filesystem;

    if (init->parsed()) {
      TrainConfig def;
      def.base_ratio = 0.5;
      detail::write_text(init_out, train_config_to_json(def).dump(2) + "\n");
      out << "wrote " << init_out << '\n';
      return 0;
    }

    if (gen->parsed()) {
      const TrainConfig tc = load_train_config(gen_config);
      SyntheticDataset ds =
          gen_synthetic_dataset(gen_seed, gen_count, tc.model.num_classes, tc.model);
      save_dataset(gen_out, ds);
      out << "wrote " << gen_count << " images to " << gen_out << '\n';
      return 0;
    }

    if (tr->parsed()) {
      const TrainConfig tc = load_train_config(train_config);
      TrainResult result = train(tc, &out);
      fs::create_directories(train_out);
      save_checkpoint((fs::path(train_out) / "checkpoint").string(), result.params, tc.model);
      std::ofstream ms(fs::path(train_out) / "metrics.jsonl", std::ios::binary);
      if (!ms) throw ContractError("cannot write metrics.jsonl in " + train_out);
      write_metrics_jsonl(ms, result.metrics);
      out << "checkpoint and metrics written to " << train_out << '\n';
      return 0;
    }

    if (ev->parsed()) {
      auto [params, cfg] = load_checkpoint(eval_ckpt);
      SyntheticDataset ds = load_dataset(eval_data);
      const KeepSchedule schedule = detail::schedule_for(cfg, eval_keep);
      const RunMode mode = eval_mode == "finetune" ? RunMode::finetune : RunMode::inference;
      EvalResult r = evaluate(params, cfg, &schedule, ds, mode);
      nlohmann::json j{{"accuracy", r.accuracy},
                       {"cls_loss", r.cls_loss},
                       {"keep_ratio", eval_keep},
                       {"mode", eval_mode}};
      if (mode == RunMode::finetune) {
        j["cut_loss"] = r.cut_loss;
        j["cross_set_mass"] = r.cross_set_mass;
      }
      out << j.dump(2) << '\n';
      return 0;
    }

    if (cm->parsed()) {
      const TrainConfig tc = load_train_config(macs_config);
      if (macs_table_flag) {
        out << macs_table(tc.model, {1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3});
      } else {
        const MacsReport r =
            model_macs(tc.model, detail::schedule_for(tc.model, macs_keep));
        out << macs_report_json(r).dump(2) << '\n';
      }
      return 0;
    }

    if (gc->parsed()) {
      const TrainConfig tc = load_train_config(gc_config);
      const double max_rel = grad_check(tc.model, tc.base_ratio, tc.weights, gc_seed);
      out << "max relative gradient error: " << max_rel << '\n';
      if (!(max_rel < 1e-4)) {
        err << "gradient check failed (threshold 1e-4)\n";
        return 3;
      }
      return 0;
    }

    if (dg->parsed()) {
      auto [params, cfg] = load_checkpoint(diag_ckpt);
      SyntheticDataset ds = load_dataset(diag_data);
      const KeepSchedule schedule = detail::schedule_for(cfg, diag_keep);
      DiagnoseResult r = run_diagnostics(params, cfg, schedule, ds);
      fs::create_directories(diag_out);
      detail::write_text((fs::path(diag_out) / "cosine.csv").string(), diagnose_cosine_csv(r));
      detail::write_text((fs::path(diag_out) / "reselection.json").string(),
                         reselection_json(r.reselection).dump(2) + "\n");
      detail::write_text((fs::path(diag_out) / "oversmoothing.json").string(),
                         oversmoothing_json(r).dump(2) + "\n");
      out << "diagnostics written to " << diag_out << '\n';
      return 0;
    }

    if (ex->parsed()) {
      auto [params, cfg] = load_checkpoint(ex_ckpt);
      Tensor image = read_tensor(ex_image);
      const KeepSchedule schedule = detail::schedule_for(cfg, ex_keep);
      ForwardResult fwd = run_forward(image, params, cfg, &schedule, RunMode::finetune);
      fs::create_directories(ex_out);
      EagerEngine eng;
      for (std::size_t l = 0; l < fwd.traces.size(); ++l) {
        const Tensor avg = head_mean(eng, fwd.traces[l].attention);
        std::vector<double> scores(cfg.num_image_tokens());
        for (std::size_t j = 1; j < cfg.num_tokens(); ++j) scores[j - 1] = avg.at(0, j);
        export_attention_heatmap(
            avg, scores,
            (fs::path(ex_out) / ("layer_" + pad2(l) + "_heatmap.pgm")).string());
      }
      export_selection_masks(partitions_of(fwd.traces), cfg, ex_out);
      std::ofstream ts(fs::path(ex_out) / "trace.jsonl", std::ios::binary);
      if (!ts) throw ContractError("cannot write trace.jsonl in " + ex_out);
      write_partition_trace_jsonl(fwd.traces, ts);
      out << "exports written to " << ex_out << '\n';
      return 0;
    }

    err << "no subcommand\n";
    return 1;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const ShapeError& e) {
    err << "validation error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    err << "validation error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace vitidle::cli
