#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "helpers.hpp"
#include "vitidle/dataset.hpp"
#include "vitidle/diagnostics.hpp"

using namespace vitidle;
using testutil::read_file_bytes;

TEST_CASE("cosine smoothness analytic cases") {
  Tensor same = Tensor::from_rows({{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}});
  CHECK(cosine_smoothness(same) == Catch::Approx(1.0).margin(1e-12));

  Tensor ortho = Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}});
  CHECK(cosine_smoothness(ortho) == Catch::Approx(0.0).margin(1e-15));

  Tensor pair = Tensor::from_rows({{1.0, 0.0}, {1.0, 1.0}});
  CHECK(cosine_smoothness(pair) == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-12));

  // zero-norm tokens contribute similarity 0
  Tensor with_zero = Tensor::from_rows({{1.0, 0.0}, {0.0, 0.0}, {1.0, 0.0}});
  CHECK(cosine_smoothness(with_zero) == Catch::Approx(1.0 / 3.0).margin(1e-12));

  CHECK_THROWS_AS(cosine_smoothness(Tensor::from_rows({{1.0, 2.0}})), ContractError);
}

TEST_CASE("cosine smoothness is scale invariant") {
  Rng rng(50);
  Tensor x = testutil::random_tensor(rng, 6, 8);
  const double base = cosine_smoothness(x);
  Tensor scaled = kernels::scale(x, 37.5);
  CHECK(std::abs(cosine_smoothness(scaled) - base) < 1e-12);
}

TEST_CASE("reselection statistics on hand traces") {
  const std::size_t n_img = 4;
  KeepSchedule sched = KeepSchedule::make(0.5, 8);
  auto part = [](std::vector<std::size_t> sel, std::vector<std::size_t> idle) {
    TokenPartition p;
    p.selected = std::move(sel);
    p.idle = std::move(idle);
    return p;
  };

  // token 1 selected layers 0..5, idle layer 6, selected layer 7 -> re-selected
  std::vector<TokenPartition> layers(8, part({0, 1, 2, 3, 4}, {}));
  layers[6] = part({0, 2, 3, 4}, {1});
  layers[7] = part({0, 1, 2}, {3, 4});
  SelectionTrace trace;
  trace.schedule = sched;
  trace.num_image_tokens = n_img;
  trace.samples = {layers};
  ReselectionStats st = reselection_stats(trace);
  CHECK(st.p_a == Catch::Approx(0.25).margin(1e-15));      // only token 1
  CHECK(st.p_r == Catch::Approx(0.25).margin(1e-15));      // token 1 is in the last layer
  CHECK(st.p_l == Catch::Approx(0.5).margin(1e-15));       // tokens 1, 2
  CHECK(st.r_l == Catch::Approx(0.5).margin(1e-15));
  CHECK(std::abs(st.r_l * st.p_l - st.p_r) < 1e-12);
  CHECK(st.p_r <= st.p_a);

  CHECK_THROWS_AS(reselection_stats(SelectionTrace{}), ContractError);
}

TEST_CASE("full keep never idles so nothing is re-selected") {
  ViTConfig cfg;
  cfg.num_layers = 4;
  ModelParams params = init_params(cfg, 51);
  SyntheticDataset ds = gen_synthetic_dataset(52, 4, cfg.num_classes, cfg);
  KeepSchedule unit = KeepSchedule::make(1.0, cfg.num_layers);
  SelectionTrace trace;
  trace.schedule = unit;
  trace.num_image_tokens = cfg.num_image_tokens();
  for (const Tensor& img : ds.images) {
    ForwardResult fwd = run_forward(img, params, cfg, &unit, RunMode::inference);
    trace.samples.push_back(partitions_of(fwd.traces));
  }
  ReselectionStats st = reselection_stats(trace);
  CHECK(st.p_a == 0.0);
  CHECK(st.p_r == 0.0);
  CHECK(st.p_l == 1.0);
}

TEST_CASE("last-layer occupancy matches the floor form exactly") {
  ViTConfig cfg;  // 16 image tokens
  ModelParams params = init_params(cfg, 53);
  SyntheticDataset ds = gen_synthetic_dataset(54, 5, cfg.num_classes, cfg);
  for (double k : {0.5, 0.7, 0.9}) {
    KeepSchedule sched = KeepSchedule::make(k, cfg.num_layers);
    SelectionTrace trace;
    trace.schedule = sched;
    trace.num_image_tokens = cfg.num_image_tokens();
    for (const Tensor& img : ds.images) {
      ForwardResult fwd = run_forward(img, params, cfg, &sched, RunMode::inference);
      trace.samples.push_back(partitions_of(fwd.traces));
    }
    ReselectionStats st = reselection_stats(trace);
    const double expect =
        std::floor(k * k * k * static_cast<double>(cfg.num_image_tokens())) /
        static_cast<double>(cfg.num_image_tokens());
    CHECK(st.p_l == expect);  // exact: N_img is a power of two
    CHECK(std::abs(st.r_l * st.p_l - st.p_r) < 1e-12);
  }
}

TEST_CASE("hard prune removes tokens permanently") {
  ViTConfig cfg;
  ModelParams params = init_params(cfg, 55);
  SyntheticDataset ds = gen_synthetic_dataset(56, 4, cfg.num_classes, cfg);
  KeepSchedule sched = KeepSchedule::make(0.5, cfg.num_layers);
  HardPruneResult hp = hard_prune_forward(ds.images[0], params, cfg, sched);
  REQUIRE(hp.survivors.size() == cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const double ratio = stage_keep_ratio(l, sched);
    CHECK(hp.survivors[l].size() == keep_count(ratio, cfg.num_image_tokens()));
    if (l > 0) {
      // survivors only shrink: each layer's set is a subset of the previous
      for (std::size_t tok : hp.survivors[l]) {
        CHECK(std::binary_search(hp.survivors[l - 1].begin(), hp.survivors[l - 1].end(), tok));
      }
    }
    CHECK(hp.per_layer_features[l].rows() == hp.survivors[l].size() + 1);
  }
}

TEST_CASE("pgm heat map export") {
  const std::string dir = testutil::scratch_dir("pgm");
  // attention confined to the selected block, top scores on the selected set
  Tensor a = Tensor::from_rows({{0.45, 0.45, 0.05, 0.05},
                                {0.45, 0.45, 0.05, 0.05},
                                {0.05, 0.05, 0.45, 0.45},
                                {0.05, 0.05, 0.45, 0.45}});
  std::vector<double> scores{0.9, 0.1, 0.2};  // token 1 strongest
  const std::string path = dir + "/heat.pgm";
  export_attention_heatmap(a, scores, path);
  const std::string bytes = read_file_bytes(path);
  CHECK(bytes.rfind("P5\n4 4\n255\n", 0) == 0);
  REQUIRE(bytes.size() == 11 + 16);
  const unsigned char* px = reinterpret_cast<const unsigned char*>(bytes.data() + 11);
  // permutation: CLS, token1, token3, token2 -> top-left 2x2 block bright
  CHECK(px[0] > px[2]);
  CHECK(px[1] > px[3]);
  CHECK(px[5] > px[6]);

  export_attention_heatmap(a, scores, dir + "/heat2.pgm");
  CHECK(read_file_bytes(dir + "/heat2.pgm") == bytes);  // deterministic

  CHECK_THROWS_AS(export_attention_heatmap(a, {0.9, 0.1}, dir + "/bad.pgm"), ContractError);
}

TEST_CASE("selection mask export") {
  ViTConfig cfg;  // 4x4 patch grid
  const std::string dir = testutil::scratch_dir("masks");
  TokenPartition full = TokenPartition::all_selected(cfg.num_tokens());
  std::vector<double> scores(cfg.num_image_tokens());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = static_cast<double>(i);
  TokenPartition half = select_tokens(scores, 0.5, cfg.num_image_tokens());
  auto paths = export_selection_masks({full, half}, cfg, dir);
  REQUIRE(paths.size() == 2);

  const std::string all_white = read_file_bytes(paths[0]);
  CHECK(all_white.rfind("P5\n4 4\n255\n", 0) == 0);
  for (std::size_t i = 11; i < all_white.size(); ++i) {
    CHECK(static_cast<unsigned char>(all_white[i]) == 255);
  }
  const std::string half_mask = read_file_bytes(paths[1]);
  std::size_t white = 0;
  for (std::size_t i = 11; i < half_mask.size(); ++i) {
    white += static_cast<unsigned char>(half_mask[i]) == 255 ? 1 : 0;
  }
  CHECK(white == keep_count(0.5, cfg.num_image_tokens()));
}

TEST_CASE("re-selected patch flips black then white across layer masks") {
  ViTConfig cfg;
  const std::string dir = testutil::scratch_dir("masks_reselect");
  TokenPartition l0 = TokenPartition::all_selected(cfg.num_tokens());
  TokenPartition l1;
  l1.selected = {0};
  for (std::size_t t = 2; t <= cfg.num_image_tokens(); ++t) l1.selected.push_back(t);
  l1.idle = {1};  // patch 0 idle
  TokenPartition l2 = TokenPartition::all_selected(cfg.num_tokens());
  auto paths = export_selection_masks({l0, l1, l2}, cfg, dir);
  auto pixel0 = [](const std::string& bytes) {
    return static_cast<unsigned char>(bytes[11]);
  };
  CHECK(pixel0(read_file_bytes(paths[0])) == 255);
  CHECK(pixel0(read_file_bytes(paths[1])) == 0);
  CHECK(pixel0(read_file_bytes(paths[2])) == 255);
}

TEST_CASE("run_diagnostics aggregates over a dataset") {
  ViTConfig cfg;
  cfg.num_layers = 4;
  ModelParams params = init_params(cfg, 57);
  SyntheticDataset ds = gen_synthetic_dataset(58, 6, cfg.num_classes, cfg);
  KeepSchedule sched = KeepSchedule::make(0.5, cfg.num_layers);
  DiagnoseResult r = run_diagnostics(params, cfg, sched, ds);
  CHECK(r.cosine_idle.size() == cfg.num_layers);
  CHECK(r.cosine_hard_prune.size() == cfg.num_layers);
  for (double v : r.cosine_idle) CHECK((v >= -1.0 && v <= 1.0));
  CHECK(r.oversmoothing_win_fraction >= 0.0);
  CHECK(r.oversmoothing_win_fraction <= 1.0);
  const std::string csv = diagnose_cosine_csv(r);
  CHECK(csv.rfind("layer,cosine_idle,cosine_hard_prune\n", 0) == 0);
  nlohmann::json j = reselection_json(r.reselection);
  CHECK(j.contains("P_A"));
}
