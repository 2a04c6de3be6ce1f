#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "vitidle/cut_loss.hpp"
#include "vitidle/forward.hpp"

using namespace vitidle;
using testutil::random_tensor;

namespace {

// Brute-force double-loop oracles, independent of the engine-based
// implementations. Everything is written directly from the definitions.
struct Oracle {
  static bool in(const std::vector<std::size_t>& set, std::size_t v) {
    for (std::size_t s : set) {
      if (s == v) return true;
    }
    return false;
  }

  static double cut(const Tensor& a, const std::vector<std::size_t>& s,
                    const std::vector<std::size_t>& t) {
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = 0; j < a.cols(); ++j) {
        if (in(s, i) && in(t, j)) total += a.at(i, j);
      }
    }
    return total;
  }

  static double assoc(const Tensor& a, const std::vector<std::size_t>& s) {
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = 0; j < a.cols(); ++j) {
        if (in(s, i)) total += a.at(i, j);
      }
    }
    return total;
  }

  static double inter(const Tensor& a, const TokenPartition& p) {
    const double k = static_cast<double>(p.selected.size());
    const double n = static_cast<double>(p.num_tokens());
    if (p.idle.empty()) return 0.0;
    double term1 = 0.0;
    for (std::size_t i : p.selected) {
      double inner = 0.0;
      for (std::size_t j : p.idle) inner += a.at(i, j);
      term1 += inner * inner;
    }
    double term2 = 0.0;
    for (std::size_t i : p.idle) {
      double inner = 0.0;
      for (std::size_t j : p.selected) {
        if (j != 0) inner += a.at(i, j);
      }
      term2 += inner * inner;
    }
    return term1 / k + term2 / (n - k);
  }

  static double intra(const Tensor& a, const TokenPartition& p) {
    const double k = static_cast<double>(p.selected.size());
    double total = 0.0;
    for (std::size_t i : p.selected) {
      double inner = 0.0;
      for (std::size_t j : p.selected) inner += a.at(i, j);
      total += (1.0 - inner) * (1.0 - inner);
    }
    return total / k;
  }

  static double ncut(const Tensor& a, const TokenPartition& p) {
    if (p.idle.empty()) return 0.0;
    std::vector<std::size_t> s_no0(p.selected.begin() + 1, p.selected.end());
    return cut(a, p.selected, p.idle) / assoc(a, p.selected) +
           cut(a, p.idle, s_no0) / assoc(a, p.idle);
  }
};

Tensor random_stochastic(Rng& rng, std::size_t n) {
  Tensor logits = random_tensor(rng, n, n, 2.0);
  return kernels::row_softmax(logits, 1.0);
}

TokenPartition random_partition(Rng& rng, std::size_t n) {
  std::vector<double> scores(n - 1);
  for (double& s : scores) s = rng.uniform();
  // half-offset keeps the floor away from rounding boundaries; K in [1, n-2]
  const double ratio = (static_cast<double>(rng.index(n - 2)) + 1.5) /
                       static_cast<double>(n - 1);
  return select_tokens(scores, ratio, n - 1);
}

}  // namespace

TEST_CASE("graph cut hand cases") {
  Tensor block = Tensor::from_rows({{0.5, 0.5, 0, 0},
                                    {0.3, 0.7, 0, 0},
                                    {0, 0, 0.2, 0.8},
                                    {0, 0, 0.9, 0.1}});
  CHECK(graph_cut(block, {0, 1}, {2, 3}) == 0.0);

  Tensor uniform = Tensor::matrix(4, 4, 0.25);
  CHECK(graph_cut(uniform, {0, 1, 2}, {3}) == Catch::Approx(0.75).margin(1e-15));

  Tensor asym = Tensor::from_rows({{0.1, 0.9}, {0.4, 0.6}});
  CHECK(graph_cut(asym, {0}, {1}) == Catch::Approx(0.9).margin(1e-15));
  CHECK(graph_cut(asym, {1}, {0}) == Catch::Approx(0.4).margin(1e-15));
  CHECK(graph_cut(asym, {0}, {1}) != graph_cut(asym, {1}, {0}));

  CHECK_THROWS_AS(graph_cut(uniform, {0, 1}, {1, 2}), ContractError);
}

TEST_CASE("assoc hand cases") {
  Rng rng(33);
  Tensor stochastic = random_stochastic(rng, 6);
  CHECK(assoc(stochastic, {1, 3, 5}) == Catch::Approx(3.0).margin(1e-12));
  CHECK(assoc(stochastic, {}) == 0.0);

  Tensor hand = Tensor::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  CHECK(assoc(hand, {0}) == 3.0);
  CHECK(assoc(hand, {0, 1}) == 10.0);
}

TEST_CASE("ncut hand cases and conventions") {
  Tensor uniform = Tensor::matrix(4, 4, 0.25);
  PartitionedAttention pa;
  pa.attention = uniform;
  pa.partition.selected = {0, 1, 2};
  pa.partition.idle = {3};
  CHECK(ncut_attention(pa) == Catch::Approx(0.75).margin(1e-12));

  // attention confined within each set (idle attends only to I and CLS)
  Tensor confined = Tensor::from_rows({{0.6, 0.2, 0.2, 0.0},
                                       {0.5, 0.25, 0.25, 0.0},
                                       {0.1, 0.45, 0.45, 0.0},
                                       {0.3, 0.0, 0.0, 0.7}});
  PartitionedAttention pc;
  pc.attention = confined;
  pc.partition.selected = {0, 1, 2};
  pc.partition.idle = {3};
  CHECK(ncut_attention(pc) == 0.0);

  PartitionedAttention no_idle;
  no_idle.attention = uniform;
  no_idle.partition = TokenPartition::all_selected(4);
  CHECK(ncut_attention(no_idle) == 0.0);
}

TEST_CASE("ncut equals the fixed-denominator form on stochastic maps") {
  Rng rng(34);
  for (int iter = 0; iter < 50; ++iter) {
    const std::size_t n = 8 + rng.index(25);
    Tensor a = random_stochastic(rng, n);
    TokenPartition p = random_partition(rng, n);
    if (p.idle.empty()) continue;
    PartitionedAttention pa{a, p};
    std::vector<std::size_t> s_no0(p.selected.begin() + 1, p.selected.end());
    const double fixed = graph_cut(a, p.selected, p.idle) /
                             static_cast<double>(p.selected.size()) +
                         graph_cut(a, p.idle, s_no0) /
                             static_cast<double>(n - p.selected.size());
    CHECK(std::abs(ncut_attention(pa) - fixed) < 1e-9);
  }
}

TEST_CASE("inter and intra loss hand cases") {
  Tensor uniform = Tensor::matrix(4, 4, 0.25);
  PartitionedAttention pa;
  pa.attention = uniform;
  pa.partition.selected = {0, 1, 2};
  pa.partition.idle = {3};
  CHECK(inter_loss(pa) == Catch::Approx(0.3125).margin(1e-12));
  CHECK(intra_loss(pa) == Catch::Approx(0.0625).margin(1e-12));
  CHECK(Oracle::inter(uniform, pa.partition) == Catch::Approx(0.3125).margin(1e-15));
  CHECK(Oracle::intra(uniform, pa.partition) == Catch::Approx(0.0625).margin(1e-15));

  // attention block-confined to its own set
  Tensor confined = Tensor::from_rows({{0.5, 0.3, 0.2, 0.0},
                                       {0.2, 0.4, 0.4, 0.0},
                                       {0.3, 0.3, 0.4, 0.0},
                                       {1.0, 0.0, 0.0, 0.0}});
  PartitionedAttention pc{confined, pa.partition};
  CHECK(inter_loss(pc) == 0.0);
  CHECK(intra_loss(pc) == Catch::Approx(0.0).margin(1e-15));

  // every token attends only to the class token
  Tensor cls_only = Tensor::matrix(4, 4, 0.0);
  for (std::size_t i = 0; i < 4; ++i) cls_only.at(i, 0) = 1.0;
  PartitionedAttention pk{cls_only, pa.partition};
  CHECK(inter_loss(pk) == 0.0);

  // selected rows with all mass on the idle set
  Tensor mass_idle = Tensor::matrix(4, 4, 0.0);
  for (std::size_t i = 0; i < 4; ++i) mass_idle.at(i, 3) = 1.0;
  PartitionedAttention pm{mass_idle, pa.partition};
  CHECK(intra_loss(pm) == Catch::Approx(1.0).margin(1e-15));

  // empty idle set
  PartitionedAttention pe{uniform, TokenPartition::all_selected(4)};
  CHECK(inter_loss(pe) == 0.0);
  CHECK(intra_loss(pe) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("cut ops match the brute-force oracle on random instances") {
  Rng rng(35);
  for (int iter = 0; iter < 500; ++iter) {
    const std::size_t n = 8 + rng.index(25);  // 8..32 tokens
    Tensor a = random_stochastic(rng, n);
    TokenPartition p = random_partition(rng, n);
    PartitionedAttention pa{a, p};
    CHECK(std::abs(graph_cut(a, p.selected, p.idle) - Oracle::cut(a, p.selected, p.idle)) <
          1e-12);
    CHECK(std::abs(assoc(a, p.selected) - Oracle::assoc(a, p.selected)) < 1e-12);
    CHECK(std::abs(assoc(a, p.idle) - Oracle::assoc(a, p.idle)) < 1e-12);
    CHECK(std::abs(inter_loss(pa) - Oracle::inter(a, p)) < 1e-12);
    CHECK(std::abs(intra_loss(pa) - Oracle::intra(a, p)) < 1e-12);
    CHECK(std::abs(ncut_attention(pa) - Oracle::ncut(a, p)) < 1e-12);
  }
}

TEST_CASE("associations simplify to set sizes on model attention") {
  ViTConfig cfg;
  cfg.num_layers = 2;
  ModelParams params = init_params(cfg, 36);
  Rng rng(37);
  KeepSchedule sched = KeepSchedule::make(0.5, cfg.num_layers);
  EagerEngine eng;
  auto staged = stage_params(eng, params, cfg);
  for (int iter = 0; iter < 10; ++iter) {
    Tensor image({cfg.image_size, cfg.image_size, 1});
    for (double& v : image.data) v = rng.normal();
    ForwardResult fwd = vit_forward(eng, image, staged, cfg, &sched, RunMode::finetune);
    for (const auto& trace : fwd.traces) {
      Tensor avg = head_mean(eng, trace.attention);
      const auto& p = trace.partition;
      CHECK(std::abs(assoc(avg, p.selected) - static_cast<double>(p.selected.size())) < 1e-9);
      CHECK(std::abs(assoc(avg, p.idle) - static_cast<double>(p.idle.size())) < 1e-9);
    }
  }
}

TEST_CASE("loss gradients through attention logits match finite differences") {
  Rng rng(38);
  const std::size_t n = 6;
  Tensor logits = random_tensor(rng, n, n);
  std::vector<double> scores(n - 1);
  for (double& s : scores) s = rng.uniform();
  TokenPartition part = select_tokens(scores, 0.6, n - 1);

  const double err = testutil::max_grad_error(
      {logits},
      [&part](auto& e, const auto& h) {
        auto attn = e.row_softmax(h[0], 1.0);
        return e.add(inter_loss_node(e, attn, part), intra_loss_node(e, attn, part));
      },
      1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("total cut loss sums layers and validates traces") {
  Tensor uniform = Tensor::matrix(4, 4, 0.25);
  TokenPartition part;
  part.selected = {0, 1, 2};
  part.idle = {3};

  LayerTrace t0;
  t0.layer = 0;
  t0.partition = part;
  t0.attention = {uniform};
  t0.full_attention = true;

  CutLossTerms single = total_cut_loss({t0});
  CHECK(single.total == Catch::Approx(0.375).margin(1e-12));  // 0.3125 + 0.0625
  CHECK(single.inter.size() == 1);

  // layer without idle tokens contributes zero
  LayerTrace t1;
  t1.layer = 1;
  t1.partition = TokenPartition::all_selected(4);
  t1.attention = {uniform};
  t1.full_attention = true;
  CutLossTerms both = total_cut_loss({t0, t1});
  CHECK(both.total == Catch::Approx(0.375).margin(1e-12));

  // two layers with hand-built attention sum their terms
  Tensor mass_idle = Tensor::matrix(4, 4, 0.0);
  for (std::size_t i = 0; i < 4; ++i) mass_idle.at(i, 3) = 1.0;
  LayerTrace t2;
  t2.layer = 1;
  t2.partition = part;
  t2.attention = {mass_idle};
  t2.full_attention = true;
  PartitionedAttention pm{mass_idle, part};
  const double second = inter_loss(pm) + intra_loss(pm);
  CutLossTerms two = total_cut_loss({t0, t2});
  CHECK(two.total == Catch::Approx(0.375 + second).margin(1e-12));

  LayerTrace missing;
  missing.partition = part;
  missing.full_attention = false;
  CHECK_THROWS_AS(total_cut_loss({missing}), ContractError);
  CHECK_THROWS_AS(total_cut_loss({}), ContractError);
}

TEST_CASE("cross set mass reflects cut magnitude") {
  Tensor uniform = Tensor::matrix(4, 4, 0.25);
  TokenPartition part;
  part.selected = {0, 1, 2};
  part.idle = {3};
  // Cut(S,I) = 0.75, Cut_{S\0}(I,S) = 0.5, N = 4
  CHECK(cross_set_mass(uniform, part) == Catch::Approx(0.3125).margin(1e-12));
  CHECK(cross_set_mass(uniform, TokenPartition::all_selected(4)) == 0.0);
}
