#pragma once

#include <cstddef>
#include <vector>

#include "vitidle/engine.hpp"
#include "vitidle/errors.hpp"
#include "vitidle/forward.hpp"
#include "vitidle/tensor.hpp"
#include "vitidle/token_idle.hpp"

namespace vitidle {

// Graph-cut machinery on attention maps. The attention map is the edge set of
// the token graph; Cut/Assoc follow the directed-graph definitions, the
// normalized cut and the inter/intra losses use the class-token relaxation
// (the second cut never counts the [CLS] column, so the class token may keep
// attention towards idle tokens).

/// Head-averaged attention plus the partition it is scored against.
struct PartitionedAttention {
  Tensor attention;  // N x N, rows ~ sum to 1
  TokenPartition partition;

  void validate() const {
    attention.require_matrix();
    if (attention.rows() != attention.cols()) {
      throw ContractError("partitioned attention: map must be square");
    }
    partition.validate(attention.rows());
  }
};

struct CutLossTerms {
  std::vector<double> inter;  // per layer
  std::vector<double> intra;  // per layer
  double total = 0.0;
};

/// Sum of edge weights from S into I.
inline double graph_cut(const Tensor& a, const std::vector<std::size_t>& s,
                        const std::vector<std::size_t>& i_set) {
  a.require_matrix();
  for (std::size_t v : s) {
    for (std::size_t w : i_set) {
      if (v == w) throw ContractError("graph_cut: sets overlap");
    }
  }
  double cut = 0.0;
  for (std::size_t v : s) {
    for (std::size_t w : i_set) {
      if (v >= a.rows() || w >= a.cols()) throw ContractError("graph_cut: index out of range");
      cut += a.at(v, w);
    }
  }
  return cut;
}

/// Sum of all edge weights leaving vertices of S (towards the universal set).
inline double assoc(const Tensor& a, const std::vector<std::size_t>& s) {
  a.require_matrix();
  double total = 0.0;
  for (std::size_t v : s) {
    if (v >= a.rows()) throw ContractError("assoc: index out of range");
    for (std::size_t w = 0; w < a.cols(); ++w) total += a.at(v, w);
  }
  return total;
}

/// Class-relaxed normalized cut of the attention map:
/// Cut(S,I)/Assoc(S) + Cut_{S\0}(I,S)/Assoc(I). Zero when I is empty.
inline double ncut_attention(const PartitionedAttention& pa) {
  pa.validate();
  if (pa.partition.idle.empty()) return 0.0;
  std::vector<std::size_t> s_no_cls(pa.partition.selected.begin() + 1,
                                    pa.partition.selected.end());
  const double cut_si = graph_cut(pa.attention, pa.partition.selected, pa.partition.idle);
  const double cut_is = graph_cut(pa.attention, pa.partition.idle, s_no_cls);
  return cut_si / assoc(pa.attention, pa.partition.selected) +
         cut_is / assoc(pa.attention, pa.partition.idle);
}

namespace detail {

/// Column indicator of the given token set, as an N x 1 constant.
inline Tensor indicator_column(std::size_t n, const std::vector<std::size_t>& set,
                               std::size_t skip = static_cast<std::size_t>(-1)) {
  Tensor t({n, 1});
  for (std::size_t v : set) {
    if (v != skip) t.data[v] = 1.0;
  }
  return t;
}

}  // namespace detail

/// Inter loss (squared, size-normalized cut in both directions, [CLS] column
/// excluded from the idle-side cut):
///   (1/K) sum_{i in S} (sum_{j in I} A_ij)^2
/// + (1/(N-K)) sum_{i in I} (sum_{j in S\{0}} A_ij)^2
template <class E>
typename E::Handle inter_loss_node(E& eng, typename E::Handle avg_attention,
                                   const TokenPartition& part) {
  const std::size_t n = part.num_tokens();
  const double k = static_cast<double>(part.selected.size());
  if (part.idle.empty()) return eng.constant(Tensor({1, 1}, 0.0));
  auto m_idle = eng.constant(detail::indicator_column(n, part.idle));
  auto m_sel_no_cls = eng.constant(detail::indicator_column(n, part.selected, 0));
  auto row_mass_idle = eng.matmul(avg_attention, m_idle);          // N x 1
  auto row_mass_sel = eng.matmul(avg_attention, m_sel_no_cls);     // N x 1
  auto sq_idle = eng.mul(row_mass_idle, row_mass_idle);
  auto sq_sel = eng.mul(row_mass_sel, row_mass_sel);
  auto sel_rows = eng.gather_rows(sq_idle, part.selected);
  auto idle_rows = eng.gather_rows(sq_sel, part.idle);
  auto term1 = eng.scale(eng.sum(sel_rows), 1.0 / k);
  auto term2 = eng.scale(eng.sum(idle_rows), 1.0 / (static_cast<double>(n) - k));
  return eng.add(term1, term2);
}

/// Intra loss: (1/K) sum_{i in S} (1 - sum_{j in S} A_ij)^2.
template <class E>
typename E::Handle intra_loss_node(E& eng, typename E::Handle avg_attention,
                                   const TokenPartition& part) {
  const std::size_t n = part.num_tokens();
  const double k = static_cast<double>(part.selected.size());
  auto m_sel = eng.constant(detail::indicator_column(n, part.selected));
  auto in_set = eng.matmul(avg_attention, m_sel);  // N x 1
  auto ones = eng.constant(Tensor({n, 1}, 1.0));
  auto gap = eng.sub(ones, in_set);
  auto sq = eng.mul(gap, gap);
  auto sel_rows = eng.gather_rows(sq, part.selected);
  return eng.scale(eng.sum(sel_rows), 1.0 / k);
}

/// Mean of the per-head attention maps.
template <class E>
typename E::Handle head_mean(E& eng, const std::vector<typename E::Handle>& heads) {
  if (heads.empty()) throw ContractError("head_mean: no attention maps");
  typename E::Handle acc = heads[0];
  for (std::size_t h = 1; h < heads.size(); ++h) acc = eng.add(acc, heads[h]);
  return eng.scale(acc, 1.0 / static_cast<double>(heads.size()));
}

inline double inter_loss(const PartitionedAttention& pa) {
  pa.validate();
  EagerEngine eng;
  return inter_loss_node(eng, pa.attention, pa.partition).data[0];
}

inline double intra_loss(const PartitionedAttention& pa) {
  pa.validate();
  EagerEngine eng;
  return intra_loss_node(eng, pa.attention, pa.partition).data[0];
}

/// Builds the cut loss over all layers of a finetune-mode trace: per layer,
/// head-averaged attention partitioned by that layer's token partition, then
/// sum of inter + intra. Returns the total node plus per-layer term nodes.
template <class E>
struct CutLossNodes {
  typename E::Handle total{};
  std::vector<typename E::Handle> inter;
  std::vector<typename E::Handle> intra;
  std::vector<typename E::Handle> head_avg;  // per-layer head-averaged attention
};

template <class E>
CutLossNodes<E> total_cut_loss_node(E& eng,
                                    const std::vector<LayerTraceT<typename E::Handle>>& traces) {
  CutLossNodes<E> out;
  bool first = true;
  for (const auto& trace : traces) {
    if (!trace.full_attention || trace.attention.empty()) {
      throw ContractError("cut loss: trace lacks full attention (finetune mode required)");
    }
    auto avg = head_mean(eng, trace.attention);
    out.head_avg.push_back(avg);
    auto inter = inter_loss_node(eng, avg, trace.partition);
    auto intra = intra_loss_node(eng, avg, trace.partition);
    out.inter.push_back(inter);
    out.intra.push_back(intra);
    auto layer_sum = eng.add(inter, intra);
    out.total = first ? layer_sum : eng.add(out.total, layer_sum);
    first = false;
  }
  if (first) throw ContractError("cut loss: empty trace");
  return out;
}

/// Eager evaluation over a single sample's traces.
inline CutLossTerms total_cut_loss(const std::vector<LayerTrace>& traces) {
  EagerEngine eng;
  CutLossNodes<EagerEngine> nodes = total_cut_loss_node(eng, traces);
  CutLossTerms terms;
  for (std::size_t l = 0; l < nodes.inter.size(); ++l) {
    terms.inter.push_back(nodes.inter[l].data[0]);
    terms.intra.push_back(nodes.intra[l].data[0]);
  }
  terms.total = nodes.total.data[0];
  return terms;
}

/// Raw cross-set attention mass of one layer, (Cut(S,I) + Cut_{S\0}(I,S)) / N;
/// the quantity the inter loss drives down. Zero when I is empty.
inline double cross_set_mass(const Tensor& avg_attention, const TokenPartition& part) {
  if (part.idle.empty()) return 0.0;
  std::vector<std::size_t> s_no_cls(part.selected.begin() + 1, part.selected.end());
  const double cut = graph_cut(avg_attention, part.selected, part.idle) +
                     graph_cut(avg_attention, part.idle, s_no_cls);
  return cut / static_cast<double>(part.num_tokens());
}

/// Mean cross-set mass over the layers of a finetune trace that have a
/// nonempty idle set; 0 when no layer idles tokens.
inline double mean_cross_set_mass(const std::vector<LayerTrace>& traces) {
  EagerEngine eng;
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& t : traces) {
    if (t.partition.idle.empty()) continue;
    if (!t.full_attention) throw ContractError("cross-set mass: full attention required");
    Tensor avg = head_mean(eng, t.attention);
    sum += cross_set_mass(avg, t.partition);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

}  // namespace vitidle
