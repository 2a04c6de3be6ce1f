#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "vitidle/engine.hpp"
#include "vitidle/errors.hpp"
#include "vitidle/kernels.hpp"
#include "vitidle/tensor.hpp"

namespace vitidle {

struct LossWeights {
  double alpha = 5.0;   // logit distillation
  double beta = 500.0;  // feature distillation
  double theta = 20.0;  // token cut loss

  void validate() const {
    if (alpha < 0.0 || beta < 0.0 || theta < 0.0) {
      throw ContractError("loss weights must be nonnegative");
    }
  }
};

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double logit = 0.0;
  double feature = 0.0;
  double cut = 0.0;
};

/// Cross entropy of one logit row against an integer label.
template <class E>
typename E::Handle cross_entropy_node(E& eng, typename E::Handle logits, std::size_t label) {
  const std::size_t classes = eng.value(logits).cols();
  if (label >= classes) throw ContractError("cross entropy: label out of range");
  auto logp = eng.row_log_softmax(logits);
  Tensor onehot({classes, 1});
  onehot.data[label] = 1.0;
  auto picked = eng.matmul(logp, eng.constant(onehot));
  return eng.scale(picked, -1.0);
}

/// KL(softmax(teacher) || softmax(student)) for a single logit row; the
/// teacher is a constant.
template <class E>
typename E::Handle kl_logit_node(E& eng, typename E::Handle student_logits,
                                 const Tensor& teacher_logits) {
  const Tensor& sv = eng.value(student_logits);
  if (!sv.same_shape(teacher_logits)) throw ShapeError("kl loss: logit extents differ");
  const Tensor t_logp = kernels::row_log_softmax(teacher_logits);
  Tensor t_prob = t_logp;
  double entropy_term = 0.0;  // sum p_t log p_t, constant in the student
  for (std::size_t i = 0; i < t_prob.numel(); ++i) {
    t_prob.data[i] = std::exp(t_logp.data[i]);
    entropy_term += t_prob.data[i] * t_logp.data[i];
  }
  auto s_logp = eng.row_log_softmax(student_logits);
  Tensor t_col = kernels::transpose(t_prob);
  auto cross = eng.matmul(s_logp, eng.constant(t_col));  // sum p_t log p_s
  return eng.sub(eng.constant(Tensor({1, 1}, entropy_term)), cross);
}

/// Mean squared error between the student feature map and a constant teacher
/// feature map, averaged over all entries.
template <class E>
typename E::Handle feature_mse_node(E& eng, typename E::Handle student_feats,
                                    const Tensor& teacher_feats) {
  const Tensor& sv = eng.value(student_feats);
  if (!sv.same_shape(teacher_feats)) throw ShapeError("feature mse: extents differ");
  auto diff = eng.sub(student_feats, eng.constant(teacher_feats));
  auto sq = eng.mul(diff, diff);
  return eng.scale(eng.sum(sq), 1.0 / static_cast<double>(teacher_feats.numel()));
}

/// Batch-mean KL divergence on output logits (teacher || student), eager.
/// Rows are batch entries.
inline double kl_logit_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (!student_logits.same_shape(teacher_logits)) {
    throw ShapeError("kl loss: logit extents differ");
  }
  EagerEngine eng;
  double total = 0.0;
  const std::size_t rows = student_logits.rows();
  for (std::size_t i = 0; i < rows; ++i) {
    Tensor s = kernels::gather_rows(student_logits, {i});
    Tensor t = kernels::gather_rows(teacher_logits, {i});
    total += kl_logit_node(eng, s, t).data[0];
  }
  return total / static_cast<double>(rows);
}

inline double feature_mse_loss(const Tensor& student_feats, const Tensor& teacher_feats) {
  EagerEngine eng;
  return feature_mse_node(eng, student_feats, teacher_feats).data[0];
}

/// Composite objective: cls + alpha * logit + beta * feature + theta * cut.
inline LossBreakdown total_loss(double cls, double logit, double feature, double cut,
                                const LossWeights& w) {
  w.validate();
  LossBreakdown b;
  b.cls = cls;
  b.logit = logit;
  b.feature = feature;
  b.cut = cut;
  b.total = cls + w.alpha * logit + w.beta * feature + w.theta * cut;
  return b;
}

}  // namespace vitidle
