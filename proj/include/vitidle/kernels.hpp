#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "vitidle/errors.hpp"
#include "vitidle/tensor.hpp"

namespace vitidle::kernels {

// Pure numeric kernels. Every function here is deterministic with a fixed
// reduction order, so identical inputs give bit-identical outputs. These are
// the single implementation shared by eager evaluation and the tape.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  a.require_matrix();
  b.require_matrix();
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner extents differ");
  const std::size_t m = a.rows(), p = a.cols(), n = b.cols();
  Tensor out({m, n});
  // i-k-j order: the k accumulation for each output element stays
  // left-to-right while the inner loop runs contiguously over b's row.
  for (std::size_t i = 0; i < m; ++i) {
    double* out_row = &out.data[i * n];
    for (std::size_t k = 0; k < p; ++k) {
      const double aik = a.data[i * p + k];
      const double* b_row = &b.data[k * n];
      for (std::size_t j = 0; j < n; ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  a.require_matrix();
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("sub: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b.data[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("mul: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b.data[i];
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (double& v : out.data) v *= c;
  return out;
}

/// Adds a 1-by-c row vector to every row of an n-by-c matrix.
inline Tensor add_row(const Tensor& m, const Tensor& v) {
  m.require_matrix();
  v.require_matrix();
  if (v.rows() != 1 || v.cols() != m.cols()) throw ShapeError("add_row: bad bias shape");
  Tensor out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out.at(i, j) += v.data[j];
  }
  return out;
}

/// Row-wise softmax of m/scale, stabilized by per-row max subtraction.
inline Tensor row_softmax(const Tensor& m, double scale) {
  m.require_matrix();
  if (!(scale > 0.0)) throw ContractError("row_softmax: scale must be positive");
  if (!m.all_finite()) throw NumericError("row_softmax: non-finite input");
  Tensor out = m;
  const std::size_t c = m.cols();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double* row = &out.data[i * c];
    double mx = row[0] / scale;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] /= scale;
      mx = std::max(mx, row[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= sum;
  }
  return out;
}

/// Row-wise log softmax (natural log); used by the classification losses.
inline Tensor row_log_softmax(const Tensor& m) {
  m.require_matrix();
  if (!m.all_finite()) throw NumericError("row_log_softmax: non-finite input");
  Tensor out = m;
  const std::size_t c = m.cols();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double* row = &out.data[i * c];
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
  }
  return out;
}

/// Row-wise layer normalization with population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  x.require_matrix();
  gamma.require_matrix();
  beta.require_matrix();
  const std::size_t c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    throw ShapeError("layer_norm: affine extents differ from feature extent");
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double* row = &out.data[i * c];
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = (row[j] - mean) * inv * gamma.data[j] + beta.data[j];
    }
  }
  return out;
}

inline double gelu_scalar(double x) {
  // Exact form x * Phi(x); erfc keeps the negative tail accurate.
  return x * 0.5 * std::erfc(-x * 0.70710678118654752440084436210485);
}

inline double gelu_derivative(double x) {
  const double phi = 0.5 * std::erfc(-x * 0.70710678118654752440084436210485);
  const double pdf = 0.39894228040143267793994605993438 * std::exp(-0.5 * x * x);
  return phi + x * pdf;
}

inline Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data) v = gelu_scalar(v);
  return out;
}

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  x.require_matrix();
  Tensor out({idx.size(), x.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(&x.data[idx[i] * x.cols()], x.cols(), &out.data[i * x.cols()]);
  }
  return out;
}

/// Copy of `base` with row idx[i] replaced by rows[i].
inline Tensor scatter_rows(const Tensor& base, const Tensor& rows,
                           const std::vector<std::size_t>& idx) {
  base.require_matrix();
  rows.require_matrix();
  if (rows.rows() != idx.size() || rows.cols() != base.cols()) {
    throw ShapeError("scatter_rows: extents differ");
  }
  Tensor out = base;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= base.rows()) throw ShapeError("scatter_rows: index out of range");
    std::copy_n(&rows.data[i * rows.cols()], rows.cols(), &out.data[idx[i] * out.cols()]);
  }
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  a.require_matrix();
  b.require_matrix();
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: column extents differ");
  Tensor out({a.rows() + b.rows(), a.cols()});
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
  return out;
}

inline double sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data) s += v;
  return s;
}

}  // namespace vitidle::kernels
