#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "vitidle/errors.hpp"
#include "vitidle/kernels.hpp"
#include "vitidle/tensor.hpp"

namespace vitidle {

// Two execution engines share one op vocabulary so the same templated model
// builders run either eagerly (values only) or on a tape (reverse-mode
// differentiation over the fixed op set). Both call the kernels in the same
// order, which keeps their outputs bit-identical.

/// Evaluates ops immediately; a handle is the value itself.
class EagerEngine {
 public:
  using Handle = Tensor;

  Handle input(Tensor v) { return v; }
  Handle constant(Tensor v) { return v; }
  const Tensor& value(const Handle& h) const { return h; }

  Handle add(const Handle& a, const Handle& b) { return kernels::add(a, b); }
  Handle sub(const Handle& a, const Handle& b) { return kernels::sub(a, b); }
  Handle mul(const Handle& a, const Handle& b) { return kernels::mul(a, b); }
  Handle scale(const Handle& a, double c) { return kernels::scale(a, c); }
  Handle add_row(const Handle& m, const Handle& v) { return kernels::add_row(m, v); }
  Handle matmul(const Handle& a, const Handle& b) { return kernels::matmul(a, b); }
  Handle transpose(const Handle& a) { return kernels::transpose(a); }
  Handle row_softmax(const Handle& m, double s) { return kernels::row_softmax(m, s); }
  Handle row_log_softmax(const Handle& m) { return kernels::row_log_softmax(m); }
  Handle layer_norm(const Handle& x, const Handle& g, const Handle& b, double eps) {
    return kernels::layer_norm(x, g, b, eps);
  }
  Handle gelu(const Handle& x) { return kernels::gelu(x); }
  Handle gather_rows(const Handle& x, const std::vector<std::size_t>& idx) {
    return kernels::gather_rows(x, idx);
  }
  Handle scatter_rows(const Handle& base, const Handle& rows,
                      const std::vector<std::size_t>& idx) {
    return kernels::scatter_rows(base, rows, idx);
  }
  Handle concat_rows(const Handle& a, const Handle& b) { return kernels::concat_rows(a, b); }
  Handle sum(const Handle& x) { return Tensor({1, 1}, kernels::sum_all(x)); }
};

/// Records every op in topological order; backward() replays adjoints in
/// reverse. One tape per training thread, never shared mid-build.
class Tape {
 public:
  using Handle = std::int32_t;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Handle input(Tensor v) { return push(std::move(v), nullptr); }
  Handle constant(Tensor v) { return push(std::move(v), nullptr); }

  const Tensor& value(Handle h) const { return nodes_[check(h)].value; }

  /// Adjoint of node h from the most recent backward().
  const Tensor& grad(Handle h) const {
    if (!ran_backward_) throw ContractError("tape: grad read before backward");
    return nodes_[check(h)].adj;
  }

  std::size_t size() const { return nodes_.size(); }

  Handle add(Handle a, Handle b) {
    Tensor v = kernels::add(value(a), value(b));
    return push(std::move(v), [a, b](Tape& t, Handle out) {
      t.accumulate(a, t.adj(out));
      t.accumulate(b, t.adj(out));
    });
  }

  Handle sub(Handle a, Handle b) {
    Tensor v = kernels::sub(value(a), value(b));
    return push(std::move(v), [a, b](Tape& t, Handle out) {
      const Tensor& g = t.adj(out);
      t.accumulate(a, g);
      Tensor neg = kernels::scale(g, -1.0);
      t.accumulate(b, neg);
    });
  }

  Handle mul(Handle a, Handle b) {
    Tensor v = kernels::mul(value(a), value(b));
    return push(std::move(v), [a, b](Tape& t, Handle out) {
      const Tensor& g = t.adj(out);
      Tensor da = kernels::mul(g, t.value(b));
      Tensor db = kernels::mul(g, t.value(a));
      t.accumulate(a, da);
      t.accumulate(b, db);
    });
  }

  Handle scale(Handle a, double c) {
    Tensor v = kernels::scale(value(a), c);
    return push(std::move(v), [a, c](Tape& t, Handle out) {
      Tensor da = kernels::scale(t.adj(out), c);
      t.accumulate(a, da);
    });
  }

  Handle add_row(Handle m, Handle v) {
    Tensor out = kernels::add_row(value(m), value(v));
    return push(std::move(out), [m, v](Tape& t, Handle o) {
      const Tensor& g = t.adj(o);
      t.accumulate(m, g);
      Tensor dv({1, g.cols()});
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) dv.data[j] += g.at(i, j);
      }
      t.accumulate(v, dv);
    });
  }

  Handle matmul(Handle a, Handle b) {
    Tensor v = kernels::matmul(value(a), value(b));
    return push(std::move(v), [a, b](Tape& t, Handle out) {
      const Tensor& g = t.adj(out);
      Tensor da = kernels::matmul(g, kernels::transpose(t.value(b)));
      Tensor db = kernels::matmul(kernels::transpose(t.value(a)), g);
      t.accumulate(a, da);
      t.accumulate(b, db);
    });
  }

  Handle transpose(Handle a) {
    Tensor v = kernels::transpose(value(a));
    return push(std::move(v), [a](Tape& t, Handle out) {
      Tensor da = kernels::transpose(t.adj(out));
      t.accumulate(a, da);
    });
  }

  Handle row_softmax(Handle m, double s) {
    Tensor v = kernels::row_softmax(value(m), s);
    return push(std::move(v), [m, s](Tape& t, Handle out) {
      const Tensor& y = t.value(out);
      const Tensor& g = t.adj(out);
      Tensor dm = y;  // reuse shape
      const std::size_t c = y.cols();
      for (std::size_t i = 0; i < y.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
        for (std::size_t j = 0; j < c; ++j) {
          dm.at(i, j) = y.at(i, j) * (g.at(i, j) - dot) / s;
        }
      }
      t.accumulate(m, dm);
    });
  }

  Handle row_log_softmax(Handle m) {
    Tensor v = kernels::row_log_softmax(value(m));
    return push(std::move(v), [m](Tape& t, Handle out) {
      const Tensor& y = t.value(out);
      const Tensor& g = t.adj(out);
      Tensor dm = y;
      const std::size_t c = y.cols();
      for (std::size_t i = 0; i < y.rows(); ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < c; ++j) gsum += g.at(i, j);
        for (std::size_t j = 0; j < c; ++j) {
          dm.at(i, j) = g.at(i, j) - std::exp(y.at(i, j)) * gsum;
        }
      }
      t.accumulate(m, dm);
    });
  }

  Handle layer_norm(Handle x, Handle gamma, Handle beta, double eps) {
    Tensor v = kernels::layer_norm(value(x), value(gamma), value(beta), eps);
    return push(std::move(v), [x, gamma, beta, eps](Tape& t, Handle out) {
      const Tensor& xv = t.value(x);
      const Tensor& gm = t.value(gamma);
      const Tensor& g = t.adj(out);
      const std::size_t c = xv.cols();
      const double cn = static_cast<double>(c);
      Tensor dx = xv, dgamma({1, c}), dbeta({1, c});
      for (std::size_t i = 0; i < xv.rows(); ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += xv.at(i, j);
        mean /= cn;
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = xv.at(i, j) - mean;
          var += d * d;
        }
        var /= cn;
        const double inv = 1.0 / std::sqrt(var + eps);
        double h_mean = 0.0, hx_mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double xh = (xv.at(i, j) - mean) * inv;
          const double h = g.at(i, j) * gm.data[j];
          h_mean += h;
          hx_mean += h * xh;
          dgamma.data[j] += g.at(i, j) * xh;
          dbeta.data[j] += g.at(i, j);
        }
        h_mean /= cn;
        hx_mean /= cn;
        for (std::size_t j = 0; j < c; ++j) {
          const double xh = (xv.at(i, j) - mean) * inv;
          const double h = g.at(i, j) * gm.data[j];
          dx.at(i, j) = inv * (h - h_mean - xh * hx_mean);
        }
      }
      t.accumulate(x, dx);
      t.accumulate(gamma, dgamma);
      t.accumulate(beta, dbeta);
    });
  }

  Handle gelu(Handle x) {
    Tensor v = kernels::gelu(value(x));
    return push(std::move(v), [x](Tape& t, Handle out) {
      const Tensor& xv = t.value(x);
      const Tensor& g = t.adj(out);
      Tensor dx = xv;
      for (std::size_t i = 0; i < xv.numel(); ++i) {
        dx.data[i] = g.data[i] * kernels::gelu_derivative(xv.data[i]);
      }
      t.accumulate(x, dx);
    });
  }

  Handle gather_rows(Handle x, const std::vector<std::size_t>& idx) {
    Tensor v = kernels::gather_rows(value(x), idx);
    return push(std::move(v), [x, idx](Tape& t, Handle out) {
      const Tensor& g = t.adj(out);
      Tensor& dst = t.adj_mut(x);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) dst.at(idx[i], j) += g.at(i, j);
      }
    });
  }

  Handle scatter_rows(Handle base, Handle rows, const std::vector<std::size_t>& idx) {
    Tensor v = kernels::scatter_rows(value(base), value(rows), idx);
    return push(std::move(v), [base, rows, idx](Tape& t, Handle out) {
      const Tensor& g = t.adj(out);
      Tensor dbase = g;
      std::vector<bool> replaced(g.rows(), false);
      for (std::size_t r : idx) replaced[r] = true;
      for (std::size_t i = 0; i < g.rows(); ++i) {
        if (!replaced[i]) continue;
        for (std::size_t j = 0; j < g.cols(); ++j) dbase.at(i, j) = 0.0;
      }
      t.accumulate(base, dbase);
      Tensor& drows = t.adj_mut(rows);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) drows.at(i, j) += g.at(idx[i], j);
      }
    });
  }

  Handle concat_rows(Handle a, Handle b) {
    Tensor v = kernels::concat_rows(value(a), value(b));
    return push(std::move(v), [a, b](Tape& t, Handle out) {
      const Tensor& g = t.adj(out);
      const std::size_t ra = t.value(a).rows();
      Tensor& da = t.adj_mut(a);
      for (std::size_t i = 0; i < ra; ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) da.at(i, j) += g.at(i, j);
      }
      Tensor& db = t.adj_mut(b);
      for (std::size_t i = 0; i < db.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) db.at(i, j) += g.at(ra + i, j);
      }
    });
  }

  Handle sum(Handle x) {
    Tensor v({1, 1}, kernels::sum_all(value(x)));
    return push(std::move(v), [x](Tape& t, Handle out) {
      const double g = t.adj(out).data[0];
      Tensor& dx = t.adj_mut(x);
      for (double& d : dx.data) d += g;
    });
  }

  /// Seeds the scalar loss node with adjoint 1 and replays every recorded op
  /// once in reverse. Adjoints are reset first, so repeated calls on the same
  /// tape give identical gradients.
  void backward(Handle loss) {
    check(loss);
    if (nodes_[loss].value.numel() != 1) {
      throw ContractError("backward: loss must be scalar");
    }
    for (Node& n : nodes_) n.adj = Tensor(n.value.dims);
    nodes_[loss].adj.data[0] = 1.0;
    ran_backward_ = true;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].back) nodes_[i].back(*this, static_cast<Handle>(i));
    }
  }

  // Adjoint plumbing used by the recorded backward closures.
  const Tensor& adj(Handle h) { return nodes_[h].adj; }
  Tensor& adj_mut(Handle h) { return nodes_[h].adj; }

  void accumulate(Handle h, const Tensor& delta) {
    Tensor& dst = nodes_[h].adj;
    for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += delta.data[i];
  }

 private:
  struct Node {
    Tensor value;
    Tensor adj;
    std::function<void(Tape&, Handle)> back;
  };

  std::vector<Node> nodes_;
  bool ran_backward_ = false;

  Handle push(Tensor v, std::function<void(Tape&, Handle)> back) {
    nodes_.push_back(Node{std::move(v), Tensor{}, std::move(back)});
    return static_cast<Handle>(nodes_.size() - 1);
  }

  Handle check(Handle h) const {
    if (h < 0 || static_cast<std::size_t>(h) >= nodes_.size()) {
      throw ContractError("tape: handle out of range");
    }
    return h;
  }
};

}  // namespace vitidle
