#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// A Tape owns every intermediate value produced during one forward pass.
// Var is a lightweight handle (tape pointer + node index). Nodes are
// appended in evaluation order, so parents always precede children and the
// backward sweep is a single reverse scan.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mimax/errors.hpp"
#include "mimax/tensor.hpp"

namespace mimax {

/// Floor added to row norms before division.
inline constexpr double kNormEpsilon = 1e-12;

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  enum class Mode { kRecord, kNoGrad };

  // Receives the gradient flowing into the node's output. Parent gradient
  // buffers are reached through Tape::grad_sink.
  using Backward =
      std::function<void(Tape&, const Tensor& out_grad, const Tensor& out)>;

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::kRecord; }

  /// Leaf that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  /// Leaf whose gradient is accumulated by backward().
  Var parameter(Tensor value) {
    return push(std::move(value), recording(), nullptr);
  }

  /// Records an op output. The node requires grad iff any parent does.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id()].requires_grad;
    }
    needs = needs && recording();
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Tensor& value(const Var& v) const {
    check_owner(v);
    return nodes_[v.id()].value;
  }

  bool requires_grad(const Var& v) const {
    check_owner(v);
    return nodes_[v.id()].requires_grad;
  }

  /// Gradient buffer for `v`, allocated on first use; nullptr when `v` does
  /// not take part in differentiation.
  Tensor* grad_sink(const Var& v) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return nullptr;
    if (!n.grad) n.grad = Tensor::zeros(n.value.shape());
    return &*n.grad;
  }

  /// Reverse sweep from a scalar. Each node is visited at most once.
  void backward(const Var& loss) {
    check_owner(loss);
    if (value(loss).size() != 1) {
      throw DimensionError("backward() needs a scalar, got " +
                           shape_string(value(loss).shape()));
    }
    for (Node& n : nodes_) n.grad.reset();
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Tensor::filled(value(loss).shape(), 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.grad) continue;
      // The node's own buffer is complete once all children have run.
      n.backward(*this, *n.grad, n.value);
      ++visits_;
    }
  }

  /// Gradient of the last backward() w.r.t. `v`; zeros if unreached.
  Tensor grad(const Var& v) const {
    check_owner(v);
    const Node& n = nodes_[v.id()];
    return n.grad ? *n.grad : Tensor::zeros(n.value.shape());
  }

  bool has_grad(const Var& v) const {
    check_owner(v);
    return nodes_[v.id()].grad.has_value();
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return visits_; }

  void check_owner(const Var& v) const {
    if (v.tape() != this) {
      throw std::invalid_argument("Var belongs to a different tape");
    }
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    Backward backward;
    std::optional<Tensor> grad;
  };

  Var push(Tensor value, bool requires_grad, Backward fn) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(fn), {}});
    return Var(this, nodes_.size() - 1);
  }

  Mode mode_;
  // deque keeps references to earlier values stable while appending.
  std::deque<Node> nodes_;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " +
                         shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
  }
}

template <typename Fwd, typename Deriv>
Var unary_elementwise(const Var& x, Fwd fwd, Deriv deriv) {
  const Tensor& xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  Tape& t = *x.tape();
  return t.record(Tensor(xv.shape(), std::move(out)), {x},
                  [x, deriv](Tape& tape, const Tensor& g, const Tensor&) {
                    Tensor* gx = tape.grad_sink(x);
                    if (!gx) return;
                    const Tensor& xv = x.value();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      (*gx)[i] += g[i] * deriv(xv[i]);
                    }
                  });
}

// Row-wise softmax-style helper: log(sum_j exp(v_j)) over the given values.
inline double log_sum_exp(const double* v, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) m = std::max(m, v[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(v[j] - m);
  return m + std::log(s);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  if (bv.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " +
                         shape_string(av.shape()) + " * " +
                         shape_string(bv.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      const double* brow = bv.data().data() + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += s * brow[j];
    }
  }
  return a.tape()->record(
      Tensor({n, m}, std::move(out)), {a, b},
      [a, b, n, k, m](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        if (Tensor* ga = t.grad_sink(a)) {
          // ga += g * b^T
          for (std::size_t i = 0; i < n; ++i) {
            const double* grow = g.data().data() + i * m;
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = bv.data().data() + p * m;
              double s = 0.0;
              for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
              (*ga)[i * k + p] += s;
            }
          }
        }
        if (Tensor* gb = t.grad_sink(b)) {
          // gb += a^T * g
          double* gbd = gb->mutable_data().data();
          for (std::size_t i = 0; i < n; ++i) {
            const double* grow = g.data().data() + i * m;
            for (std::size_t p = 0; p < k; ++p) {
              const double s = av[i * k + p];
              double* dst = gbd + p * m;
              for (std::size_t j = 0; j < m; ++j) dst[j] += s * grow[j];
            }
          }
        }
      });
}

inline Var transpose(const Var& x) {
  detail::require_rank(x, 2, "transpose");
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return x.tape()->record(Tensor({c, r}, std::move(out)), {x},
                          [x, r, c](Tape& t, const Tensor& g, const Tensor&) {
                            Tensor* gx = t.grad_sink(x);
                            if (!gx) return;
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                (*gx)[i * c + j] += g[j * r + i];
                          });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape()->record(Tensor(av.shape(), std::move(out)), {a, b},
                          [a, b](Tape& t, const Tensor& g, const Tensor&) {
                            for (const Var& p : {a, b}) {
                              if (Tensor* gp = t.grad_sink(p)) {
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  (*gp)[i] += g[i];
                              }
                            }
                          });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape()->record(Tensor(av.shape(), std::move(out)), {a, b},
                          [a, b](Tape& t, const Tensor& g, const Tensor&) {
                            if (Tensor* ga = t.grad_sink(a))
                              for (std::size_t i = 0; i < g.size(); ++i)
                                (*ga)[i] += g[i];
                            if (Tensor* gb = t.grad_sink(b))
                              for (std::size_t i = 0; i < g.size(); ++i)
                                (*gb)[i] -= g[i];
                          });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape()->record(Tensor(av.shape(), std::move(out)), {a, b},
                          [a, b](Tape& t, const Tensor& g, const Tensor&) {
                            const Tensor& av = a.value();
                            const Tensor& bv = b.value();
                            if (Tensor* ga = t.grad_sink(a))
                              for (std::size_t i = 0; i < g.size(); ++i)
                                (*ga)[i] += g[i] * bv[i];
                            if (Tensor* gb = t.grad_sink(b))
                              for (std::size_t i = 0; i < g.size(); ++i)
                                (*gb)[i] += g[i] * av[i];
                          });
}

inline Var scalar_mul(const Var& x, double c) {
  return detail::unary_elementwise(
      x, [c](double v) { return c * v; }, [c](double) { return c; });
}

inline Var add_scalar(const Var& x, double c) {
  return detail::unary_elementwise(
      x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

inline Var neg(const Var& x) { return scalar_mul(x, -1.0); }

inline Var exp(const Var& x) {
  const Tensor& xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  return x.tape()->record(Tensor(xv.shape(), std::move(out)), {x},
                          [x](Tape& t, const Tensor& g, const Tensor& y) {
                            Tensor* gx = t.grad_sink(x);
                            if (!gx) return;
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gx)[i] += g[i] * y[i];
                          });
}

inline Var log(const Var& x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) {
      throw DomainError("log of non-positive value " + std::to_string(v));
    }
  }
  return detail::unary_elementwise(
      x, [](double v) { return std::log(v); },
      [](double v) { return 1.0 / v; });
}

/// Subgradient at exactly zero is 0.
inline Var relu(const Var& x) {
  return detail::unary_elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

/// log(1 + e^x), evaluated without overflow.
inline double softplus(double v) {
  return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

inline double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var softplus(const Var& x) {
  return detail::unary_elementwise(
      x, [](double v) { return softplus(v); },
      [](double v) { return sigmoid(v); });
}

/// Identity forward; blocks every gradient into `x` and its ancestors.
inline Var stop_gradient(const Var& x) {
  return x.tape()->constant(x.value());
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->record(Tensor::scalar(s), {x},
                          [x](Tape& t, const Tensor& g, const Tensor&) {
                            Tensor* gx = t.grad_sink(x);
                            if (!gx) return;
                            const double gv = g[0];
                            for (double& v : gx->mutable_data()) v += gv;
                          });
}

inline Var mean(const Var& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scalar_mul(sum(x), 1.0 / static_cast<double>(n));
}

namespace detail {

// Splits a rank-2 tensor into `groups` lanes of `len` elements for an axis
// reduction. lane(gi, li) gives the flat index.
struct AxisLayout {
  std::size_t groups, len, rows, cols;
  bool along_rows;  // axis 0: reduce down columns
  std::size_t index(std::size_t group, std::size_t pos) const {
    return along_rows ? pos * cols + group : group * cols + pos;
  }
};

inline AxisLayout axis_layout(const Var& x, int axis, const char* op) {
  const Tensor& xv = x.value();
  if (xv.rank() == 1 && axis == 0) {
    return {1, xv.size(), xv.size(), 1, true};
  }
  require_rank(x, 2, op);
  if (axis == 0) return {xv.cols(), xv.rows(), xv.rows(), xv.cols(), true};
  if (axis == 1) return {xv.rows(), xv.cols(), xv.rows(), xv.cols(), false};
  throw DimensionError(std::string(op) + ": axis must be 0 or 1");
}

inline Shape reduced_shape(const Var& x, const AxisLayout& l) {
  if (x.value().rank() == 1) return {};
  return {l.groups};
}

}  // namespace detail

inline Var mean(const Var& x, int axis) {
  const auto l = detail::axis_layout(x, axis, "mean");
  if (l.len == 0) throw DimensionError("mean over empty axis");
  const Tensor& xv = x.value();
  std::vector<double> out(l.groups, 0.0);
  for (std::size_t gi = 0; gi < l.groups; ++gi) {
    double s = 0.0;
    for (std::size_t p = 0; p < l.len; ++p) s += xv[l.index(gi, p)];
    out[gi] = s / static_cast<double>(l.len);
  }
  return x.tape()->record(
      Tensor(detail::reduced_shape(x, l), std::move(out)), {x},
      [x, l](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        const double inv = 1.0 / static_cast<double>(l.len);
        for (std::size_t gi = 0; gi < l.groups; ++gi)
          for (std::size_t p = 0; p < l.len; ++p)
            (*gx)[l.index(gi, p)] += g[gi] * inv;
      });
}

/// Variance along `axis`; population (divide by n) unless `unbiased`.
inline Var variance(const Var& x, int axis, bool unbiased = false) {
  const auto l = detail::axis_layout(x, axis, "variance");
  if (l.len == 0 || (unbiased && l.len < 2)) {
    throw DimensionError("variance needs at least " +
                         std::string(unbiased ? "2" : "1") +
                         " values along the axis");
  }
  const double denom = static_cast<double>(unbiased ? l.len - 1 : l.len);
  const Tensor& xv = x.value();
  std::vector<double> means(l.groups), out(l.groups);
  for (std::size_t gi = 0; gi < l.groups; ++gi) {
    double s = 0.0;
    for (std::size_t p = 0; p < l.len; ++p) s += xv[l.index(gi, p)];
    const double m = s / static_cast<double>(l.len);
    double ss = 0.0;
    for (std::size_t p = 0; p < l.len; ++p) {
      const double d = xv[l.index(gi, p)] - m;
      ss += d * d;
    }
    means[gi] = m;
    out[gi] = ss / denom;
  }
  return x.tape()->record(
      Tensor(detail::reduced_shape(x, l), std::move(out)), {x},
      [x, l, denom, means = std::move(means)](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        const Tensor& xv = x.value();
        for (std::size_t gi = 0; gi < l.groups; ++gi)
          for (std::size_t p = 0; p < l.len; ++p) {
            const std::size_t idx = l.index(gi, p);
            (*gx)[idx] += g[gi] * 2.0 * (xv[idx] - means[gi]) / denom;
          }
      });
}

// ---------------------------------------------------------------------------
// Row-broadcast helpers (rank-2 x with a length-cols vector)

inline Var add_row(const Var& x, const Var& v) {
  detail::require_rank(x, 2, "add_row");
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (vv.size() != c) {
    throw DimensionError("add_row: vector of " + std::to_string(vv.size()) +
                         " for " + std::to_string(c) + " columns");
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + vv[j];
  return x.tape()->record(Tensor({r, c}, std::move(out)), {x, v},
                          [x, v, r, c](Tape& t, const Tensor& g, const Tensor&) {
                            if (Tensor* gx = t.grad_sink(x))
                              for (std::size_t i = 0; i < r * c; ++i)
                                (*gx)[i] += g[i];
                            if (Tensor* gv = t.grad_sink(v))
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  (*gv)[j] += g[i * c + j];
                          });
}

inline Var mul_row(const Var& x, const Var& v) {
  detail::require_rank(x, 2, "mul_row");
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (vv.size() != c) {
    throw DimensionError("mul_row: vector of " + std::to_string(vv.size()) +
                         " for " + std::to_string(c) + " columns");
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * vv[j];
  return x.tape()->record(Tensor({r, c}, std::move(out)), {x, v},
                          [x, v, r, c](Tape& t, const Tensor& g, const Tensor&) {
                            const Tensor& xv = x.value();
                            const Tensor& vv = v.value();
                            if (Tensor* gx = t.grad_sink(x))
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  (*gx)[i * c + j] += g[i * c + j] * vv[j];
                            if (Tensor* gv = t.grad_sink(v))
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  (*gv)[j] += g[i * c + j] * xv[i * c + j];
                          });
}

/// Per-column (x - mean) / sqrt(var + eps) with population variance.
/// Gradients flow through the batch statistics.
inline Var batch_standardize(const Var& x, double eps) {
  detail::require_rank(x, 2, "batch_standardize");
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (n == 0) throw DimensionError("batch_standardize on empty batch");
  std::vector<double> inv_std(d), out(n * d);
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += xv[i * d + j];
    const double m = s / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = xv[i * d + j] - m;
      ss += c * c;
    }
    inv_std[j] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t i = 0; i < n; ++i)
      out[i * d + j] = (xv[i * d + j] - m) * inv_std[j];
  }
  return x.tape()->record(
      Tensor({n, d}, std::move(out)), {x},
      [x, n, d, inv_std = std::move(inv_std)](Tape& tape, const Tensor& g,
                                              const Tensor& yv) {
        Tensor* gx = tape.grad_sink(x);
        if (!gx) return;
        const double nn = static_cast<double>(n);
        for (std::size_t j = 0; j < d; ++j) {
          double sg = 0.0, sgy = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            sg += g[i * d + j];
            sgy += g[i * d + j] * yv[i * d + j];
          }
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = i * d + j;
            (*gx)[k] += inv_std[j] / nn * (nn * g[k] - sg - yv[k] * sgy);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Row geometry

/// Divides each row by (||row|| + kNormEpsilon). Rows with norm below
/// kNormEpsilon are rejected.
inline Var l2_normalize_rows(const Var& x) {
  detail::require_rank(x, 2, "l2_normalize_rows");
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  std::vector<double> norms(n), out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[i * d + j] * xv[i * d + j];
    norms[i] = std::sqrt(ss);
    if (!(norms[i] >= kNormEpsilon)) {
      throw DegenerateRowError("row " + std::to_string(i) + " has norm " +
                               std::to_string(norms[i]) +
                               " below the normalization floor");
    }
    const double inv = 1.0 / (norms[i] + kNormEpsilon);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * inv;
  }
  return x.tape()->record(
      Tensor({n, d}, std::move(out)), {x},
      [x, n, d, norms = std::move(norms)](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        const Tensor& xv = x.value();
        for (std::size_t i = 0; i < n; ++i) {
          const double nr = norms[i];
          const double den = nr + kNormEpsilon;
          double xg = 0.0;
          for (std::size_t j = 0; j < d; ++j) xg += xv[i * d + j] * g[i * d + j];
          const double c = xg / (nr * den * den);
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t k = i * d + j;
            (*gx)[k] += g[k] / den - xv[k] * c;
          }
        }
      });
}

/// Entry (i, j) is the cosine between row i of `a` and row j of `b`.
inline Var cosine_sim_matrix(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "cosine_sim_matrix");
  detail::require_rank(b, 2, "cosine_sim_matrix");
  if (a.value().cols() != b.value().cols()) {
    throw DimensionError("cosine_sim_matrix: feature dimensions differ");
  }
  return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

// ---------------------------------------------------------------------------
// Square-matrix reductions used by the contrastive estimators

inline void require_square(const Var& s, const char* op) {
  detail::require_rank(s, 2, op);
  if (s.value().rows() != s.value().cols()) {
    throw DimensionError(std::string(op) + ": matrix must be square, got " +
                         shape_string(s.shape()));
  }
}

inline Var diag(const Var& s) {
  require_square(s, "diag");
  const Tensor& sv = s.value();
  const std::size_t n = sv.rows();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = sv[i * n + i];
  return s.tape()->record(Tensor({n}, std::move(out)), {s},
                          [s, n](Tape& t, const Tensor& g, const Tensor&) {
                            Tensor* gs = t.grad_sink(s);
                            if (!gs) return;
                            for (std::size_t i = 0; i < n; ++i)
                              (*gs)[i * n + i] += g[i];
                          });
}

/// Mean over the n(n-1) entries with i != j.
inline Var offdiag_mean(const Var& s) {
  require_square(s, "offdiag_mean");
  const Tensor& sv = s.value();
  const std::size_t n = sv.rows();
  if (n < 2) throw InsufficientNegativesError("offdiag_mean needs n >= 2");
  const double count = static_cast<double>(n) * static_cast<double>(n - 1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) row += sv[i * n + j];
    total += row;
  }
  return s.tape()->record(Tensor::scalar(total / count), {s},
                          [s, n, count](Tape& t, const Tensor& g, const Tensor&) {
                            Tensor* gs = t.grad_sink(s);
                            if (!gs) return;
                            const double w = g[0] / count;
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                if (j != i) (*gs)[i * n + j] += w;
                          });
}

/// log( mean_{i != j} exp(s_ij) ), via a max-shifted sum.
inline Var offdiag_logmeanexp(const Var& s) {
  require_square(s, "offdiag_logmeanexp");
  const Tensor& sv = s.value();
  const std::size_t n = sv.rows();
  if (n < 2) {
    throw InsufficientNegativesError("offdiag_logmeanexp needs n >= 2");
  }
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) m = std::max(m, sv[i * n + j]);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) row += std::exp(sv[i * n + j] - m);
    total += row;
  }
  const double count = static_cast<double>(n) * static_cast<double>(n - 1);
  const double lse = m + std::log(total);
  return s.tape()->record(
      Tensor::scalar(lse - std::log(count)), {s},
      [s, n, lse](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* gs = t.grad_sink(s);
        if (!gs) return;
        const Tensor& sv = s.value();
        const double gv = g[0];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j)
            if (j != i) (*gs)[i * n + j] += gv * std::exp(sv[i * n + j] - lse);
      });
}

/// Per-row log(sum_j exp(s_ij)) over all columns.
inline Var logsumexp_rows(const Var& s) {
  detail::require_rank(s, 2, "logsumexp_rows");
  const Tensor& sv = s.value();
  const std::size_t n = sv.rows(), m = sv.cols();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = detail::log_sum_exp(sv.data().data() + i * m, m);
  return s.tape()->record(Tensor({n}, std::move(out)), {s},
                  [s, n, m](Tape& tape, const Tensor& g, const Tensor& yv) {
                    Tensor* gs = tape.grad_sink(s);
                    if (!gs) return;
                    const Tensor& sv = s.value();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < m; ++j)
                        (*gs)[i * m + j] +=
                            g[i] * std::exp(sv[i * m + j] - yv[i]);
                  });
}

// ---------------------------------------------------------------------------
// Pairwise score reductions
//
// These reduce S = scale * a b^T (a: n x d, b: n x d) without storing S.
// Rows of S are recomputed on the fly in both sweeps, so memory stays O(nd).

enum class PairReduction {
  kOffdiagLogMeanExp,    // log mean_{i != j} exp(s_ij)
  kMeanRowLogSumExp,     // mean_i log sum_j exp(s_ij)
  kOffdiagMeanSoftplus,  // mean_{i != j} softplus(s_ij)
};

namespace detail {

inline double log_add_exp(double acc, double x) {
  if (x == -std::numeric_limits<double>::infinity()) return acc;
  if (acc == -std::numeric_limits<double>::infinity()) return x;
  return acc > x ? acc + std::log1p(std::exp(x - acc))
                 : x + std::log1p(std::exp(acc - x));
}

inline void score_row(const double* a_row, const double* b, std::size_t n,
                      std::size_t d, double scale, double* out) {
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * d;
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += a_row[k] * bj[k];
    out[j] = scale * s;
  }
}

}  // namespace detail

inline Var pairwise_score_reduce(const Var& a, const Var& b, double scale,
                                 PairReduction kind) {
  detail::require_rank(a, 2, "pairwise_score_reduce");
  detail::require_same_shape(a, b, "pairwise_score_reduce");
  const std::size_t n = a.value().rows(), d = a.value().cols();
  if (n < 2) {
    throw InsufficientNegativesError("pairwise_score_reduce needs n >= 2");
  }
  const double* ad = a.value().data().data();
  const double* bd = b.value().data().data();
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1);
  const double neg_inf = -std::numeric_limits<double>::infinity();

  std::vector<double> row(n);
  std::vector<double> row_lse;  // per-row normalizer for kMeanRowLogSumExp
  double acc = kind == PairReduction::kOffdiagLogMeanExp ? neg_inf : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    detail::score_row(ad + i * d, bd, n, d, scale, row.data());
    switch (kind) {
      case PairReduction::kOffdiagLogMeanExp: {
        double m = neg_inf;
        for (std::size_t j = 0; j < n; ++j)
          if (j != i) m = std::max(m, row[j]);
        double r = 0.0;
        for (std::size_t j = 0; j < i; ++j) r += std::exp(row[j] - m);
        for (std::size_t j = i + 1; j < n; ++j) r += std::exp(row[j] - m);
        acc = detail::log_add_exp(acc, m + std::log(r));
        break;
      }
      case PairReduction::kMeanRowLogSumExp:
        row_lse.push_back(detail::log_sum_exp(row.data(), n));
        acc += row_lse.back();
        break;
      case PairReduction::kOffdiagMeanSoftplus:
        for (std::size_t j = 0; j < n; ++j)
          if (j != i) acc += softplus(row[j]);
        break;
    }
  }
  double value = 0.0;
  switch (kind) {
    case PairReduction::kOffdiagLogMeanExp:
      value = acc - std::log(pairs);
      break;
    case PairReduction::kMeanRowLogSumExp:
      value = acc / static_cast<double>(n);
      break;
    case PairReduction::kOffdiagMeanSoftplus:
      value = acc / pairs;
      break;
  }
  const double lse_total = acc;
  return a.tape()->record(
      Tensor::scalar(value), {a, b},
      [a, b, n, d, scale, kind, lse_total, pairs,
       row_lse = std::move(row_lse)](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* ga = t.grad_sink(a);
        Tensor* gb = t.grad_sink(b);
        if (!ga && !gb) return;
        const double* ad = a.value().data().data();
        const double* bd = b.value().data().data();
        std::vector<double> w(n);
        std::vector<double> acc_a(d);
        for (std::size_t i = 0; i < n; ++i) {
          detail::score_row(ad + i * d, bd, n, d, scale, w.data());
          switch (kind) {
            case PairReduction::kOffdiagLogMeanExp:
              for (std::size_t j = 0; j < n; ++j)
                w[j] = g[0] * std::exp(w[j] - lse_total);
              w[i] = 0.0;
              break;
            case PairReduction::kMeanRowLogSumExp: {
              const double c = g[0] / static_cast<double>(n);
              for (std::size_t j = 0; j < n; ++j)
                w[j] = c * std::exp(w[j] - row_lse[i]);
              break;
            }
            case PairReduction::kOffdiagMeanSoftplus: {
              const double c = g[0] / pairs;
              for (std::size_t j = 0; j < n; ++j) w[j] = c * sigmoid(w[j]);
              w[i] = 0.0;
              break;
            }
          }
          // dS_ij = w_j; da_i += scale * sum_j w_j b_j, db_j += scale w_j a_i.
          if (ga) {
            std::fill(acc_a.begin(), acc_a.end(), 0.0);
            for (std::size_t j = 0; j < n; ++j) {
              const double* bj = bd + j * d;
              for (std::size_t k = 0; k < d; ++k) acc_a[k] += w[j] * bj[k];
            }
            double* gai = ga->mutable_data().data() + i * d;
            for (std::size_t k = 0; k < d; ++k) gai[k] += scale * acc_a[k];
          }
          if (gb) {
            const double* ai = ad + i * d;
            double* gbd = gb->mutable_data().data();
            for (std::size_t j = 0; j < n; ++j) {
              const double sw = scale * w[j];
              for (std::size_t k = 0; k < d; ++k) gbd[j * d + k] += sw * ai[k];
            }
          }
        }
      });
}

}  // namespace mimax
