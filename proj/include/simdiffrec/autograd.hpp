#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every op records its inputs and a closure that pushes the
// output gradient back to them; backward() replays closures in reverse
// topological order. All values are double precision.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "simdiffrec/errors.hpp"

namespace simdiffrec::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix& grad_buffer() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

inline Var parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

namespace detail {

template <class Backward>
Var make_op(Matrix value, std::initializer_list<Var> inputs, Backward&& backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& v : inputs) node->parents.push_back(v.node());
      node->backward = std::forward<Backward>(backward);
    }
  }
  return Var(std::move(node));
}

template <class G>
void accumulate(const std::shared_ptr<Node>& parent, const G& g) {
  if (parent->requires_grad) parent->grad_buffer() += g;
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

/// Runs reverse accumulation from a scalar (1x1) root.
inline void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1)
    throw std::invalid_argument("backward: root must be a 1x1 scalar");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().setOnes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward || node->grad.size() == 0) continue;
    node->backward(*node);
    // Interior gradients are not needed once propagated.
    node->grad.resize(0, 0);
  }
}

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  return detail::make_op(a.value() + b.value(), {a, b}, [](Node& self) {
    detail::accumulate(self.parents[0], self.grad);
    detail::accumulate(self.parents[1], self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  return detail::make_op(a.value() - b.value(), {a, b}, [](Node& self) {
    detail::accumulate(self.parents[0], self.grad);
    detail::accumulate(self.parents[1], -self.grad);
  });
}

inline Var scale(const Var& a, double s) {
  return detail::make_op(a.value() * s, {a}, [s](Node& self) {
    detail::accumulate(self.parents[0], self.grad * s);
  });
}

/// a + s*b, the weighted-sum building block of the joint objective.
inline Var add_scaled(const Var& a, const Var& b, double s) { return add(a, scale(b, s)); }

/// Elementwise product with a constant mask (dropout, masking).
inline Var mul_const(const Var& a, const Matrix& mask) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols())
    throw std::invalid_argument("mul_const: shape mismatch");
  return detail::make_op(a.value().cwiseProduct(mask), {a}, [mask](Node& self) {
    detail::accumulate(self.parents[0], self.grad.cwiseProduct(mask));
  });
}

/// Adds a 1 x c row to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return detail::make_op(std::move(out), {a, row}, [](Node& self) {
    detail::accumulate(self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->grad_buffer() += self.grad.colwise().sum();
  });
}

inline Var gelu(const Var& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  Matrix out = x.value().unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    const Matrix& in = self.parents[0]->value;
    Matrix d = in.unaryExpr([](double v) {
      return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * std::exp(-0.5 * v * v) * kInvSqrt2Pi;
    });
    detail::accumulate(self.parents[0], self.grad.cwiseProduct(d));
  });
}

/// Numerically stable log(sigmoid(x)).
inline double log_sigmoid_value(double v) {
  return v < 0.0 ? v - std::log1p(std::exp(v)) : -std::log1p(std::exp(-v));
}

inline Var log_sigmoid(const Var& x) {
  Matrix out = x.value().unaryExpr([](double v) { return log_sigmoid_value(v); });
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    Matrix d = self.parents[0]->value.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(v)); });
    detail::accumulate(self.parents[0], self.grad.cwiseProduct(d));
  });
}

// ------------------------------------------------------------------ reductions

inline Var sum_all(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    const auto& in = self.parents[0]->value;
    detail::accumulate(self.parents[0], Matrix::Constant(in.rows(), in.cols(), self.grad(0, 0)));
  });
}

inline Var mean_all(const Var& x) {
  if (x.value().size() == 0) throw std::invalid_argument("mean_all: empty input");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Per-row dot product of two equally shaped matrices, returned as n x 1.
inline Var rowwise_dot(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "rowwise_dot");
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad)
      self.parents[0]->grad_buffer() += (bv.array().colwise() * g.col(0).array()).matrix();
    if (self.parents[1]->requires_grad)
      self.parents[1]->grad_buffer() += (av.array().colwise() * g.col(0).array()).matrix();
  });
}

/// Per-row squared Euclidean norm, n x 1.
inline Var row_sqnorm(const Var& x) {
  Matrix out = x.value().rowwise().squaredNorm();
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    if (self.parents[0]->requires_grad)
      self.parents[0]->grad_buffer() += 2.0 * (xv.array().colwise() * self.grad.col(0).array()).matrix();
  });
}

// --------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad)
      self.parents[0]->grad_buffer().noalias() += self.grad * self.parents[1]->value.transpose();
    if (self.parents[1]->requires_grad)
      self.parents[1]->grad_buffer().noalias() += self.parents[0]->value.transpose() * self.grad;
  });
}

/// a * b^T.
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Matrix out = a.value() * b.value().transpose();
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad)
      self.parents[0]->grad_buffer().noalias() += self.grad * self.parents[1]->value;
    if (self.parents[1]->requires_grad)
      self.parents[1]->grad_buffer().noalias() += self.grad.transpose() * self.parents[0]->value;
  });
}

// -------------------------------------------------------------------- indexing

/// Gathers table rows by index. Gradient for `frozen_row` is discarded
/// (used to keep the padding embedding at zero).
inline Var gather_rows(const Var& table, std::span<const int> ids, int frozen_row = -1) {
  const Index n_rows = table.rows();
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= n_rows) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> kept(ids.begin(), ids.end());
  return detail::make_op(std::move(out), {table}, [kept = std::move(kept), frozen_row](Node& self) {
    auto& parent = self.parents[0];
    if (!parent->requires_grad) return;
    Matrix& g = parent->grad_buffer();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (kept[i] == frozen_row) continue;
      g.row(kept[i]) += self.grad.row(static_cast<Index>(i));
    }
  });
}

/// Selects rows of x (a view re-materialised as a new matrix).
inline Var take_rows(const Var& x, std::span<const int> rows) { return gather_rows(x, rows, -1); }

// ------------------------------------------------------------------ normalisers

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Index n = x.rows();
  const Index c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw std::invalid_argument("layer_norm: width mismatch");
  Matrix xhat(n, c);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return detail::make_op(std::move(out), {x, gamma, beta},
                         [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    const Matrix& g = self.grad;
    const auto& gam = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Matrix dxhat = g.array().rowwise() * gam.row(0).array();
      Matrix& dx = self.parents[0]->grad_buffer();
      for (Index i = 0; i < dxhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<double>(dxhat.cols());
        dx.row(i) += ((dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i)).matrix();
      }
    }
    if (self.parents[1]->requires_grad)
      self.parents[1]->grad_buffer() += g.cwiseProduct(xhat).colwise().sum();
    if (self.parents[2]->requires_grad) self.parents[2]->grad_buffer() += g.colwise().sum();
  });
}

/// Scales each row to unit Euclidean norm. Zero rows are a numeric error.
inline Var l2_normalize_rows(const Var& x) {
  const Index n = x.rows();
  Eigen::VectorXd norms(n);
  Matrix out(n, x.cols());
  for (Index i = 0; i < n; ++i) {
    norms(i) = x.value().row(i).norm();
    if (!(norms(i) > 0.0)) throw NumericError("l2_normalize_rows: zero-norm row");
    out.row(i) = x.value().row(i) / norms(i);
  }
  Matrix unit = out;
  return detail::make_op(std::move(out), {x}, [unit = std::move(unit), norms = std::move(norms)](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Matrix& dx = self.parents[0]->grad_buffer();
    for (Index i = 0; i < unit.rows(); ++i) {
      const double proj = unit.row(i).dot(self.grad.row(i));
      dx.row(i) += (self.grad.row(i) - unit.row(i) * proj) / norms(i);
    }
  });
}

// ---------------------------------------------------------------------- losses

/// Mean softmax cross-entropy over rows. `masked_col` (if >= 0) is excluded
/// from the softmax support, i.e. treated as a logit of -infinity.
inline Var cross_entropy_rows(const Var& logits, std::span<const int> targets, int masked_col = -1) {
  const Index n = logits.rows();
  const Index v = logits.cols();
  if (static_cast<Index>(targets.size()) != n) throw std::invalid_argument("cross_entropy_rows: target count");
  if (n == 0) throw std::invalid_argument("cross_entropy_rows: empty input");
  Matrix probs(n, v);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= v || y == masked_col) throw std::out_of_range("cross_entropy_rows: bad target");
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < v; ++j)
      if (j != masked_col) mx = std::max(mx, logits.value()(i, j));
    double z = 0.0;
    for (Index j = 0; j < v; ++j) {
      const double e = (j == masked_col) ? 0.0 : std::exp(logits.value()(i, j) - mx);
      probs(i, j) = e;
      z += e;
    }
    probs.row(i) /= z;
    total += -(logits.value()(i, y) - mx - std::log(z));
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(n);
  std::vector<int> ys(targets.begin(), targets.end());
  return detail::make_op(std::move(out), {logits}, [probs = std::move(probs), ys = std::move(ys)](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Matrix d = probs;
    for (Index i = 0; i < d.rows(); ++i) d(i, ys[static_cast<std::size_t>(i)]) -= 1.0;
    const double s = self.grad(0, 0) / static_cast<double>(d.rows());
    self.parents[0]->grad_buffer() += d * s;
  });
}

/// Batched InfoNCE over precomputed cosine similarities.
///
/// `sims` is B x B with sims(i, j) = sim(anchor_i, positive_view_j); the
/// diagonal holds each anchor's positive and, when `use_in_batch`, the
/// off-diagonal entries of row i are its in-batch negatives. `hard` is B x 1
/// with sim(anchor_i, hard_negative_i), used when `use_hard`. Returns the mean
/// over anchors of -log softmax(positive).
inline Var info_nce_rows(const Var& sims, const Var& hard, double tau, bool use_hard, bool use_in_batch) {
  const Index b = sims.rows();
  if (sims.cols() != b) throw std::invalid_argument("info_nce_rows: sims must be square");
  if (use_hard && hard.rows() != b) throw std::invalid_argument("info_nce_rows: hard-negative count");
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce_rows: tau must be positive");
  if (!use_hard && (!use_in_batch || b < 2))
    throw std::invalid_argument("info_nce_rows: contrastive loss needs at least one negative");

  // weights(i, j): softmax weight of sims(i, j); hard_w(i): weight of hard(i).
  Matrix weights = Matrix::Zero(b, b);
  Eigen::VectorXd hard_w = Eigen::VectorXd::Zero(b);
  double total = 0.0;
  for (Index i = 0; i < b; ++i) {
    const double pos = sims.value()(i, i) / tau;
    double mx = pos;
    if (use_hard) mx = std::max(mx, hard.value()(i, 0) / tau);
    if (use_in_batch)
      for (Index j = 0; j < b; ++j)
        if (j != i) mx = std::max(mx, sims.value()(i, j) / tau);
    double z = std::exp(pos - mx);
    weights(i, i) = z;
    if (use_hard) {
      hard_w(i) = std::exp(hard.value()(i, 0) / tau - mx);
      z += hard_w(i);
    }
    if (use_in_batch)
      for (Index j = 0; j < b; ++j)
        if (j != i) {
          weights(i, j) = std::exp(sims.value()(i, j) / tau - mx);
          z += weights(i, j);
        }
    weights.row(i) /= z;
    hard_w(i) /= z;
    total += -(pos - mx - std::log(z));
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(b);
  auto backward_fn = [weights = std::move(weights), hard_w = std::move(hard_w), tau, use_hard](Node& self) {
    const Index rows = weights.rows();
    const double s = self.grad(0, 0) / (static_cast<double>(rows) * tau);
    if (self.parents[0]->requires_grad) {
      Matrix d = weights;
      d.diagonal().array() -= 1.0;
      self.parents[0]->grad_buffer() += d * s;
    }
    if (use_hard && self.parents.size() > 1 && self.parents[1]->requires_grad)
      self.parents[1]->grad_buffer().col(0) += hard_w * s;
  };
  if (use_hard) return detail::make_op(std::move(out), {sims, hard}, std::move(backward_fn));
  return detail::make_op(std::move(out), {sims}, std::move(backward_fn));
}

// -------------------------------------------------------------------- attention

/// Multi-head scaled dot-product attention over `n_seq` stacked sequences of
/// `seq_len` rows each. Keys whose `key_valid` flag is 0 are excluded; with
/// `causal`, query i only sees keys j <= i. A query with no visible key
/// produces a zero output row.
inline Var attention(const Var& q, const Var& k, const Var& v, Index n_seq, Index seq_len, int n_heads,
                     bool causal, std::span<const std::uint8_t> key_valid) {
  const Index d = q.cols();
  if (n_heads <= 0 || d % n_heads != 0) throw std::invalid_argument("attention: heads must divide width");
  if (q.rows() != n_seq * seq_len || k.rows() != q.rows() || v.rows() != q.rows() || k.cols() != d ||
      v.cols() != d)
    throw std::invalid_argument("attention: shape mismatch");
  if (static_cast<Index>(key_valid.size()) != q.rows()) throw std::invalid_argument("attention: mask size");
  const Index dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[s * n_heads + h] is the seq_len x seq_len attention matrix.
  std::vector<Matrix> probs(static_cast<std::size_t>(n_seq * n_heads));
  Matrix out = Matrix::Zero(q.rows(), d);
  for (Index s = 0; s < n_seq; ++s) {
    const Index r0 = s * seq_len;
    for (int h = 0; h < n_heads; ++h) {
      const Index c0 = h * dh;
      Matrix scores = q.value().block(r0, c0, seq_len, dh) * k.value().block(r0, c0, seq_len, dh).transpose();
      Matrix& p = probs[static_cast<std::size_t>(s * n_heads + h)];
      p = Matrix::Zero(seq_len, seq_len);
      for (Index i = 0; i < seq_len; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        const Index j_end = causal ? i + 1 : seq_len;
        for (Index j = 0; j < j_end; ++j)
          if (key_valid[static_cast<std::size_t>(r0 + j)]) mx = std::max(mx, scores(i, j) * scale);
        if (!std::isfinite(mx)) continue;
        double z = 0.0;
        for (Index j = 0; j < j_end; ++j)
          if (key_valid[static_cast<std::size_t>(r0 + j)]) {
            p(i, j) = std::exp(scores(i, j) * scale - mx);
            z += p(i, j);
          }
        p.row(i) /= z;
      }
      out.block(r0, c0, seq_len, dh).noalias() = p * v.value().block(r0, c0, seq_len, dh);
    }
  }
  return detail::make_op(std::move(out), {q, k, v},
                         [probs = std::move(probs), n_seq, seq_len, n_heads, dh, scale](Node& self) {
    const auto& qv = self.parents[0]->value;
    const auto& kv = self.parents[1]->value;
    const auto& vv = self.parents[2]->value;
    const bool gq = self.parents[0]->requires_grad;
    const bool gk = self.parents[1]->requires_grad;
    const bool gv = self.parents[2]->requires_grad;
    for (Index s = 0; s < n_seq; ++s) {
      const Index r0 = s * seq_len;
      for (int h = 0; h < n_heads; ++h) {
        const Index c0 = h * dh;
        const Matrix& p = probs[static_cast<std::size_t>(s * n_heads + h)];
        const auto g_out = self.grad.block(r0, c0, seq_len, dh);
        if (gv) self.parents[2]->grad_buffer().block(r0, c0, seq_len, dh).noalias() += p.transpose() * g_out;
        if (!gq && !gk) continue;
        Matrix dp = g_out * vv.block(r0, c0, seq_len, dh).transpose();
        Matrix ds = p.cwiseProduct(dp);
        const Eigen::VectorXd row_dot = ds.rowwise().sum();
        ds -= (p.array().colwise() * row_dot.array()).matrix();
        ds *= scale;
        if (gq) self.parents[0]->grad_buffer().block(r0, c0, seq_len, dh).noalias() += ds * kv.block(r0, c0, seq_len, dh);
        if (gk)
          self.parents[1]->grad_buffer().block(r0, c0, seq_len, dh).noalias() +=
              ds.transpose() * qv.block(r0, c0, seq_len, dh);
      }
    }
  });
}

}  // namespace simdiffrec::ag
