#pragma once

// Dense row-major float64 tensors with a define-by-run reverse-mode tape.
//
// Ops take a Tape& and record a node only when at least one input requires a
// gradient, so the same model code serves training and inference. A Tensor is
// a shared handle: copies alias the same storage, like parameters in most
// autograd frameworks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ethodec/errors.hpp"

namespace ethodec {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value),
                  requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  static Tensor identity(std::size_t n, bool requires_grad = false) {
    Tensor t = zeros({n, n}, requires_grad);
    for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const {
    return impl_->data[r * impl_->shape[1] + c];
  }
  double& at(std::size_t r, std::size_t c) {
    return impl_->data[r * impl_->shape[1] + c];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> grad() { return impl_->grad; }

  void zero_grad() { impl_->grad.clear(); }

  // Handle semantics: accumulating into the shared gradient buffer does not
  // change which tensor this handle refers to.
  void add_to_grad(std::span<const double> g) const {
    if (g.size() != numel()) {
      throw DimensionError("gradient of size " + std::to_string(g.size()) +
                           " for tensor " + shape_str(shape()));
    }
    if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) impl_->grad[i] += g[i];
  }

  // Deep copy without gradient state.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(impl_->shape, impl_->data, requires_grad);
  }

  void assign(std::span<const double> values) {
    if (values.size() != numel()) {
      throw DimensionError("assign of " + std::to_string(values.size()) +
                           " values into " + shape_str(shape()));
    }
    std::copy(values.begin(), values.end(), impl_->data.begin());
  }

  bool all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(),
                       [](double v) { return std::isfinite(v); });
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Ordered record of differentiable ops. Nodes are appended as ops run, so
// every node's inputs were produced before it.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  void record(std::string op, std::vector<Tensor> inputs, const Tensor& output,
              BackwardFn fn) {
    nodes_.push_back({std::move(op), std::move(inputs), output, std::move(fn)});
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// Propagates d(loss)/d(.) to every tensor on the tape that requires a grad.
// Leaf gradients accumulate; call zero_grad() between steps. Consumes the tape.
inline void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  if (tape.empty() || !tape.nodes().back().output.same(loss)) {
    throw ContractError("backward: loss is not the terminal node of the tape");
  }
  Tensor root = loss;
  const double one = 1.0;
  root.add_to_grad(std::span<const double>(&one, 1));
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output.has_grad()) it->backward(it->output.grad());
  }
  tape.clear();
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  return std::any_of(ts.begin(), ts.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

inline void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

// Finite-check the output, then record it when any input is differentiable.
inline Tensor finish(Tape& tape, const char* op, std::vector<Tensor> inputs,
                     Tensor out, Tape::BackwardFn fn) {
  require_finite(out, op);
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    out.set_requires_grad(true);
    tape.record(op, std::move(inputs), out, std::move(fn));
  }
  return out;
}

inline void accumulate(const Tensor& t, std::span<const double> g) {
  if (t.requires_grad()) t.add_to_grad(g);
}

}  // namespace detail

// c = a @ b for a[m,k], b[k,n].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return detail::finish(
      tape, "matmul", {a, b}, Tensor({m, n}, std::move(out)),
      [a, b, m, k, n](std::span<const double> dy) mutable {
        if (a.requires_grad()) {
          std::vector<double> da(m * k, 0.0);
          const auto B = b.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j)
                acc += dy[i * n + j] * B[p * n + j];
              da[i * k + p] = acc;
            }
          a.add_to_grad(da);
        }
        if (b.requires_grad()) {
          std::vector<double> db(k * n, 0.0);
          const auto A = a.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double av = A[i * k + p];
              if (av == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j)
                db[p * n + j] += av * dy[i * n + j];
            }
          b.add_to_grad(db);
        }
      });
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.at(i, j);
  return detail::finish(tape, "transpose", {x}, Tensor({n, m}, std::move(out)),
                        [x, m, n](std::span<const double> dy) mutable {
                          std::vector<double> dx(m * n);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j)
                              dx[i * n + j] = dy[j * m + i];
                          x.add_to_grad(dx);
                        });
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
  }
  return detail::finish(tape, "reshape", {x},
                        Tensor(std::move(shape), x.values()),
                        [x](std::span<const double> dy) mutable {
                          x.add_to_grad(dy);
                        });
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::finish(tape, "add", {a, b}, Tensor(a.shape(), std::move(out)),
                        [a, b](std::span<const double> dy) mutable {
                          detail::accumulate(a, dy);
                          detail::accumulate(b, dy);
                        });
}

// Elementwise product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::finish(tape, "mul", {a, b}, Tensor(a.shape(), std::move(out)),
                        [a, b](std::span<const double> dy) mutable {
                          const std::size_t n = dy.size();
                          if (a.requires_grad()) {
                            std::vector<double> da(n);
                            for (std::size_t i = 0; i < n; ++i)
                              da[i] = dy[i] * b[i];
                            a.add_to_grad(da);
                          }
                          if (b.requires_grad()) {
                            std::vector<double> db(n);
                            for (std::size_t i = 0; i < n; ++i)
                              db[i] = dy[i] * a[i];
                            b.add_to_grad(db);
                          }
                        });
}

inline Tensor scale(Tape& tape, const Tensor& x, double s) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return detail::finish(tape, "scale", {x}, Tensor(x.shape(), std::move(out)),
                        [x, s](std::span<const double> dy) mutable {
                          std::vector<double> dx(dy.begin(), dy.end());
                          for (double& v : dx) v *= s;
                          x.add_to_grad(dx);
                        });
}

// x[m,n] + v[n] broadcast over rows.
inline Tensor add_row_vector(Tape& tape, const Tensor& x, const Tensor& v) {
  detail::require_rank(x, 2, "add_row_vector");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (v.numel() != n) {
    throw DimensionError("add_row_vector: " + shape_str(x.shape()) + " + " +
                         shape_str(v.shape()));
  }
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += v[j];
  return detail::finish(tape, "add_row_vector", {x, v},
                        Tensor(x.shape(), std::move(out)),
                        [x, v, m, n](std::span<const double> dy) mutable {
                          detail::accumulate(x, dy);
                          if (v.requires_grad()) {
                            std::vector<double> dv(n, 0.0);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                dv[j] += dy[i * n + j];
                            v.add_to_grad(dv);
                          }
                        });
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::finish(tape, "sum", {x}, Tensor::scalar(s),
                        [x](std::span<const double> dy) mutable {
                          x.add_to_grad(std::vector<double>(x.numel(), dy[0]));
                        });
}

inline Tensor mean(Tape& tape, const Tensor& x) {
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

// x[m,n] -> [m], summing each row.
inline Tensor row_sum(Tape& tape, const Tensor& x) {
  detail::require_rank(x, 2, "row_sum");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += x.at(i, j);
  return detail::finish(tape, "row_sum", {x}, Tensor({m}, std::move(out)),
                        [x, m, n](std::span<const double> dy) mutable {
                          std::vector<double> dx(m * n);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j)
                              dx[i * n + j] = dy[i];
                          x.add_to_grad(dx);
                        });
}

// x[m,n] -> [n], averaging over rows.
inline Tensor mean_rows(Tape& tape, const Tensor& x) {
  detail::require_rank(x, 2, "mean_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (m == 0) throw ContractError("mean_rows of an empty matrix");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.at(i, j);
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out) v *= inv;
  return detail::finish(tape, "mean_rows", {x}, Tensor({n}, std::move(out)),
                        [x, m, n, inv](std::span<const double> dy) mutable {
                          std::vector<double> dx(m * n);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j)
                              dx[i * n + j] = dy[j] * inv;
                          x.add_to_grad(dx);
                        });
}

inline Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t start,
                         std::size_t count) {
  detail::require_rank(x, 2, "slice_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (start + count > m) {
    throw DimensionError("slice_rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin() + start * n,
                          x.values().begin() + (start + count) * n);
  return detail::finish(tape, "slice_rows", {x},
                        Tensor({count, n}, std::move(out)),
                        [x, start, m, n](std::span<const double> dy) mutable {
                          std::vector<double> dx(m * n, 0.0);
                          std::copy(dy.begin(), dy.end(),
                                    dx.begin() + start * n);
                          x.add_to_grad(dx);
                        });
}

inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t start,
                         std::size_t count) {
  detail::require_rank(x, 2, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (start + count > n) {
    throw DimensionError("slice_cols [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j)
      out[i * count + j] = x.at(i, start + j);
  return detail::finish(
      tape, "slice_cols", {x}, Tensor({m, count}, std::move(out)),
      [x, start, count, m, n](std::span<const double> dy) mutable {
        std::vector<double> dx(m * n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < count; ++j)
            dx[i * n + start + j] = dy[i * count + j];
        x.add_to_grad(dx);
      });
}

// Column-wise concatenation of matrices with equal row counts.
inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const std::size_t m = parts.front().dim(0);
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) {
      throw DimensionError("concat_cols: row counts differ (" +
                           shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()) + ")");
    }
    n += p.dim(1);
  }
  std::vector<double> out(m * n);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + offset + j] = p.at(i, j);
    offset += w;
  }
  return detail::finish(tape, "concat_cols", parts,
                        Tensor({m, n}, std::move(out)),
                        [parts, m, n](std::span<const double> dy) mutable {
                          std::size_t offset = 0;
                          for (auto& p : parts) {
                            const std::size_t w = p.dim(1);
                            if (p.requires_grad()) {
                              std::vector<double> dp(m * w);
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < w; ++j)
                                  dp[i * w + j] = dy[i * n + offset + j];
                              p.add_to_grad(dp);
                            }
                            offset += w;
                          }
                        });
}

// Embedding lookup: rows of table[V,D] selected by ids -> [ids.size(), D].
inline Tensor gather_rows(Tape& tape, const Tensor& table,
                          const std::vector<std::size_t>& ids) {
  detail::require_rank(table, 2, "gather_rows");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) +
                           " outside table " + shape_str(table.shape()));
    }
    std::copy_n(table.values().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  return detail::finish(tape, "gather_rows", {table},
                        Tensor({ids.size(), d}, std::move(out)),
                        [table, ids, rows, d](std::span<const double> dy) mutable {
                          std::vector<double> dt(rows * d, 0.0);
                          for (std::size_t i = 0; i < ids.size(); ++i)
                            for (std::size_t j = 0; j < d; ++j)
                              dt[ids[i] * d + j] += dy[i * d + j];
                          table.add_to_grad(dt);
                        });
}

namespace detail {

// Sums terms in ascending order, so any permutation of the same terms gives
// the same double. Keeps attention over a set of keys bitwise independent of
// key order.
inline double order_free_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace detail

// Row-wise softmax with per-row max subtraction; the normaliser is an
// order-free sum.
inline Tensor softmax_rows(Tape& tape, const Tensor& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    const double hi = *std::max_element(row, row + n);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = std::exp(row[j] - hi);
    std::vector<double> terms(out.begin() + i * n, out.begin() + (i + 1) * n);
    const double z = detail::order_free_sum(terms);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor y({m, n}, std::move(out));
  const Tensor saved = y.clone();
  return detail::finish(tape, "softmax_rows", {x}, y,
                        [x, saved, m, n](std::span<const double> dy) mutable {
                          std::vector<double> dx(m * n);
                          for (std::size_t i = 0; i < m; ++i) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j)
                              dot += dy[i * n + j] * saved[i * n + j];
                            for (std::size_t j = 0; j < n; ++j)
                              dx[i * n + j] =
                                  saved[i * n + j] * (dy[i * n + j] - dot);
                          }
                          x.add_to_grad(dx);
                        });
}

// Attention mixing: out[i] = sum_j w[i,j] * v[j] for weights [m, n] and
// values [n, k], each sum taken order-free over j.
inline Tensor attend(Tape& tape, const Tensor& w, const Tensor& v) {
  detail::require_rank(w, 2, "attend");
  detail::require_rank(v, 2, "attend");
  const std::size_t m = w.dim(0), n = w.dim(1), k = v.dim(1);
  if (v.dim(0) != n) {
    throw DimensionError("attend: weights " + shape_str(w.shape()) + " vs values " +
                         shape_str(v.shape()));
  }
  std::vector<double> out(m * k);
  std::vector<double> terms(n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < n; ++j) terms[j] = w[i * n + j] * v[j * k + c];
      out[i * k + c] = detail::order_free_sum(terms);
    }
  return detail::finish(tape, "attend", {w, v}, Tensor({m, k}, std::move(out)),
                        [w, v, m, n, k](std::span<const double> dy) {
                          if (w.requires_grad()) {
                            std::vector<double> dw(m * n, 0.0);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                for (std::size_t c = 0; c < k; ++c)
                                  dw[i * n + j] += dy[i * k + c] * v[j * k + c];
                            w.add_to_grad(dw);
                          }
                          if (v.requires_grad()) {
                            std::vector<double> dv(n * k, 0.0);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                for (std::size_t c = 0; c < k; ++c)
                                  dv[j * k + c] += w[i * n + j] * dy[i * k + c];
                            v.add_to_grad(dv);
                          }
                        });
}

// Per-row normalisation to zero mean and unit (population) variance, then
// y = gain * xhat + bias.
inline Tensor layer_norm_rows(Tape& tape, const Tensor& x, const Tensor& gain,
                              const Tensor& bias, double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (n == 0) throw DimensionError("layer_norm_rows needs at least one column");
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm_rows: gain " + shape_str(gain.shape()) +
                         " / bias " + shape_str(bias.shape()) + " for input " +
                         shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm_rows: eps must be > 0");
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = gain[j] * xhat[i * n + j] + bias[j];
    }
  }
  return detail::finish(
      tape, "layer_norm_rows", {x, gain, bias}, Tensor({m, n}, std::move(out)),
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
       n](std::span<const double> dy) mutable {
        if (gain.requires_grad() || bias.requires_grad()) {
          std::vector<double> dg(n, 0.0), db(n, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              dg[j] += dy[i * n + j] * xhat[i * n + j];
              db[j] += dy[i * n + j];
            }
          detail::accumulate(gain, dg);
          detail::accumulate(bias, db);
        }
        if (x.requires_grad()) {
          std::vector<double> dx(m * n);
          const double nn = static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[i * n + j] * gain[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= nn;
            mean_dx /= nn;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[i * n + j] * gain[j];
              dx[i * n + j] =
                  inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
          x.add_to_grad(dx);
        }
      });
}

// GELU, tanh approximation:
//   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
inline double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double t = std::tanh(k * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

inline Tensor gelu(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(x[i]);
  return detail::finish(tape, "gelu", {x}, Tensor(x.shape(), std::move(out)),
                        [x](std::span<const double> dy) mutable {
                          std::vector<double> dx(dy.size());
                          for (std::size_t i = 0; i < dx.size(); ++i)
                            dx[i] = dy[i] * gelu_derivative(x[i]);
                          x.add_to_grad(dx);
                        });
}

// Central-difference gradient oracle. Runs loss_fn once on a recording tape to
// get analytic gradients, then perturbs every coordinate of every parameter by
// +-eps. Returns max over coordinates of
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// Throws OracleError when two evaluations at the same point disagree.
inline double finite_difference_check(
    const std::function<Tensor(Tape&)>& loss_fn, std::vector<Tensor> params,
    double eps = 1e-3) {
  for (auto& p : params) p.zero_grad();
  Tape tape;
  const Tensor loss = loss_fn(tape);
  const double base = loss.item();
  backward(loss, tape);

  auto evaluate = [&loss_fn]() {
    Tape scratch;
    return loss_fn(scratch).item();
  };
  if (evaluate() != base) {
    throw OracleError("finite_difference_check: loss is not deterministic");
  }

  double worst = 0.0;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double plus = evaluate();
      p[i] = saved - eps;
      const double minus = evaluate();
      p[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
      const double err = std::abs(analytic - numeric) /
                         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ethodec
