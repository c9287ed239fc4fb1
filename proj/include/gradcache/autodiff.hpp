#pragma once

// Reverse-mode differentiation over Tensor values.
//
// Operations record onto the tape their operands are attached to. An
// operation whose operands are all detached, or one executed inside a
// NoGraphScope, computes its value and records nothing. Tape nodes are
// appended in evaluation order, so every input index is smaller than the
// index of the node that consumes it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"
#include "gradcache/tensor.hpp"

namespace gradcache {

/// Local backward rule. `grad_in[k]` is empty when input k is not on the tape.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<const std::span<double>> grad_in)>;

namespace detail {
inline int& no_graph_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

/// While alive, operations on this thread record no graph.
class NoGraphScope {
 public:
  NoGraphScope() { ++detail::no_graph_depth(); }
  ~NoGraphScope() { --detail::no_graph_depth(); }
  NoGraphScope(const NoGraphScope&) = delete;
  NoGraphScope& operator=(const NoGraphScope&) = delete;
};

inline bool graph_enabled() { return detail::no_graph_depth() == 0; }

/// Run `f` with graph recording disabled and return its result.
template <typename F>
decltype(auto) no_graph_scope(F&& f) {
  NoGraphScope scope;
  return std::forward<F>(f)();
}

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  /// Register `value` as a differentiable leaf. Shares storage with `value`.
  /// The leaf's gradient buffer is tagged `grad_category` when given,
  /// otherwise with the category of `value`.
  Tensor variable(const Tensor& value,
                  std::optional<mem::Category> grad_category = std::nullopt) {
    Tensor leaf = append("leaf", value.detach(), {}, nullptr);
    nodes_.back().grad_category = grad_category;
    return leaf;
  }

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(std::size_t index) const {
    return nodes_.at(index).op;
  }
  const std::vector<std::optional<std::size_t>>& inputs_of(
      std::size_t index) const {
    return nodes_.at(index).inputs;
  }
  const Tensor& value(std::size_t index) const { return nodes_.at(index).value; }

  bool has_grads() const { return !grads_.empty(); }

  /// Drop gradients so backward can run again.
  void zero_grad() { grads_.clear(); }

  /// Accumulate d(seed)/d(node) into every node reachable from `seed`.
  /// Unreached nodes hold zero. Each gradient buffer is tagged with the
  /// category of the value it differentiates.
  void backward(const Tensor& seed) {
    const std::size_t s = index_on_this_tape(seed);
    if (seed.size() != 1) {
      throw GraphError("backward seed must be scalar, got shape " +
                       shape_string(seed.shape()));
    }
    if (has_grads()) {
      throw GraphError("gradients already populated; call zero_grad() first");
    }
    grads_.resize(nodes_.size());
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      const auto category =
          nodes_[k].grad_category.value_or(nodes_[k].value.category());
      grads_[k] = std::make_shared<mem::Buffer>(
          std::vector<double>(nodes_[k].value.size(), 0.0), category);
    }
    grads_[s]->data()[0] = 1.0;

    std::vector<bool> reached(s + 1, false);
    reached[s] = true;
    std::vector<std::span<double>> grad_in;
    for (std::size_t k = s + 1; k-- > 0;) {
      if (!reached[k]) continue;
      Node& node = nodes_[k];
      if (!node.backward) continue;
      grad_in.assign(node.inputs.size(), std::span<double>{});
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        if (node.inputs[i]) {
          grad_in[i] = grads_[*node.inputs[i]]->data();
          reached[*node.inputs[i]] = true;
        }
      }
      node.backward(grads_[k]->data(), grad_in);
    }
  }

  /// Gradient of the last backward seed with respect to `t`.
  Tensor grad(const Tensor& t) const {
    const std::size_t k = index_on_this_tape(t);
    if (!has_grads()) throw GraphError("backward has not been run");
    return Tensor(nodes_[k].value.shape(), grads_[k]);
  }

  /// Append an operation node. Used by the op library; inputs must be on this
  /// tape or detached.
  Tensor append(std::string op, Tensor output,
                const std::vector<const Tensor*>& inputs, BackwardFn backward) {
    if (has_grads()) {
      throw GraphError("tape is single-use: cannot record after backward");
    }
    Node node;
    node.op = std::move(op);
    node.inputs.reserve(inputs.size());
    for (const Tensor* in : inputs) {
      if (in->attached()) {
        node.inputs.emplace_back(index_on_this_tape(*in));
      } else {
        node.inputs.emplace_back(std::nullopt);
      }
    }
    node.value = output.detach();
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    output.node_ = NodeRef{this, nodes_.size() - 1};
    return output;
  }

 private:
  struct Node {
    std::string op;
    std::vector<std::optional<std::size_t>> inputs;
    Tensor value;
    BackwardFn backward;
    std::optional<mem::Category> grad_category;
  };

  std::size_t index_on_this_tape(const Tensor& t) const {
    if (!t.attached()) throw GraphError("no graph recorded");
    if (t.node()->tape != this) {
      throw GraphError("tensor belongs to a different tape");
    }
    return t.node()->index;
  }

  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<mem::Buffer>> grads_;
};

/// Backward through the tape that produced `seed`.
inline void backward(const Tensor& seed) {
  if (!seed.attached()) throw GraphError("no graph recorded");
  seed.node()->tape->backward(seed);
}

namespace ops {

namespace detail {

inline Tape* common_tape(std::string_view op,
                         const std::vector<const Tensor*>& inputs) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs) {
    if (!in->attached()) continue;
    if (tape && in->node()->tape != tape) {
      throw GraphError(std::string(op) + ": operands live on different tapes");
    }
    tape = in->node()->tape;
  }
  return tape;
}

inline Tensor finish(std::string_view op, Shape shape, std::vector<double> values,
                     const std::vector<const Tensor*>& inputs,
                     BackwardFn backward) {
  Tape* tape = common_tape(op, inputs);
  Tensor out(std::move(shape), std::move(values));
  if (!tape || !graph_enabled()) return out;
  return tape->append(std::string(op), std::move(out), inputs, std::move(backward));
}

[[noreturn]] inline void shape_error(std::string_view op, const Tensor& a) {
  throw ShapeError(std::string(op) + ": unsupported shape " +
                   shape_string(a.shape()));
}

[[noreturn]] inline void shape_error(std::string_view op, const Tensor& a,
                                     const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " +
                   shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

template <typename Fwd, typename Deriv>
Tensor unary(std::string_view op, const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tensor y_view(a.shape(), std::move(out));
  BackwardFn bw = [a = a.detach(), y = y_view, deriv](
                      std::span<const double> g,
                      std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    const auto xs = a.data();
    const auto ys = y.data();
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * deriv(xs[i], ys[i]);
  };
  Tape* tape = common_tape(op, {&a});
  if (!tape || !graph_enabled()) return y_view;
  return tape->append(std::string(op), y_view, {&a}, std::move(bw));
}

}  // namespace detail

/// A·B for A [m×k], B [k×n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) detail::shape_error("matmul", a, b);
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
    }
  }
  BackwardFn bw = [a = a.detach(), b = b.detach(), m, k, n](
                      std::span<const double> g,
                      std::span<const std::span<double>> gin) {
    const auto A = a.data();
    const auto B = b.data();
    if (!gin[0].empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
          gin[0][i * k + p] += acc;
        }
    }
    if (!gin[1].empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gin[1][p * n + j] += aip * g[i * n + j];
        }
    }
  };
  return detail::finish("matmul", Shape{m, n}, std::move(out), {&a, &b},
                        std::move(bw));
}

/// A·Bᵀ for A [m×k], B [n×k]: the pairwise dot-product matrix.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) detail::shape_error("matmul_nt", a, b);
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      out[i * n + j] = acc;
    }
  BackwardFn bw = [a = a.detach(), b = b.detach(), m, k, n](
                      std::span<const double> g,
                      std::span<const std::span<double>> gin) {
    const auto A = a.data();
    const auto B = b.data();
    if (!gin[0].empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) gin[0][i * k + p] += gij * B[j * k + p];
        }
    }
    if (!gin[1].empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) gin[1][j * k + p] += gij * A[i * k + p];
        }
    }
  };
  return detail::finish("matmul_nt", Shape{m, n}, std::move(out), {&a, &b},
                        std::move(bw));
}

/// Elementwise sum; `b` may also be a row vector broadcast over the rows of `a`.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool row_broadcast = !same && a.rank() == 2 && b.rows() == 1 &&
                             b.rank() >= 1 && b.cols() == a.cols();
  if (!same && !row_broadcast) detail::shape_error("add", a, b);
  const std::size_t cols = a.cols();
  std::vector<double> out(a.size());
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = A[i] + (same ? B[i] : B[i % cols]);
  BackwardFn bw = [same, cols](std::span<const double> g,
                               std::span<const std::span<double>> gin) {
    if (!gin[0].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    if (!gin[1].empty()) {
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) gin[1][i % cols] += g[i];
      }
    }
  };
  return detail::finish("add", a.shape(), std::move(out), {&a, &b}, std::move(bw));
}

/// Elementwise product of equal shapes.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_error("mul", a, b);
  std::vector<double> out(a.size());
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  BackwardFn bw = [a = a.detach(), b = b.detach()](
                      std::span<const double> g,
                      std::span<const std::span<double>> gin) {
    const auto A = a.data();
    const auto B = b.data();
    if (!gin[0].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * B[i];
    if (!gin[1].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i] * A[i];
  };
  return detail::finish("mul", a.shape(), std::move(out), {&a, &b}, std::move(bw));
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  const auto A = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * s;
  BackwardFn bw = [s](std::span<const double> g,
                      std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * s;
  };
  return detail::finish("scale", a.shape(), std::move(out), {&a}, std::move(bw));
}

/// max(x, 0); the derivative at 0 is taken to be 0.
inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

/// Softmax along each row, max-subtracted.
inline Tensor row_softmax(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  const auto A = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = A.data() + i * c;
    double* y = out.data() + i * c;
    const double mx = c ? *std::max_element(x, x + c) : 0.0;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  Tensor y_view(a.shape(), std::move(out));
  BackwardFn bw = [y = y_view, r, c](std::span<const double> g,
                                     std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    const auto Y = y.data();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * Y[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gin[0][i * c + j] += Y[i * c + j] * (g[i * c + j] - dot);
    }
  };
  Tape* tape = detail::common_tape("row_softmax", {&a});
  if (!tape || !graph_enabled()) return y_view;
  return tape->append("row_softmax", y_view, {&a}, std::move(bw));
}

/// Row-wise log of the softmax, x - max - log(sum exp(x - max)); finite
/// even where the softmax itself underflows to 0.
inline Tensor row_log_softmax(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  const auto A = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = A.data() + i * c;
    double* y = out.data() + i * c;
    const double mx = c ? *std::max_element(x, x + c) : 0.0;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < c; ++j) y[j] = x[j] - mx - lz;
  }
  Tensor y_view(a.shape(), std::move(out));
  BackwardFn bw = [y = y_view, r, c](std::span<const double> g,
                                     std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    const auto Y = y.data();
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gin[0][i * c + j] += g[i * c + j] - std::exp(Y[i * c + j]) * total;
    }
  };
  Tape* tape = detail::common_tape("row_log_softmax", {&a});
  if (!tape || !graph_enabled()) return y_view;
  return tape->append("row_log_softmax", y_view, {&a}, std::move(bw));
}

/// Sum of all elements, as a rank-0 tensor.
inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  BackwardFn bw = [](std::span<const double> g,
                     std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    for (auto& x : gin[0]) x += g[0];
  };
  return detail::finish("sum", Shape{}, {acc}, {&a}, std::move(bw));
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) detail::shape_error("mean", a);
  const double n = static_cast<double>(a.size());
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  BackwardFn bw = [n](std::span<const double> g,
                      std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    for (auto& x : gin[0]) x += g[0] / n;
  };
  return detail::finish("mean", Shape{}, {acc / n}, {&a}, std::move(bw));
}

/// Matrix transpose; a rank-1 vector becomes a column.
inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  const auto A = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  BackwardFn bw = [r, c](std::span<const double> g,
                         std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gin[0][i * c + j] += g[j * r + i];
  };
  return detail::finish("transpose", Shape{c, r}, std::move(out), {&a},
                        std::move(bw));
}

/// Stack matrices with equal column counts on top of each other.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t c = parts.front().cols();
  std::size_t total_rows = 0;
  std::vector<const Tensor*> inputs;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.cols() != c) detail::shape_error("concat_rows", parts.front(), p);
    offsets.push_back(total_rows * c);
    total_rows += p.rows();
    inputs.push_back(&p);
  }
  std::vector<double> out;
  out.reserve(total_rows * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  BackwardFn bw = [offsets](std::span<const double> g,
                            std::span<const std::span<double>> gin) {
    for (std::size_t k = 0; k < gin.size(); ++k) {
      if (gin[k].empty()) continue;
      for (std::size_t i = 0; i < gin[k].size(); ++i) gin[k][i] += g[offsets[k] + i];
    }
  };
  return detail::finish("concat_rows", Shape{total_rows, c}, std::move(out),
                        inputs, std::move(bw));
}

/// Place `b` to the right of `a`; both need the same row count.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
  if (b.rows() != r) detail::shape_error("concat_cols", a, b);
  const std::size_t c = ca + cb;
  std::vector<double> out(r * c);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(A.data() + i * ca, ca, out.data() + i * c);
    std::copy_n(B.data() + i * cb, cb, out.data() + i * c + ca);
  }
  BackwardFn bw = [r, ca, cb, c](std::span<const double> g,
                                 std::span<const std::span<double>> gin) {
    for (std::size_t i = 0; i < r; ++i) {
      if (!gin[0].empty())
        for (std::size_t j = 0; j < ca; ++j) gin[0][i * ca + j] += g[i * c + j];
      if (!gin[1].empty())
        for (std::size_t j = 0; j < cb; ++j) gin[1][i * cb + j] += g[i * c + ca + j];
    }
  };
  return detail::finish("concat_cols", Shape{r, c}, std::move(out), {&a, &b},
                        std::move(bw));
}

/// Gather rows `index` of a matrix (repeats allowed).
inline Tensor index_rows(const Tensor& a, std::span<const std::size_t> index) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(index.size() * c);
  const auto A = a.data();
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= r) {
      throw ShapeError("index_rows: row " + std::to_string(index[k]) +
                       " out of range for shape " + shape_string(a.shape()));
    }
    std::copy_n(A.data() + index[k] * c, c, out.data() + k * c);
  }
  BackwardFn bw = [idx = std::vector<std::size_t>(index.begin(), index.end()), c](
                      std::span<const double> g,
                      std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) gin[0][idx[k] * c + j] += g[k * c + j];
  };
  return detail::finish("index_rows", Shape{index.size(), c}, std::move(out),
                        {&a}, std::move(bw));
}

/// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return index_rows(a, idx);
}

/// out[i] = a[i, column[i]], as a rank-1 tensor.
inline Tensor pick(const Tensor& a, std::span<const std::size_t> column) {
  const std::size_t r = a.rows(), c = a.cols();
  if (column.size() != r) {
    throw ShapeError("pick: " + std::to_string(column.size()) +
                     " indices for shape " + shape_string(a.shape()));
  }
  std::vector<double> out(r);
  const auto A = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (column[i] >= c) {
      throw ShapeError("pick: column " + std::to_string(column[i]) +
                       " out of range for shape " + shape_string(a.shape()));
    }
    out[i] = A[i * c + column[i]];
  }
  BackwardFn bw = [col = std::vector<std::size_t>(column.begin(), column.end()), c](
                      std::span<const double> g,
                      std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    for (std::size_t i = 0; i < col.size(); ++i) gin[0][i * c + col[i]] += g[i];
  };
  return detail::finish("pick", Shape{r}, std::move(out), {&a}, std::move(bw));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_string(a.shape()) + " to " +
                     shape_string(shape));
  }
  BackwardFn bw = [](std::span<const double> g,
                     std::span<const std::span<double>> gin) {
    if (gin[0].empty()) return;
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
  };
  return detail::finish("reshape", std::move(shape), a.to_vector(), {&a},
                        std::move(bw));
}

}  // namespace ops
}  // namespace gradcache
