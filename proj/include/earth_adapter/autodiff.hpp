#pragma once

// Define-by-run reverse-mode differentiation over a fixed operator set.
//
// A Graph is an append-only tape. Every operator appends one node whose inputs
// precede it, so insertion order is a topological order and backward() simply
// walks the tape in reverse. Parameters enter the tape by reference: their
// values are read in place and their gradients are accumulated into the
// parameter's own grad buffer once backward() finishes.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "earth_adapter/tensor.hpp"

namespace ea {

class Graph;

/// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) { return record("constant", std::move(t), {}, nullptr, false); }

  /// Leaf bound to an external parameter. The parameter must outlive the graph.
  Var param(Tensor& p) {
    Node n;
    n.op = "param";
    n.external = &p;
    n.requires_grad = p.requires_grad();
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  /// Leaf bound to a read-only tensor; never receives a gradient.
  Var frozen(const Tensor& p) {
    Node n;
    n.op = "frozen";
    n.frozen = &p;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.external) return *n.external;
    if (n.frozen) return *n.frozen;
    return n.value;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const char* op_name(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::span<const std::size_t> inputs(Var v) const { return nodes_.at(v.id).inputs; }

  /// Node gradient after backward(); empty if the node received none.
  std::span<const double> grad(Var v) const { return nodes_.at(v.id).grad; }

  /// Appends a node. `fn` is only kept when some input requires a gradient.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool rg = false;
    for (auto i : inputs) rg = rg || nodes_.at(i).requires_grad;
    return record(op, std::move(value), std::move(inputs), rg ? std::move(fn) : nullptr, rg);
  }

  /// Gradient accumulator of node `id`, zero-filled on first access.
  std::vector<double>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(Var{this, id}).size(), 0.0);
    return n.grad;
  }
  const std::vector<double>& grad_of(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& value_of(std::size_t id) const { return value(Var{const_cast<Graph*>(this), id}); }

  void backward(Var loss) {
    if (loss.graph != this) throw ConsistencyError("backward: loss belongs to another graph");
    if (backward_done_) throw ConsistencyError("backward called twice without reset");
    if (value(loss).size() != 1)
      throw DimensionError("backward expects a scalar loss, got " + shape_str(shape(loss)));
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
    }
    for (auto& n : nodes_) {
      if (!n.external || !n.requires_grad || n.grad.empty()) continue;
      auto dst = n.external->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }

  bool backward_done() const noexcept { return backward_done_; }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    Tensor* external = nullptr;
    const Tensor* frozen = nullptr;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool rg) {
    for (auto i : inputs)
      if (i >= nodes_.size()) throw ConsistencyError("graph input does not precede its consumer");
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

inline Graph& graph_of(Var a) {
  if (!a.graph) throw ConsistencyError("variable is not attached to a graph");
  return *a.graph;
}

inline Graph& same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw ConsistencyError("operands live in different graphs");
  return graph_of(a);
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(g, bt.data(), c, m, n, k);
}

// c[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  if (B.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()));
  Tensor C(Shape{m, n});
  detail::gemm_nn(A.ptr(), B.ptr(), C.ptr(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return g.record("matmul", std::move(C), {ia, ib}, [ia, ib, m, k, n](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    if (gr.needs_grad(ia)) detail::gemm_nt(gy.data(), gr.value_of(ib).ptr(), gr.grad_buffer(ia).data(), m, n, k);
    if (gr.needs_grad(ib)) detail::gemm_tn(gr.value_of(ia).ptr(), gy.data(), gr.grad_buffer(ib).data(), m, k, n);
  });
}

inline Var transpose(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  detail::require_matrix(A, "transpose");
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor T(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) T[j * m + i] = A[i * n + j];
  const std::size_t ia = a.id;
  return g.record("transpose", std::move(T), {ia}, [ia, m, n](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[j * m + i];
  });
}

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (A.shape() != B.shape())
    throw DimensionError("add: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor C = A;
  C.clear_grad();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  const std::size_t ia = a.id, ib = b.id;
  return g.record("add", std::move(C), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    for (auto id : {ia, ib}) {
      if (!gr.needs_grad(id)) continue;
      auto& gx = gr.grad_buffer(id);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
  });
}

/// Adds a length-n vector to every row of an m x n matrix.
inline Var add_bias(Var a, Var bias) {
  Graph& g = detail::same_graph(a, bias);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(bias);
  detail::require_matrix(A, "add_bias");
  const std::size_t m = A.dim(0), n = A.dim(1);
  if (B.size() != n)
    throw DimensionError("add_bias: bias " + shape_str(B.shape()) + " does not match " + shape_str(A.shape()));
  Tensor C(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C[i * n + j] = A[i * n + j] + B[j];
  const std::size_t ia = a.id, ib = bias.id;
  return g.record("add_bias", std::move(C), {ia, ib}, [ia, ib, m, n](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    if (gr.needs_grad(ia)) {
      auto& ga = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (gr.needs_grad(ib)) {
      auto& gb = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += gy[i * n + j];
    }
  });
}

inline Var scale(Var a, double s) {
  Graph& g = detail::graph_of(a);
  Tensor C = g.value(a);
  C.clear_grad();
  for (auto& v : C.data()) v *= s;
  const std::size_t ia = a.id;
  return g.record("scale", std::move(C), {ia}, [ia, s](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += s * gy[i];
  });
}

/// Multiplies every entry of `a` by the single entry of `s`.
inline Var scale_by(Var a, Var s) {
  Graph& g = detail::same_graph(a, s);
  const Tensor& S = g.value(s);
  if (S.size() != 1) throw DimensionError("scale_by: scale must hold one element, got " + shape_str(S.shape()));
  Tensor C = g.value(a);
  C.clear_grad();
  const double sv = S[0];
  for (auto& v : C.data()) v *= sv;
  const std::size_t ia = a.id, is = s.id;
  return g.record("scale_by", std::move(C), {ia, is}, [ia, is](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    const double sv = gr.value_of(is)[0];
    if (gr.needs_grad(ia)) {
      auto& ga = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += sv * gy[i];
    }
    if (gr.needs_grad(is)) {
      const Tensor& A = gr.value_of(ia);
      double acc = 0.0;
      for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * A[i];
      gr.grad_buffer(is)[0] += acc;
    }
  });
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (A.shape() != B.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor C = A;
  C.clear_grad();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  const std::size_t ia = a.id, ib = b.id;
  return g.record("mul", std::move(C), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    const Tensor& A = gr.value_of(ia);
    const Tensor& B = gr.value_of(ib);
    if (gr.needs_grad(ia)) {
      auto& ga = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * B[i];
    }
    if (gr.needs_grad(ib)) {
      auto& gb = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * A[i];
    }
  });
}

inline Var sum(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  double s = 0.0;
  for (double v : A.data()) s += v;
  const std::size_t ia = a.id;
  return g.record("sum", Tensor::scalar(s), {ia}, [ia](Graph& gr, std::size_t self) {
    const double gy = gr.grad_of(self)[0];
    for (auto& v : gr.grad_buffer(ia)) v += gy;
  });
}

/// Single entry of `a` (flat index) as a one-element tensor.
inline Var element(Var a, std::size_t index) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  if (index >= A.size()) throw RangeError("element: index out of range");
  const std::size_t ia = a.id;
  return g.record("element", Tensor::scalar(A[index]), {ia}, [ia, index](Graph& gr, std::size_t self) {
    gr.grad_buffer(ia)[index] += gr.grad_of(self)[0];
  });
}

inline Var relu(Var a) {
  Graph& g = detail::graph_of(a);
  Tensor C = g.value(a);
  C.clear_grad();
  for (auto& v : C.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id;
  return g.record("relu", std::move(C), {ia}, [ia](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    const Tensor& X = gr.value_of(ia);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (X[i] > 0.0) ga[i] += gy[i];
  });
}

/// Tanh-approximated GELU.
inline Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Graph& g = detail::graph_of(a);
  Tensor C = g.value(a);
  C.clear_grad();
  for (auto& x : C.data()) x = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  const std::size_t ia = a.id;
  return g.record("gelu", std::move(C), {ia}, [ia](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    const Tensor& X = gr.value_of(ia);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const double x = X[i];
      const double t = std::tanh(kC * (x + kA * x * x * x));
      const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
      ga[i] += gy[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

/// Softmax along `axis` of a vector (axis 0) or matrix (axis 0 or 1).
inline Var softmax(Var a, std::size_t axis) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  if (A.ndim() > 2 || axis >= std::max<std::size_t>(A.ndim(), 1))
    throw DimensionError("softmax: invalid axis " + std::to_string(axis) + " for " + shape_str(A.shape()));
  // View the tensor as `outer` lines of `len` elements spaced `stride` apart.
  const std::size_t rows = A.ndim() == 2 ? A.dim(0) : 1;
  const std::size_t cols = A.ndim() == 2 ? A.dim(1) : A.dim(0);
  const bool along_rows = A.ndim() == 1 || axis == 1;
  const std::size_t outer = along_rows ? rows : cols;
  const std::size_t len = along_rows ? cols : rows;
  const std::size_t stride = along_rows ? 1 : cols;
  const std::size_t step = along_rows ? cols : 1;
  Tensor Y(A.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * step;
    double mx = A[base];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, A[base + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(A[base + i * stride] - mx);
      Y[base + i * stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) Y[base + i * stride] /= z;
  }
  const std::size_t ia = a.id;
  return g.record("softmax", std::move(Y), {ia}, [ia, outer, len, stride, step](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    const Tensor& Y = gr.value_of(self);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = o * step;
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += gy[base + i * stride] * Y[base + i * stride];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * stride;
        ga[k] += Y[k] * (gy[k] - dot);
      }
    }
  });
}

/// Row-wise layer normalization with affine parameters, epsilon 1e-5.
inline Var layer_norm(Var a, Var gamma, Var beta) {
  constexpr double kEps = 1e-5;
  Graph& g = detail::same_graph(a, gamma);
  detail::same_graph(a, beta);
  const Tensor& X = g.value(a);
  detail::require_matrix(X, "layer_norm");
  const std::size_t m = X.dim(0), n = X.dim(1);
  const Tensor& G = g.value(gamma);
  const Tensor& B = g.value(beta);
  if (G.size() != n || B.size() != n)
    throw DimensionError("layer_norm: affine parameters " + shape_str(G.shape()) + "/" + shape_str(B.shape()) +
                         " do not match " + shape_str(X.shape()));
  Tensor Y(Shape{m, n});
  std::vector<double> xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = X.ptr() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kEps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xi[j] - mean) * inv_std[i];
      Y[i * n + j] = xhat[i * n + j] * G[j] + B[j];
    }
  }
  const std::size_t ia = a.id, ig = gamma.id, ib = beta.id;
  return g.record("layer_norm", std::move(Y), {ia, ig, ib},
                  [ia, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, std::size_t self) {
                    const auto& gy = gr.grad_of(self);
                    const Tensor& G = gr.value_of(ig);
                    if (gr.needs_grad(ig)) {
                      auto& gg = gr.grad_buffer(ig);
                      for (std::size_t k = 0; k < m * n; ++k) gg[k % n] += gy[k] * xhat[k];
                    }
                    if (gr.needs_grad(ib)) {
                      auto& gb = gr.grad_buffer(ib);
                      for (std::size_t k = 0; k < m * n; ++k) gb[k % n] += gy[k];
                    }
                    if (gr.needs_grad(ia)) {
                      auto& ga = gr.grad_buffer(ia);
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t i = 0; i < m; ++i) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double d = gy[i * n + j] * G[j];
                          mean_d += d;
                          mean_dx += d * xhat[i * n + j];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double d = gy[i * n + j] * G[j];
                          ga[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                        }
                      }
                    }
                  });
}

/// Column mean of an n x c matrix, returned as 1 x c.
inline Var mean_rows(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  detail::require_matrix(A, "mean_rows");
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor Y(Shape{1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) Y[j] += A[i * n + j];
  for (auto& v : Y.data()) v /= static_cast<double>(m);
  const std::size_t ia = a.id;
  return g.record("mean_rows", std::move(Y), {ia}, [ia, m, n](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    auto& ga = gr.grad_buffer(ia);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[j] * inv;
  });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  detail::require_matrix(A, "slice_cols");
  const std::size_t m = A.dim(0), n = A.dim(1);
  if (begin >= end || end > n) throw RangeError("slice_cols: bad column range for " + shape_str(A.shape()));
  const std::size_t w = end - begin;
  Tensor Y(Shape{m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) Y[i * w + j] = A[i * n + begin + j];
  const std::size_t ia = a.id;
  return g.record("slice_cols", std::move(Y), {ia}, [ia, m, n, w, begin](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += gy[i * w + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  Graph& g = detail::graph_of(parts.front());
  const std::size_t m = g.shape(parts.front()).at(0);
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  for (Var p : parts) {
    detail::same_graph(parts.front(), p);
    const Tensor& P = g.value(p);
    detail::require_matrix(P, "concat_cols");
    if (P.dim(0) != m) throw DimensionError("concat_cols: row counts disagree");
    ids.push_back(p.id);
    widths.push_back(P.dim(1));
    total += P.dim(1);
  }
  Tensor Y(Shape{m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = g.value(parts[k]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) Y[i * total + off + j] = P[i * widths[k] + j];
    off += widths[k];
  }
  auto inputs = ids;
  return g.record("concat_cols", std::move(Y), std::move(inputs),
                  [ids, widths, m, total](Graph& gr, std::size_t self) {
                    const auto& gy = gr.grad_of(self);
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (gr.needs_grad(ids[k])) {
                        auto& gp = gr.grad_buffer(ids[k]);
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += gy[i * total + off + j];
                      }
                      off += widths[k];
                    }
                  });
}

/// out[r] = a[rows[r]]; the backward pass scatter-adds.
inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  detail::require_matrix(A, "gather_rows");
  const std::size_t n = A.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor Y(Shape{rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= A.dim(0)) throw RangeError("gather_rows: row index out of range");
    std::copy_n(A.ptr() + rows[r] * n, n, Y.ptr() + r * n);
  }
  const std::size_t ia = a.id;
  return g.record("gather_rows", std::move(Y), {ia}, [ia, n, rows = std::move(rows)](Graph& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) ga[rows[r] * n + j] += gy[r * n + j];
  });
}

/// Outcome flags of cross_entropy.
struct CrossEntropyInfo {
  std::size_t counted = 0;
  bool empty = false;  // every label was ignore_index; the loss is defined as 0
};

/// Mean over non-ignored rows of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, std::span<const int> labels, int ignore_index = -1,
                         CrossEntropyInfo* info = nullptr) {
  Graph& g = detail::graph_of(logits);
  const Tensor& L = g.value(logits);
  detail::require_matrix(L, "cross_entropy");
  const std::size_t p = L.dim(0), K = L.dim(1);
  if (labels.size() != p)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(L.shape()));
  std::vector<double> probs(p * K);
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < p; ++i) {
    const double* li = L.ptr() + i * K;
    double mx = li[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, li[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(li[k] - mx);
    const double logz = std::log(z) + mx;
    for (std::size_t k = 0; k < K; ++k) probs[i * K + k] = std::exp(li[k] - logz);
    if (lab[i] == ignore_index) continue;
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= K)
      throw RangeError("cross_entropy: label " + std::to_string(lab[i]) + " outside [0," + std::to_string(K) + ")");
    total += logz - li[lab[i]];
    ++counted;
  }
  if (info) {
    info->counted = counted;
    info->empty = counted == 0;
  }
  const double loss = counted ? total / static_cast<double>(counted) : 0.0;
  const std::size_t il = logits.id;
  return g.record("cross_entropy", Tensor::scalar(loss), {il},
                  [il, p, K, counted, ignore_index, probs = std::move(probs), lab = std::move(lab)](
                      Graph& gr, std::size_t self) {
                    if (counted == 0) return;
                    const double gy = gr.grad_of(self)[0] / static_cast<double>(counted);
                    auto& gl = gr.grad_buffer(il);
                    for (std::size_t i = 0; i < p; ++i) {
                      if (lab[i] == ignore_index) continue;
                      for (std::size_t k = 0; k < K; ++k) gl[i * K + k] += gy * probs[i * K + k];
                      gl[i * K + static_cast<std::size_t>(lab[i])] -= gy;
                    }
                  });
}

}  // namespace ea
