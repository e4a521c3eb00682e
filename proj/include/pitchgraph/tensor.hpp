#pragma once

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
// Tapes are single-use: each forward pass records a fresh graph, backward
// consumes it. Desk-scale by design; everything is row-major std::vector.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "pitchgraph/errors.hpp"

namespace pitchgraph::nk {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // leaf accumulation buffer; empty until first backward
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's contribution into the parents' gradient buffers.
  // parent_grads[i] is null when parents[i] does not need a gradient.
  std::function<void(const std::vector<double>& out_grad,
                     const std::vector<std::vector<double>*>& parent_grads)>
      backward_fn;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) {}

  static Tensor zeros(Shape shape) {
    return from(std::vector<double>(shape_size(shape), 0.0), std::move(shape));
  }

  static Tensor full(Shape shape, double v) {
    return from(std::vector<double>(shape_size(shape), v), std::move(shape));
  }

  static Tensor scalar(double v) { return from({v}, Shape{}); }

  static Tensor from(std::vector<double> values, Shape shape) {
    if (values.size() != shape_size(shape))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    return t;
  }

  /// Trainable leaf. Name shows up in optimizer errors and checkpoints.
  static Tensor param(std::string name, std::vector<double> values, Shape shape) {
    Tensor t = from(std::move(values), std::move(shape));
    t.node_->requires_grad = true;
    t.node_->name = std::move(name);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }

  const std::vector<double>& values() const { return node_->values; }
  std::vector<double>& values_mut() { return node_->values; }
  double value(std::size_t i = 0) const { return node_->values[i]; }
  double at(std::size_t i, std::size_t j) const {
    return node_->values[i * node_->shape.back() + j];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  const std::string& name() const { return node_->name; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

using BackwardFn = std::function<void(const std::vector<double>&,
                                      const std::vector<std::vector<double>*>&)>;

inline Tensor make_node(Shape shape, std::vector<double> values,
                        std::vector<Tensor> parents, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->is_leaf = false;
  for (const Tensor& p : parents) {
    n->parents.push_back(p.node_ptr());
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) n->backward_fn = std::move(fn);
  return Tensor::wrap(std::move(n));
}

// --- raw kernels -----------------------------------------------------------

/// C[m x n] += A[m x k] * B[k x n], row-major. The i,l,j order keeps the
/// inner loop a contiguous saxpy that the compiler vectorizes.
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
                    const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[l];
      const double* b = B + l * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

inline std::vector<double> transpose(const double* A, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = A[i * cols + j];
  return out;
}

}  // namespace detail

// --- gradient extraction ----------------------------------------------------

/// Leaf-parameter gradients from one backward pass, isolated from the
/// parameters' own accumulation buffers (thread-safe across tapes).
class Gradients {
 public:
  bool contains(const Tensor& t) const { return grads_.count(t.node()) != 0; }
  const std::vector<double>& at(const Tensor& t) const { return grads_.at(t.node()); }
  std::unordered_map<const detail::Node*, std::vector<double>>& map() { return grads_; }

 private:
  friend void detail_run_backward(const Tensor&, Gradients*);
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

inline void detail_run_backward(const Tensor& loss, Gradients* sink) {
  using detail::Node;
  if (loss.size() != 1)
    throw TapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw TapeError("backward: loss does not depend on any parameter");

  // Iterative postorder DFS over grad-requiring parents.
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;  // 0 new, 1 open, 2 done
  std::vector<Node*> stack{loss.node()};
  while (!stack.empty()) {
    Node* n = stack.back();
    int& st = state[n];
    if (st == 0) {
      if (n->consumed)
        throw TapeError("stale tape: backward was already run through this graph; re-run forward");
      st = 1;
      for (auto& p : n->parents)
        if (p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
    } else {
      if (st == 1) {
        st = 2;
        order.push_back(n);
      }
      stack.pop_back();
    }
  }

  for (Node* n : order)
    if (!n->is_leaf) n->consumed = true;

  std::unordered_map<Node*, std::vector<double>> buf;
  buf[loss.node()] = {1.0};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf || !n->backward_fn) continue;
    auto found = buf.find(n);
    if (found == buf.end()) continue;  // no gradient flowed here
    std::vector<std::vector<double>*> parent_bufs;
    parent_bufs.reserve(n->parents.size());
    for (auto& p : n->parents) {
      if (!p->requires_grad) {
        parent_bufs.push_back(nullptr);
        continue;
      }
      auto& pb = buf[p.get()];
      if (pb.empty()) pb.assign(p->values.size(), 0.0);
      parent_bufs.push_back(&pb);
    }
    n->backward_fn(found->second, parent_bufs);
  }

  for (Node* n : order) {
    if (!n->is_leaf || !n->requires_grad) continue;
    auto found = buf.find(n);
    if (found == buf.end()) continue;
    if (sink) {
      sink->map()[n] = std::move(found->second);
    } else {
      if (n->grad.empty()) n->grad.assign(n->values.size(), 0.0);
      for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += found->second[i];
    }
  }
}

/// Accumulates d(loss)/d(param) into each reachable parameter's .grad buffer.
inline void backward(const Tensor& loss) { detail_run_backward(loss, nullptr); }

/// Like backward() but returns the gradients instead of touching parameter
/// buffers; safe to call concurrently on tapes that share parameters.
inline Gradients backward_grads(const Tensor& loss) {
  Gradients g;
  detail_run_backward(loss, &g);
  return g;
}

// --- elementwise ops ---------------------------------------------------------

namespace detail {
inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) + b.value(i);
  return detail::make_node(
      a.shape(), std::move(out), {a, b},
      [](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        for (int p = 0; p < 2; ++p)
          if (pg[p])
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[p])[i] += g[i];
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) - b.value(i);
  return detail::make_node(
      a.shape(), std::move(out), {a, b},
      [](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) * b.value(i);
  detail::Node* an = a.node();
  detail::Node* bn = b.node();
  return detail::make_node(
      a.shape(), std::move(out), {a, b},
      [an, bn](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * bn->values[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * an->values[i];
      });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) * s;
  return detail::make_node(
      a.shape(), std::move(out), {a},
      [s](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * s;
      });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) > 0.0 ? a.value(i) : 0.0;
  detail::Node* an = a.node();
  return detail::make_node(
      a.shape(), std::move(out), {a},
      [an](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i)
            if (an->values[i] > 0.0) (*pg[0])[i] += g[i];
      });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.value(i);
  std::size_t n = a.size();
  return detail::make_node(
      Shape{}, {s}, {a},
      [n](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < n; ++i) (*pg[0])[i] += g[0];
      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return detail::make_node(
      std::move(shape), a.values(), {a},
      [](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
      });
}

// --- linear algebra ----------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
  detail::Node* an = a.node();
  detail::Node* bn = b.node();
  return detail::make_node(
      Shape{m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& pg) {
        if (pg[0]) {  // dA += g * B^T
          auto bt = detail::transpose(bn->values.data(), k, n);
          detail::gemm_nn(m, n, k, g.data(), bt.data(), pg[0]->data());
        }
        if (pg[1]) {  // dB += A^T * g
          auto at = detail::transpose(an->values.data(), m, k);
          detail::gemm_nn(k, m, n, at.data(), g.data(), pg[1]->data());
        }
      });
}

/// Adds a length-n row vector to every row of an [m x n] matrix.
inline Tensor add_rows(const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || a.dim(1) != bias.dim(0))
    throw ShapeError("add_rows: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(bias.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.value(j);
  return detail::make_node(
      Shape{m, n}, std::move(out), {a, bias},
      [m, n](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*pg[1])[j] += g[i * n + j];
      });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_cols: row counts differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
  std::vector<double> out(m * (p + q));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(&a.values()[i * p], p, &out[i * (p + q)]);
    std::copy_n(&b.values()[i * q], q, &out[i * (p + q) + p]);
  }
  return detail::make_node(
      Shape{m, p + q}, std::move(out), {a, b},
      [m, p, q](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* gr = &g[i * (p + q)];
          if (pg[0])
            for (std::size_t j = 0; j < p; ++j) (*pg[0])[i * p + j] += gr[j];
          if (pg[1])
            for (std::size_t j = 0; j < q; ++j) (*pg[1])[i * q + j] += gr[p + j];
        }
      });
}

/// out[r] = x[index[r]] for a [rows x d] matrix; gradient scatter-adds.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> index) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected matrix, got " + shape_str(x.shape()));
  const std::size_t d = x.dim(1), rows = x.dim(0);
  for (std::size_t r : index)
    if (r >= rows) throw IndexError("gather_rows: row " + std::to_string(r) + " out of range");
  std::vector<double> out(index.size() * d);
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(&x.values()[index[r] * d], d, &out[r * d]);
  Shape shape{index.size(), d};
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return detail::make_node(
      std::move(shape), std::move(out), {x},
      [idx, d](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t r = 0; r < idx->size(); ++r)
          for (std::size_t j = 0; j < d; ++j) (*pg[0])[(*idx)[r] * d + j] += g[r * d + j];
      });
}

/// Channel-wise max over rows sharing a segment id; ties keep the earliest
/// row, so output and gradient routing are order-deterministic. Every segment
/// in [0, n_segments) must own at least one row.
inline Tensor segment_max(const Tensor& x, const std::vector<std::size_t>& segment,
                          std::size_t n_segments) {
  if (x.rank() != 2) throw ShapeError("segment_max: expected matrix, got " + shape_str(x.shape()));
  if (segment.size() != x.dim(0))
    throw ShapeError("segment_max: " + std::to_string(segment.size()) + " segment ids for " +
                     std::to_string(x.dim(0)) + " rows");
  const std::size_t d = x.dim(1);
  std::vector<double> out(n_segments * d, -std::numeric_limits<double>::infinity());
  auto argmax = std::make_shared<std::vector<std::size_t>>(n_segments * d, 0);
  std::vector<bool> seen(n_segments, false);
  for (std::size_t r = 0; r < segment.size(); ++r) {
    const std::size_t s = segment[r];
    if (s >= n_segments) throw IndexError("segment_max: segment id out of range");
    seen[s] = true;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = x.value(r * d + j);
      if (v > out[s * d + j]) {
        out[s * d + j] = v;
        (*argmax)[s * d + j] = r;
      }
    }
  }
  for (std::size_t s = 0; s < n_segments; ++s)
    if (!seen[s]) throw IndexError("segment_max: segment " + std::to_string(s) + " has no rows");
  return detail::make_node(
      Shape{n_segments, d}, std::move(out), {x},
      [argmax, d](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i)
          (*pg[0])[(*argmax)[i] * d + i % d] += g[i];
      });
}

// --- temporal convolution ----------------------------------------------------

namespace detail {
/// im2col over the time axis with zero padding: x is [N x T x d], the result
/// is [N*T x w*d] where row (i*T+t) stacks x[i, t-h .. t+h, :], h = w/2.
inline std::vector<double> time_im2col(const std::vector<double>& x, std::size_t N,
                                       std::size_t T, std::size_t d, std::size_t w) {
  const std::size_t h = w / 2;
  std::vector<double> col(N * T * w * d, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t t = 0; t < T; ++t) {
      double* row = &col[(i * T + t) * w * d];
      for (std::size_t u = 0; u < w; ++u) {
        const long src = static_cast<long>(t) + static_cast<long>(u) - static_cast<long>(h);
        if (src < 0 || src >= static_cast<long>(T)) continue;
        std::copy_n(&x[(i * T + src) * d], d, row + u * d);
      }
    }
  return col;
}
}  // namespace detail

/// 1-D convolution along the time axis of an [N x T x d] tensor with an
/// odd-width [w x d x d_out] kernel, zero-padded so the output stays [N x T x d_out].
inline Tensor temporal_conv(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 3)
    throw ShapeError("temporal_conv: input must be [N x T x d], got " + shape_str(x.shape()));
  if (kernel.rank() != 3)
    throw ShapeError("temporal_conv: kernel must be [w x d x d_out], got " +
                     shape_str(kernel.shape()));
  const std::size_t N = x.dim(0), T = x.dim(1), d = x.dim(2);
  const std::size_t w = kernel.dim(0), d_out = kernel.dim(2);
  if (w % 2 == 0)
    throw ConfigError("temporal_conv: kernel width must be odd, got " + std::to_string(w));
  if (kernel.dim(1) != d)
    throw ShapeError("temporal_conv: kernel expects " + std::to_string(kernel.dim(1)) +
                     " channels, input has " + std::to_string(d));

  auto col = detail::time_im2col(x.values(), N, T, d, w);
  std::vector<double> out(N * T * d_out, 0.0);
  detail::gemm_nn(N * T, w * d, d_out, col.data(), kernel.values().data(), out.data());
  detail::Node* xn = x.node();
  detail::Node* kn = kernel.node();
  return detail::make_node(
      Shape{N, T, d_out}, std::move(out), {x, kernel},
      [xn, kn, N, T, d, w, d_out](const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& pg) {
        const std::size_t h = w / 2;
        if (pg[1]) {  // dK += col^T * g   (col rebuilt; cheaper than caching it)
          auto col = detail::time_im2col(xn->values, N, T, d, w);
          auto colt = detail::transpose(col.data(), N * T, w * d);
          detail::gemm_nn(w * d, N * T, d_out, colt.data(), g.data(), pg[1]->data());
        }
        if (pg[0]) {  // dX: col-space gradient folded back per time offset
          auto kt = detail::transpose(kn->values.data(), w * d, d_out);
          std::vector<double> colg(N * T * w * d, 0.0);
          detail::gemm_nn(N * T, d_out, w * d, g.data(), kt.data(), colg.data());
          for (std::size_t i = 0; i < N; ++i)
            for (std::size_t t = 0; t < T; ++t) {
              const double* row = &colg[(i * T + t) * w * d];
              for (std::size_t u = 0; u < w; ++u) {
                const long src =
                    static_cast<long>(t) + static_cast<long>(u) - static_cast<long>(h);
                if (src < 0 || src >= static_cast<long>(T)) continue;
                double* dst = &(*pg[0])[(i * T + src) * d];
                for (std::size_t j = 0; j < d; ++j) dst[j] += row[u * d + j];
              }
            }
        }
      });
}

// --- classification loss -----------------------------------------------------

/// Stabilized row softmax of an [M x C] matrix, forward values only.
inline std::vector<double> softmax_rows(const std::vector<double>& logits, std::size_t M,
                                        std::size_t C) {
  std::vector<double> probs(M * C);
  for (std::size_t i = 0; i < M; ++i) {
    const double* row = &logits[i * C];
    double mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) probs[i * C + c] = std::exp(row[c] - mx) / z;
  }
  return probs;
}

/// Mean negative log-likelihood of the true class under row softmax.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_cross_entropy: logits must be [M x C], got " +
                     shape_str(logits.shape()));
  const std::size_t M = logits.dim(0), C = logits.dim(1);
  if (labels.size() != M)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(M) + " rows");
  for (std::size_t i = 0; i < M; ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C)
      throw IndexError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range [0, " + std::to_string(C) + ") at row " +
                       std::to_string(i));

  double loss = 0.0;
  for (std::size_t i = 0; i < M; ++i) {
    const double* row = &logits.values()[i * C];
    double mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    loss += std::log(z) - (row[labels[i]] - mx);
  }
  loss /= static_cast<double>(M);

  auto probs = std::make_shared<std::vector<double>>(softmax_rows(logits.values(), M, C));
  auto labs = std::make_shared<std::vector<int>>(labels);
  return detail::make_node(
      Shape{}, {loss}, {logits},
      [probs, labs, M, C](const std::vector<double>& g,
                          const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        const double scale = g[0] / static_cast<double>(M);
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            double delta = (static_cast<std::size_t>((*labs)[i]) == c) ? 1.0 : 0.0;
            (*pg[0])[i * C + c] += scale * ((*probs)[i * C + c] - delta);
          }
      });
}

}  // namespace pitchgraph::nk
