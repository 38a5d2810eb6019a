#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// Every op records a backward closure on the result node; Tensor::backward()
// walks the tape in reverse topological order and frees it afterwards. Kernels
// are plain loops, optionally split across threads over disjoint output ranges
// so results are bitwise identical to serial execution.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "skc/error.hpp"
#include "skc/parallel.hpp"
#include "skc/rng.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace skc {

namespace detail {

// Activation tensors run to a few MB and are allocated and freed once per op;
// keep them on the heap instead of bouncing through mmap/munmap.
inline const bool allocator_tuned = [] {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
  return true;
}();

}  // namespace detail

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// When on, every forward kernel scans its output for NaN/Inf and throws
// NumericError. Defaults to on in debug builds only.
inline bool& finite_checks() {
#ifdef NDEBUG
  static bool on = false;
#else
  static bool on = true;
#endif
  return on;
}

namespace autograd {

inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  bool prev;
};

}  // namespace autograd

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<TensorNode<T>>()) {}
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) {
    return filled(std::move(shape), T(0));
  }
  static Tensor filled(Shape shape, T v) {
    Tensor t;
    int64_t n = shape_numel(shape);
    t.node_->shape = std::move(shape);
    t.node_->value.assign(static_cast<size_t>(n), v);
    return t;
  }
  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }
  static Tensor scalar(T v) { return filled({}, v); }
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->value) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int64_t i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() { return node_->ensure_grad(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  void zero_grad() {
    node_->grad.assign(node_->value.size(), T(0));
  }

  T item() const {
    if (numel() != 1)
      throw PreconditionError("item() requires a single-element tensor, got " +
                              shape_str(shape()));
    return node_->value[0];
  }

  // Value copy detached from the tape.
  Tensor detach() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  // Runs reverse-mode accumulation from this scalar, then frees the tape.
  void backward() {
    if (numel() != 1)
      throw PreconditionError("backward() requires a scalar loss, got " +
                              shape_str(shape()));
    if (!node_->requires_grad)
      throw PreconditionError("backward() called on a tensor with no grad path");
    std::vector<TensorNode<T>*> order;
    topo_sort(order);
    node_->ensure_grad()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (n->backward) n->backward(*n);
    }
    for (TensorNode<T>* n : order) {
      n->backward = nullptr;
      n->parents.clear();
    }
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  void topo_sort(std::vector<TensorNode<T>*>& order) const {
    std::unordered_set<TensorNode<T>*> seen;
    // Iterative post-order DFS; deterministic given construction order.
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        TensorNode<T>* p = n->parents[idx++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
inline void check_finite(const std::vector<T>& v, const char* op) {
  if (!finite_checks()) return;
  for (const T& x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, const char* op,
                  std::vector<Tensor<T>> inputs,
                  std::function<void(TensorNode<T>&)> backward) {
  check_finite(value, op);
  Tensor<T> out;
  auto node = out.node();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (autograd::grad_mode()) {
    for (const auto& in : inputs)
      if (in.requires_grad()) needs = true;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return out;
}

// ---- raw GEMM helpers (row-major) ----

// C = A[m,k] * B[k,n]; accumulates when acc is set.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool acc = false) {
  parallel_for(
      m,
      [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          T* crow = c + i * n;
          if (!acc) std::fill(crow, crow + n, T(0));
          const T* arow = a + i * k;
          for (int64_t kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            const T* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
          }
        }
      },
      std::max<int64_t>(1, 16384 / std::max<int64_t>(1, k * n)));
}

template <typename T>
void transpose_into(const T* a, T* at, int64_t rows, int64_t cols);

// C = A[m,k] * B^T where B is [n,k]. B is transposed into a scratch buffer;
// the broadcast form in gemm_nn vectorizes, a dot-product inner loop does not
// (summation order would have to change).
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool acc = false) {
  std::vector<T> bt(static_cast<size_t>(k * n));
  transpose_into(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n, acc);
}

// Blocked transpose: a [rows, cols] -> at [cols, rows].
template <typename T>
void transpose_into(const T* a, T* at, int64_t rows, int64_t cols) {
  constexpr int64_t tile = 32;
  for (int64_t i0 = 0; i0 < rows; i0 += tile)
    for (int64_t j0 = 0; j0 < cols; j0 += tile) {
      int64_t i1 = std::min(rows, i0 + tile), j1 = std::min(cols, j0 + tile);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) at[j * rows + i] = a[i * cols + j];
    }
}

// C = A^T * B where A is [k,m], B is [k,n], C is [m,n]. A is transposed into
// a scratch buffer so the multiply runs on contiguous rows.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool acc = false) {
  std::vector<T> at(static_cast<size_t>(m * k));
  transpose_into(a, at.data(), k, m);
  gemm_nn(at.data(), b, c, m, k, n, acc);
}

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  parallel_for(static_cast<int64_t>(dst.size()), [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) d[i] += s[i];
  }, 65536);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> v(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] += bd[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(v), "add", {a, b}, [an, bn](TensorNode<T>& out) {
        if (an->requires_grad) detail::accumulate(an->ensure_grad(), out.grad);
        if (bn->requires_grad) detail::accumulate(bn->ensure_grad(), out.grad);
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> v(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] -= bd[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(v), "sub", {a, b}, [an, bn](TensorNode<T>& out) {
        if (an->requires_grad) detail::accumulate(an->ensure_grad(), out.grad);
        if (bn->requires_grad) {
          auto& g = bn->ensure_grad();
          for (size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> v(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= bd[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(v), "mul", {a, b}, [an, bn](TensorNode<T>& out) {
        if (an->requires_grad) {
          auto& g = an->ensure_grad();
          for (size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          auto& g = bn->ensure_grad();
          for (size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * an->value[i];
        }
      });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> v(a.data());
  for (auto& x : v) x *= s;
  auto an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(v), "mul_scalar", {a}, [an, s](TensorNode<T>& out) {
        auto& g = an->ensure_grad();
        T* gp = g.data();
        const T* og = out.grad.data();
        parallel_for(static_cast<int64_t>(g.size()), [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) gp[i] += og[i] * s;
        }, 65536);
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> v(a.data());
  for (auto& x : v) x += s;
  auto an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(v), "add_scalar", {a}, [an](TensorNode<T>& out) {
        detail::accumulate(an->ensure_grad(), out.grad);
      });
}

// Exact (erf-based) GELU in the tensor's own precision; the forward CDF is
// kept for the backward pass.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  const T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
  const auto& x = a.data();
  std::vector<T> v(x.size());
  auto cdf = std::make_shared<std::vector<T>>(x.size());
  T* cdf_p = cdf->data();
  parallel_for(static_cast<int64_t>(x.size()), [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T c = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      cdf_p[i] = c;
      v[i] = x[i] * c;
    }
  }, 8192);
  auto an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(v), "gelu", {a},
      [an, cdf, inv_sqrt2pi](TensorNode<T>& out) {
        auto& g = an->ensure_grad();
        const T* c = cdf->data();
        for (size_t i = 0; i < g.size(); ++i) {
          T x = an->value[i];
          g[i] += out.grad[i] *
                  (c[i] + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x));
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul expects rank-2 operands, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  std::vector<T> v(static_cast<size_t>(m * n));
  detail::gemm_nn(a.data().data(), b.data().data(), v.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      {m, n}, std::move(v), "matmul", {a, b},
      [an, bn, m, k, n](TensorNode<T>& out) {
        if (an->requires_grad)
          detail::gemm_nt(out.grad.data(), bn->value.data(),
                          an->ensure_grad().data(), m, n, k, true);
        if (bn->requires_grad)
          detail::gemm_tn(an->value.data(), out.grad.data(),
                          bn->ensure_grad().data(), k, m, n, true);
      });
}

// Batched matmul over matching leading extents: [B..,m,k] x [B..,k,n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 3 || a.rank() != b.rank())
    throw DimensionError("bmm expects equal-rank operands of rank >= 3");
  for (int64_t i = 0; i + 2 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      throw DimensionError("bmm leading extents differ: " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
  int64_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  int64_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2)
    throw DimensionError("bmm inner extents differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  int64_t batch = 1;
  for (int64_t i = 0; i + 2 < a.rank(); ++i) batch *= a.dim(i);
  Shape out_shape(a.shape());
  out_shape[out_shape.size() - 2] = m;
  out_shape[out_shape.size() - 1] = n;
  std::vector<T> v(static_cast<size_t>(batch * m * n));
  for (int64_t bi = 0; bi < batch; ++bi)
    detail::gemm_nn(a.data().data() + bi * m * k, b.data().data() + bi * k * n,
                    v.data() + bi * m * n, m, k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      std::move(out_shape), std::move(v), "bmm", {a, b},
      [an, bn, batch, m, k, n](TensorNode<T>& out) {
        if (an->requires_grad) {
          auto& g = an->ensure_grad();
          for (int64_t bi = 0; bi < batch; ++bi)
            detail::gemm_nt(out.grad.data() + bi * m * n,
                            bn->value.data() + bi * k * n, g.data() + bi * m * k,
                            m, n, k, true);
        }
        if (bn->requires_grad) {
          auto& g = bn->ensure_grad();
          for (int64_t bi = 0; bi < batch; ++bi)
            detail::gemm_tn(an->value.data() + bi * m * k,
                            out.grad.data() + bi * m * n, g.data() + bi * k * n,
                            k, m, n, true);
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " +
                         shape_str(shape) + " changes element count");
  std::vector<T> v(a.data());
  auto an = a.node();
  return detail::make_op<T>(
      std::move(shape), std::move(v), "reshape", {a}, [an](TensorNode<T>& out) {
        detail::accumulate(an->ensure_grad(), out.grad);
      });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int64_t>& perm) {
  int64_t r = a.rank();
  if (static_cast<int64_t>(perm.size()) != r)
    throw DimensionError("permute order length does not match rank");
  Shape out_shape(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) out_shape[i] = a.dim(perm[i]);
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int64_t i = r - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * a.dim(i + 1);
  std::vector<int64_t> gather(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) gather[i] = in_strides[perm[i]];
  int64_t n = a.numel();
  std::vector<T> v(static_cast<size_t>(n));
  const T* src = a.data().data();
  std::vector<int64_t> out_strides(static_cast<size_t>(r), 1);
  for (int64_t i = r - 2; i >= 0; --i)
    out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  parallel_for(n, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      int64_t rem = i, src_idx = 0;
      for (int64_t d = 0; d < r; ++d) {
        int64_t c = rem / out_strides[d];
        rem -= c * out_strides[d];
        src_idx += c * gather[d];
      }
      v[i] = src[src_idx];
    }
  });
  auto an = a.node();
  return detail::make_op<T>(
      std::move(out_shape), std::move(v), "permute", {a},
      [an, gather, out_strides, r](TensorNode<T>& out) {
        auto& g = an->ensure_grad();
        // index map is a bijection, so parallel scatter is race-free
        parallel_for(out.numel(), [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) {
            int64_t rem = i, src_idx = 0;
            for (int64_t d = 0; d < r; ++d) {
              int64_t c = rem / out_strides[d];
              rem -= c * out_strides[d];
              src_idx += c * gather[d];
            }
            g[src_idx] += out.grad[i];
          }
        }, 32768);
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  if (parts.empty()) throw PreconditionError("concat of zero tensors");
  int64_t r = parts[0].rank();
  if (axis < 0 || axis >= r) throw DimensionError("concat axis out of range");
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r)
      throw DimensionError("concat rank mismatch");
    for (int64_t d = 0; d < r; ++d)
      if (d != axis && p.dim(d) != parts[0].dim(d))
        throw DimensionError("concat extent mismatch at axis " + std::to_string(d) +
                             ": " + shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
    total += p.dim(axis);
  }
  Shape out_shape = parts[0].shape();
  out_shape[axis] = total;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int64_t d = axis + 1; d < r; ++d) inner *= out_shape[d];
  std::vector<T> v(static_cast<size_t>(shape_numel(out_shape)));
  int64_t offset = 0;
  for (const auto& p : parts) {
    int64_t len = p.dim(axis) * inner;
    const T* src = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(v.data() + o * total * inner + offset, src + o * len,
                  static_cast<size_t>(len) * sizeof(T));
    offset += len;
  }
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  std::vector<int64_t> lens;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    lens.push_back(p.dim(axis) * inner);
  }
  return detail::make_op<T>(
      std::move(out_shape), std::move(v), "concat", parts,
      [nodes, lens, outer, total, inner](TensorNode<T>& out) {
        int64_t offset = 0;
        for (size_t pi = 0; pi < nodes.size(); ++pi) {
          int64_t len = lens[pi];
          if (nodes[pi]->requires_grad) {
            auto& g = nodes[pi]->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
              const T* src = out.grad.data() + o * total * inner + offset;
              T* dst = g.data() + o * len;
              for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
            }
          }
          offset += len;
        }
      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int64_t axis, int64_t start, int64_t len) {
  int64_t r = a.rank();
  if (axis < 0 || axis >= r) throw DimensionError("slice axis out of range");
  if (start < 0 || len < 0 || start + len > a.dim(axis))
    throw DimensionError("slice range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of extent " +
                         std::to_string(a.dim(axis)));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int64_t d = axis + 1; d < r; ++d) inner *= a.dim(d);
  int64_t full = a.dim(axis) * inner;
  std::vector<T> v(static_cast<size_t>(outer * len * inner));
  const T* src = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(v.data() + o * len * inner, src + o * full + start * inner,
                static_cast<size_t>(len * inner) * sizeof(T));
  auto an = a.node();
  return detail::make_op<T>(
      std::move(out_shape), std::move(v), "slice", {a},
      [an, outer, inner, full, start, len](TensorNode<T>& out) {
        auto& g = an->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = out.grad.data() + o * len * inner;
          T* dst = g.data() + o * full + start * inner;
          for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.rank() < 1 || a.dim(a.rank() - 1) < 1)
    throw PreconditionError("softmax_lastdim needs a non-empty last axis");
  int64_t n = a.dim(a.rank() - 1);
  int64_t rows = a.numel() / n;
  std::vector<T> v(a.data());
  parallel_for(rows, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      T* row = v.data() + r * n;
      T mx = row[0];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
      T sum = 0;
      for (int64_t i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - mx);
        sum += row[i];
      }
      T inv = T(1) / sum;
      for (int64_t i = 0; i < n; ++i) row[i] *= inv;
    }
  });
  auto an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(v), "softmax_lastdim", {a},
      [an, rows, n](TensorNode<T>& out) {
        auto& g = an->ensure_grad();
        parallel_for(rows, [&](int64_t r0, int64_t r1) {
          for (int64_t r = r0; r < r1; ++r) {
            const T* y = out.value.data() + r * n;
            const T* gy = out.grad.data() + r * n;
            T dot = 0;
            for (int64_t i = 0; i < n; ++i) dot += gy[i] * y[i];
            T* gx = g.data() + r * n;
            for (int64_t i = 0; i < n; ++i) gx[i] += y[i] * (gy[i] - dot);
          }
        }, 64);
      });
}

// Normalizes the last axis to zero mean / unit variance (population variance,
// no affine part).
template <typename T>
Tensor<T> layernorm_lastdim(const Tensor<T>& a, T eps = T(1e-6)) {
  int64_t n = a.dim(a.rank() - 1);
  if (n < 1) throw PreconditionError("layernorm_lastdim needs a non-empty last axis");
  int64_t rows = a.numel() / n;
  std::vector<T> v(static_cast<size_t>(a.numel()));
  std::vector<T> inv_std(static_cast<size_t>(rows));
  const T* src = a.data().data();
  parallel_for(rows, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const T* row = src + r * n;
      T mean = 0;
      for (int64_t i = 0; i < n; ++i) mean += row[i];
      mean /= static_cast<T>(n);
      T var = 0;
      for (int64_t i = 0; i < n; ++i) {
        T d = row[i] - mean;
        var += d * d;
      }
      var /= static_cast<T>(n);
      T is = T(1) / std::sqrt(var + eps);
      inv_std[r] = is;
      T* dst = v.data() + r * n;
      for (int64_t i = 0; i < n; ++i) dst[i] = (row[i] - mean) * is;
    }
  });
  auto an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(v), "layernorm_lastdim", {a},
      [an, rows, n, inv_std](TensorNode<T>& out) {
        auto& g = an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* y = out.value.data() + r * n;
          const T* gy = out.grad.data() + r * n;
          T mean_gy = 0, mean_gyy = 0;
          for (int64_t i = 0; i < n; ++i) {
            mean_gy += gy[i];
            mean_gyy += gy[i] * y[i];
          }
          mean_gy /= static_cast<T>(n);
          mean_gyy /= static_cast<T>(n);
          T* gx = g.data() + r * n;
          for (int64_t i = 0; i < n; ++i)
            gx[i] += inv_std[r] * (gy[i] - mean_gy - y[i] * mean_gyy);
        }
      });
}

// x[..., d] + bias[d]
template <typename T>
Tensor<T> add_bias_lastdim(const Tensor<T>& x, const Tensor<T>& bias) {
  int64_t d = x.dim(x.rank() - 1);
  if (bias.rank() != 1 || bias.dim(0) != d)
    throw DimensionError("bias extent " + shape_str(bias.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  int64_t rows = x.numel() / d;
  std::vector<T> v(x.data());
  const T* b = bias.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    T* row = v.data() + r * d;
    for (int64_t i = 0; i < d; ++i) row[i] += b[i];
  }
  auto xn = x.node(), bn = bias.node();
  return detail::make_op<T>(
      x.shape(), std::move(v), "add_bias_lastdim", {x, bias},
      [xn, bn, rows, d](TensorNode<T>& out) {
        if (xn->requires_grad) detail::accumulate(xn->ensure_grad(), out.grad);
        if (bn->requires_grad) {
          auto& g = bn->ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            const T* row = out.grad.data() + r * d;
            for (int64_t i = 0; i < d; ++i) g[i] += row[i];
          }
        }
      });
}

// x[..., d] * v[d]
template <typename T>
Tensor<T> mul_vec_lastdim(const Tensor<T>& x, const Tensor<T>& v) {
  int64_t d = x.dim(x.rank() - 1);
  if (v.rank() != 1 || v.dim(0) != d)
    throw DimensionError("vector extent " + shape_str(v.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  int64_t rows = x.numel() / d;
  std::vector<T> out(x.data());
  const T* vd = v.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * d;
    for (int64_t i = 0; i < d; ++i) row[i] *= vd[i];
  }
  auto xn = x.node(), vn = v.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), "mul_vec_lastdim", {x, v},
      [xn, vn, rows, d](TensorNode<T>& o) {
        if (xn->requires_grad) {
          auto& g = xn->ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < d; ++i)
              g[r * d + i] += o.grad[r * d + i] * vn->value[i];
        }
        if (vn->requires_grad) {
          auto& g = vn->ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < d; ++i)
              g[i] += o.grad[r * d + i] * xn->value[r * d + i];
        }
      });
}

// y = x * (1 + scale) + shift with x [b,S,d], scale/shift [b,d].
template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& scale,
                      const Tensor<T>& shift) {
  if (x.rank() != 3 || scale.rank() != 2 || shift.rank() != 2)
    throw DimensionError("scale_shift expects x[b,S,d], scale[b,d], shift[b,d]");
  int64_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (scale.dim(0) != b || scale.dim(1) != d || shift.dim(0) != b ||
      shift.dim(1) != d)
    throw DimensionError("scale_shift extents do not match");
  std::vector<T> v(x.data());
  const T* sc = scale.data().data();
  const T* sh = shift.data().data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t si = 0; si < s; ++si) {
      T* row = v.data() + (bi * s + si) * d;
      const T* scr = sc + bi * d;
      const T* shr = sh + bi * d;
      for (int64_t i = 0; i < d; ++i) row[i] = row[i] * (T(1) + scr[i]) + shr[i];
    }
  auto xn = x.node(), scn = scale.node(), shn = shift.node();
  return detail::make_op<T>(
      x.shape(), std::move(v), "scale_shift", {x, scale, shift},
      [xn, scn, shn, b, s, d](TensorNode<T>& out) {
        for (int64_t bi = 0; bi < b; ++bi)
          for (int64_t si = 0; si < s; ++si) {
            const T* gy = out.grad.data() + (bi * s + si) * d;
            const T* xv = xn->value.data() + (bi * s + si) * d;
            if (xn->requires_grad) {
              T* gx = xn->ensure_grad().data() + (bi * s + si) * d;
              const T* scr = scn->value.data() + bi * d;
              for (int64_t i = 0; i < d; ++i) gx[i] += gy[i] * (T(1) + scr[i]);
            }
            if (scn->requires_grad) {
              T* gs = scn->ensure_grad().data() + bi * d;
              for (int64_t i = 0; i < d; ++i) gs[i] += gy[i] * xv[i];
            }
            if (shn->requires_grad) {
              T* gh = shn->ensure_grad().data() + bi * d;
              for (int64_t i = 0; i < d; ++i) gh[i] += gy[i];
            }
          }
      });
}

// Adds a constant mask[S,K] onto the trailing two axes of x[...,S,K]. The mask
// carries no gradient.
template <typename T>
Tensor<T> add_mask_last2(const Tensor<T>& x, const Tensor<T>& mask) {
  int64_t r = x.rank();
  if (r < 2 || mask.rank() != 2 || mask.dim(0) != x.dim(r - 2) ||
      mask.dim(1) != x.dim(r - 1))
    throw DimensionError("mask extents " + shape_str(mask.shape()) +
                         " do not match trailing axes of " + shape_str(x.shape()));
  int64_t plane = mask.numel();
  int64_t batch = x.numel() / plane;
  std::vector<T> v(x.data());
  const T* m = mask.data().data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    T* row = v.data() + bi * plane;
    for (int64_t i = 0; i < plane; ++i) row[i] += m[i];
  }
  auto xn = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(v), "add_mask_last2", {x}, [xn](TensorNode<T>& out) {
        detail::accumulate(xn->ensure_grad(), out.grad);
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = 0;
  for (const T& v : a.data()) s += v;
  auto an = a.node();
  return detail::make_op<T>(
      {}, {s}, "sum_all", {a}, [an](TensorNode<T>& out) {
        auto& g = an->ensure_grad();
        for (auto& v : g) v += out.grad[0];
      });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.numel() == 0) throw PreconditionError("mean_all of empty tensor");
  T s = 0;
  for (const T& v : a.data()) s += v;
  T inv = T(1) / static_cast<T>(a.numel());
  auto an = a.node();
  return detail::make_op<T>(
      {}, {s * inv}, "mean_all", {a}, [an, inv](TensorNode<T>& out) {
        auto& g = an->ensure_grad();
        for (auto& v : g) v += out.grad[0] * inv;
      });
}

// Mean squared error over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mse");
  if (a.numel() == 0) throw PreconditionError("mse of empty tensors");
  T s = 0;
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (size_t i = 0; i < ad.size(); ++i) {
    T d = ad[i] - bd[i];
    s += d * d;
  }
  T inv = T(1) / static_cast<T>(a.numel());
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      {}, {s * inv}, "mse", {a, b}, [an, bn, inv](TensorNode<T>& out) {
        T c = T(2) * inv * out.grad[0];
        if (an->requires_grad) {
          auto& g = an->ensure_grad();
          for (size_t i = 0; i < g.size(); ++i)
            g[i] += c * (an->value[i] - bn->value[i]);
        }
        if (bn->requires_grad) {
          auto& g = bn->ensure_grad();
          for (size_t i = 0; i < g.size(); ++i)
            g[i] -= c * (an->value[i] - bn->value[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// 3D convolution over [b, c, T, h, w]
// ---------------------------------------------------------------------------

struct Conv3dSpec {
  std::array<int64_t, 3> stride{1, 1, 1};   // (t, h, w)
  std::array<int64_t, 3> padding{0, 0, 0};  // (t, h, w)
};

namespace detail {

// Geometry shared by the conv3d forward and backward kernels.
struct ConvDims {
  int64_t B, ci, it, ih, iw;
  int64_t co, kt, kh, kw;
  int64_t st, sh, sw, pt, ph, pw;
  int64_t ot, oh, ow;
  int64_t positions() const { return ot * oh * ow; }
  int64_t patch() const { return ci * kt * kh * kw; }
};

// Unfolds one batch element into [positions x patch]; padded taps are zero.
// Source reads along kw are contiguous, so each (c, dt, dy) line is a copy of
// the valid segment.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  parallel_for(d.positions(), [&](int64_t p0, int64_t p1) {
    for (int64_t p = p0; p < p1; ++p) {
      int64_t x0 = p % d.ow;
      int64_t y0 = (p / d.ow) % d.oh;
      int64_t t0 = p / (d.ow * d.oh);
      T* row = col + p * d.patch();
      std::fill(row, row + d.patch(), T(0));
      int64_t zbase = x0 * d.sw - d.pw;
      int64_t dz_lo = std::max<int64_t>(0, -zbase);
      int64_t dz_hi = std::min(d.kw, d.iw - zbase);
      if (dz_hi <= dz_lo) continue;
      for (int64_t c = 0; c < d.ci; ++c)
        for (int64_t dt = 0; dt < d.kt; ++dt) {
          int64_t tt = t0 * d.st - d.pt + dt;
          if (tt < 0 || tt >= d.it) continue;
          for (int64_t dy = 0; dy < d.kh; ++dy) {
            int64_t yy = y0 * d.sh - d.ph + dy;
            if (yy < 0 || yy >= d.ih) continue;
            const T* src = x + ((c * d.it + tt) * d.ih + yy) * d.iw + zbase + dz_lo;
            T* dst = row + ((c * d.kt + dt) * d.kh + dy) * d.kw + dz_lo;
            std::copy(src, src + (dz_hi - dz_lo), dst);
          }
        }
    }
  }, 64);
}

// Scatter-adds a [positions x patch] gradient back onto one batch element.
// Kernel windows overlap, so this runs serially per element.
template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* gx) {
  for (int64_t p = 0; p < d.positions(); ++p) {
    int64_t x0 = p % d.ow;
    int64_t y0 = (p / d.ow) % d.oh;
    int64_t t0 = p / (d.ow * d.oh);
    const T* row = col + p * d.patch();
    int64_t zbase = x0 * d.sw - d.pw;
    int64_t dz_lo = std::max<int64_t>(0, -zbase);
    int64_t dz_hi = std::min(d.kw, d.iw - zbase);
    if (dz_hi <= dz_lo) continue;
    for (int64_t c = 0; c < d.ci; ++c)
      for (int64_t dt = 0; dt < d.kt; ++dt) {
        int64_t tt = t0 * d.st - d.pt + dt;
        if (tt < 0 || tt >= d.it) continue;
        for (int64_t dy = 0; dy < d.kh; ++dy) {
          int64_t yy = y0 * d.sh - d.ph + dy;
          if (yy < 0 || yy >= d.ih) continue;
          T* dst = gx + ((c * d.it + tt) * d.ih + yy) * d.iw + zbase + dz_lo;
          const T* src = row + ((c * d.kt + dt) * d.kh + dy) * d.kw + dz_lo;
          for (int64_t i = 0; i < dz_hi - dz_lo; ++i) dst[i] += src[i];
        }
      }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 const Conv3dSpec& spec) {
  if (x.rank() != 5 || w.rank() != 5)
    throw DimensionError("conv3d expects x[b,c,T,h,w] and w[oc,ic,kt,kh,kw]");
  detail::ConvDims d;
  d.B = x.dim(0);
  d.ci = x.dim(1);
  d.it = x.dim(2);
  d.ih = x.dim(3);
  d.iw = x.dim(4);
  d.co = w.dim(0);
  d.kt = w.dim(2);
  d.kh = w.dim(3);
  d.kw = w.dim(4);
  if (d.ci != w.dim(1))
    throw DimensionError("conv3d channel mismatch: input " + shape_str(x.shape()) +
                         " vs kernel " + shape_str(w.shape()));
  d.st = spec.stride[0];
  d.sh = spec.stride[1];
  d.sw = spec.stride[2];
  d.pt = spec.padding[0];
  d.ph = spec.padding[1];
  d.pw = spec.padding[2];
  if (d.kt > d.it + 2 * d.pt || d.kh > d.ih + 2 * d.ph || d.kw > d.iw + 2 * d.pw)
    throw DimensionError("conv3d kernel " + shape_str(w.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != d.co))
    throw DimensionError("conv3d bias extent mismatch");
  d.ot = (d.it + 2 * d.pt - d.kt) / d.st + 1;
  d.oh = (d.ih + 2 * d.ph - d.kh) / d.sh + 1;
  d.ow = (d.iw + 2 * d.pw - d.kw) / d.sw + 1;

  int64_t P = d.positions(), K = d.patch();
  std::vector<T> v(static_cast<size_t>(d.B * d.co * P));
  std::vector<T> col(static_cast<size_t>(P * K));
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  for (int64_t b = 0; b < d.B; ++b) {
    detail::im2col(xd + b * d.ci * d.it * d.ih * d.iw, d, col.data());
    // out[b] = W [co x K] * col^T -> [co x P]
    detail::gemm_nt(wd, col.data(), v.data() + b * d.co * P, d.co, K, P);
  }
  if (bias) {
    const T* bd = bias->data().data();
    for (int64_t b = 0; b < d.B; ++b)
      for (int64_t oc = 0; oc < d.co; ++oc) {
        T* plane = v.data() + (b * d.co + oc) * P;
        T bv = bd[oc];
        for (int64_t i = 0; i < P; ++i) plane[i] += bv;
      }
  }

  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  auto xn = x.node(), wn = w.node();
  auto bn = bias ? bias->node() : nullptr;
  return detail::make_op<T>(
      {d.B, d.co, d.ot, d.oh, d.ow}, std::move(v), "conv3d", inputs,
      [xn, wn, bn, d](TensorNode<T>& out) {
        int64_t P = d.positions(), K = d.patch();
        const T* gy = out.grad.data();
        std::vector<T> col(static_cast<size_t>(P * K));
        std::vector<T> dcol;
        if (xn->requires_grad) dcol.resize(static_cast<size_t>(P * K));
        T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        T* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
        for (int64_t b = 0; b < d.B; ++b) {
          const T* gyb = gy + b * d.co * P;
          if (gw) {
            detail::im2col(xn->value.data() + b * d.ci * d.it * d.ih * d.iw, d,
                           col.data());
            // dW += gy[b] [co x P] * col [P x K]
            detail::gemm_nn(gyb, col.data(), gw, d.co, P, K, true);
          }
          if (gx) {
            // dcol = gy[b]^T [P x co] * W [co x K]
            detail::gemm_tn(gyb, wn->value.data(), dcol.data(), P, d.co, K);
            detail::col2im_add(dcol.data(), d,
                               gx + b * d.ci * d.it * d.ih * d.iw);
          }
        }
        if (bn && bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (int64_t b = 0; b < d.B; ++b)
            for (int64_t oc = 0; oc < d.co; ++oc) {
              const T* plane = gy + (b * d.co + oc) * P;
              T acc = 0;
              for (int64_t i = 0; i < P; ++i) acc += plane[i];
              gb[oc] += acc;
            }
        }
      });
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Conv3dSpec& spec) {
  return conv3d<T>(x, w, static_cast<const Tensor<T>*>(nullptr), spec);
}

// Nearest-neighbour 2x spatial upsampling of [b,c,T,h,w].
template <typename T>
Tensor<T> upsample2x_hw(const Tensor<T>& x) {
  if (x.rank() != 5) throw DimensionError("upsample2x_hw expects [b,c,T,h,w]");
  int64_t planes = x.dim(0) * x.dim(1) * x.dim(2);
  int64_t h = x.dim(3), w = x.dim(4);
  Shape out_shape = x.shape();
  out_shape[3] = 2 * h;
  out_shape[4] = 2 * w;
  std::vector<T> v(static_cast<size_t>(planes * 4 * h * w));
  const T* src = x.data().data();
  parallel_for(planes, [&](int64_t p0, int64_t p1) {
    for (int64_t p = p0; p < p1; ++p)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t z = 0; z < w; ++z) {
          T val = src[(p * h + y) * w + z];
          T* o = v.data() + ((p * 2 * h + 2 * y) * 2 * w + 2 * z);
          o[0] = val;
          o[1] = val;
          o[2 * w] = val;
          o[2 * w + 1] = val;
        }
  });
  auto xn = x.node();
  return detail::make_op<T>(
      std::move(out_shape), std::move(v), "upsample2x_hw", {x},
      [xn, planes, h, w](TensorNode<T>& out) {
        auto& g = xn->ensure_grad();
        for (int64_t p = 0; p < planes; ++p)
          for (int64_t y = 0; y < h; ++y)
            for (int64_t z = 0; z < w; ++z) {
              const T* o = out.grad.data() + ((p * 2 * h + 2 * y) * 2 * w + 2 * z);
              g[(p * h + y) * w + z] += o[0] + o[1] + o[2 * w] + o[2 * w + 1];
            }
      });
}

// Mean over the spatial axes: [b,c,T,h,w] -> [b,c,T].
template <typename T>
Tensor<T> mean_spatial(const Tensor<T>& x) {
  if (x.rank() != 5) throw DimensionError("mean_spatial expects [b,c,T,h,w]");
  int64_t planes = x.dim(0) * x.dim(1) * x.dim(2);
  int64_t hw = x.dim(3) * x.dim(4);
  if (hw == 0) throw PreconditionError("mean_spatial of empty plane");
  std::vector<T> v(static_cast<size_t>(planes));
  const T* src = x.data().data();
  for (int64_t p = 0; p < planes; ++p) {
    T s = 0;
    for (int64_t i = 0; i < hw; ++i) s += src[p * hw + i];
    v[p] = s / static_cast<T>(hw);
  }
  auto xn = x.node();
  return detail::make_op<T>(
      {x.dim(0), x.dim(1), x.dim(2)}, std::move(v), "mean_spatial", {x},
      [xn, planes, hw](TensorNode<T>& out) {
        auto& g = xn->ensure_grad();
        T inv = T(1) / static_cast<T>(hw);
        for (int64_t p = 0; p < planes; ++p) {
          T gv = out.grad[p] * inv;
          for (int64_t i = 0; i < hw; ++i) g[p * hw + i] += gv;
        }
      });
}

// ---------------------------------------------------------------------------
// Patch <-> token rearrangement
// ---------------------------------------------------------------------------

// [b,C,T,h,w] -> [b, T*(h/p)*(w/p), C*p*p]; token order is (t, row, col).
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& x, int64_t p) {
  if (x.rank() != 5) throw DimensionError("extract_patches expects [b,C,T,h,w]");
  int64_t B = x.dim(0), C = x.dim(1), Tn = x.dim(2), h = x.dim(3), w = x.dim(4);
  if (p < 1 || h % p || w % p)
    throw DimensionError("spatial extents " + std::to_string(h) + "x" +
                         std::to_string(w) + " are not multiples of patch " +
                         std::to_string(p));
  int64_t gh = h / p, gw = w / p;
  int64_t S = Tn * gh * gw, F = C * p * p;
  std::vector<T> v(static_cast<size_t>(B * S * F));
  const T* src = x.data().data();
  parallel_for(B * S, [&](int64_t s0, int64_t s1) {
    for (int64_t bs = s0; bs < s1; ++bs) {
      int64_t b = bs / S, s = bs % S;
      int64_t t = s / (gh * gw);
      int64_t gy = (s / gw) % gh;
      int64_t gx = s % gw;
      T* dst = v.data() + bs * F;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t dy = 0; dy < p; ++dy)
          for (int64_t dx = 0; dx < p; ++dx)
            dst[(c * p + dy) * p + dx] =
                src[((((b * C) + c) * Tn + t) * h + gy * p + dy) * w + gx * p + dx];
    }
  });
  auto xn = x.node();
  return detail::make_op<T>(
      {B, S, F}, std::move(v), "extract_patches", {x},
      [xn, B, C, Tn, h, w, p, gh, gw, S, F](TensorNode<T>& out) {
        auto& g = xn->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t s = 0; s < S; ++s) {
            int64_t t = s / (gh * gw);
            int64_t gy = (s / gw) % gh;
            int64_t gx = s % gw;
            const T* src = out.grad.data() + (b * S + s) * F;
            for (int64_t c = 0; c < C; ++c)
              for (int64_t dy = 0; dy < p; ++dy)
                for (int64_t dx = 0; dx < p; ++dx)
                  g[((((b * C) + c) * Tn + t) * h + gy * p + dy) * w + gx * p + dx] +=
                      src[(c * p + dy) * p + dx];
          }
      });
}

// Inverse of extract_patches: [b,S,C*p*p] -> [b,C,T,h,w].
template <typename T>
Tensor<T> scatter_patches(const Tensor<T>& tokens, int64_t C, int64_t Tn,
                          int64_t h, int64_t w, int64_t p) {
  if (tokens.rank() != 3) throw DimensionError("scatter_patches expects [b,S,F]");
  if (p < 1 || h % p || w % p)
    throw DimensionError("scatter_patches: extents not multiples of patch");
  int64_t gh = h / p, gw = w / p;
  int64_t S = Tn * gh * gw, F = C * p * p;
  if (tokens.dim(1) != S || tokens.dim(2) != F)
    throw DimensionError("scatter_patches: token grid " + shape_str(tokens.shape()) +
                         " does not match latent extents (expected S=" +
                         std::to_string(S) + ", F=" + std::to_string(F) + ")");
  int64_t B = tokens.dim(0);
  std::vector<T> v(static_cast<size_t>(B * C * Tn * h * w));
  const T* src = tokens.data().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t s = 0; s < S; ++s) {
      int64_t t = s / (gh * gw);
      int64_t gy = (s / gw) % gh;
      int64_t gx = s % gw;
      const T* tok = src + (b * S + s) * F;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t dy = 0; dy < p; ++dy)
          for (int64_t dx = 0; dx < p; ++dx)
            v[((((b * C) + c) * Tn + t) * h + gy * p + dy) * w + gx * p + dx] =
                tok[(c * p + dy) * p + dx];
    }
  auto tn = tokens.node();
  return detail::make_op<T>(
      {B, C, Tn, h, w}, std::move(v), "scatter_patches", {tokens},
      [tn, B, C, Tn, h, w, p, gh, gw, S, F](TensorNode<T>& out) {
        auto& g = tn->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t s = 0; s < S; ++s) {
            int64_t t = s / (gh * gw);
            int64_t gy = (s / gw) % gh;
            int64_t gx = s % gw;
            T* tok = g.data() + (b * S + s) * F;
            for (int64_t c = 0; c < C; ++c)
              for (int64_t dy = 0; dy < p; ++dy)
                for (int64_t dx = 0; dx < p; ++dx)
                  tok[(c * p + dy) * p + dx] +=
                      out.grad[((((b * C) + c) * Tn + t) * h + gy * p + dy) * w +
                               gx * p + dx];
          }
      });
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

// table [V,d], ids [b][L] -> [b,L,d]. Rows must share one length.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table,
                    const std::vector<std::vector<int32_t>>& ids) {
  if (table.rank() != 2) throw DimensionError("embedding table must be [V,d]");
  int64_t V = table.dim(0), d = table.dim(1);
  int64_t b = static_cast<int64_t>(ids.size());
  int64_t L = b ? static_cast<int64_t>(ids[0].size()) : 0;
  for (const auto& row : ids) {
    if (static_cast<int64_t>(row.size()) != L)
      throw DimensionError("embedding id rows have unequal lengths");
    for (int32_t id : row)
      if (id < 0 || id >= V)
        throw VocabError("token id " + std::to_string(id) +
                         " outside vocabulary of size " + std::to_string(V));
  }
  std::vector<T> v(static_cast<size_t>(b * L * d));
  const T* src = table.data().data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t li = 0; li < L; ++li)
      std::memcpy(v.data() + (bi * L + li) * d, src + ids[bi][li] * d,
                  static_cast<size_t>(d) * sizeof(T));
  auto tn = table.node();
  auto ids_copy = ids;
  return detail::make_op<T>(
      {b, L, d}, std::move(v), "embedding", {table},
      [tn, ids_copy, L, d](TensorNode<T>& out) {
        auto& g = tn->ensure_grad();
        for (size_t bi = 0; bi < ids_copy.size(); ++bi)
          for (int64_t li = 0; li < L; ++li) {
            const T* src = out.grad.data() + (static_cast<int64_t>(bi) * L + li) * d;
            T* dst = g.data() + ids_copy[bi][li] * d;
            for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
          }
      });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Max over checked coordinates of |analytic - central difference| /
// max(|analytic|, |central|, 1e-8). `coords` selects a subset; empty = all.
template <typename T>
double gradient_check(const std::function<Tensor<T>()>& f, Tensor<T>& x,
                      double eps, const std::vector<int64_t>& coords = {}) {
  if (!x.requires_grad())
    throw PreconditionError("gradient_check target must require grad");
  x.zero_grad();
  Tensor<T> y = f();
  y.backward();
  std::vector<T> analytic = x.grad();
  std::vector<int64_t> idx = coords;
  if (idx.empty()) {
    idx.resize(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) idx[static_cast<size_t>(i)] = i;
  }
  double worst = 0;
  for (int64_t i : idx) {
    T saved = x.data()[i];
    double num;
    {
      autograd::NoGradGuard ng;
      x.data()[i] = saved + static_cast<T>(eps);
      double up = static_cast<double>(f().item());
      x.data()[i] = saved - static_cast<T>(eps);
      double dn = static_cast<double>(f().item());
      x.data()[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw NumericError("non-finite intermediate during gradient_check");
      num = (up - dn) / (2.0 * eps);
    }
    double ana = static_cast<double>(analytic[i]);
    double rel = std::abs(ana - num) /
                 std::max({std::abs(ana), std::abs(num), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace skc
