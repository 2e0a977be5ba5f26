#include "sama/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace sama {

namespace {

template <typename T>
using Node = TensorNode<T>;

template <typename T>
T* grad_of(Node<T>* n) {
  return n->requires_grad ? n->grad_buffer() : nullptr;
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  Shape out;
  std::size_t na = 0;  // period of a's index within out
  std::size_t nb = 0;
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t na = numel(a);
  const std::size_t nb = numel(b);
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<long>(small.size()));
  };
  if (a == b) return {a, na, nb};
  if (nb == 1) return {a, na, 1};
  if (na == 1) return {b, 1, nb};
  if (is_suffix(b, a)) return {a, na, nb};
  if (is_suffix(a, b)) return {b, na, nb};
  throw ShapeError(std::string(op) + ": cannot broadcast shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  const Broadcast bc = broadcast_shapes(a.shape(), b.shape(), op);
  const std::size_t n = numel(bc.out);
  const T* x = a.data().data();
  const T* y = b.data().data();
  std::vector<T> out(n);
  const bool fast = bc.na == n && bc.nb == n;
  for (std::size_t i = 0; i < n; ++i) {
    const T u = fast ? x[i] : x[i % bc.na];
    const T v = fast ? y[i] : y[i % bc.nb];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = u + v; break;
      case BinaryKind::kSub: out[i] = u - v; break;
      case BinaryKind::kMul: out[i] = u * v; break;
      case BinaryKind::kDiv: out[i] = u / v; break;
    }
  }
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(
      bc.out, std::move(out), {&a, &b}, op, [an, bn, bc, kind, n](Node<T>& o) {
        const T* g = o.grad.data();
        const T* x = an->data.data();
        const T* y = bn->data.data();
        T* ga = grad_of(an);
        T* gb = grad_of(bn);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ia = i % bc.na;
          const std::size_t ib = i % bc.nb;
          switch (kind) {
            case BinaryKind::kAdd:
              if (ga) ga[ia] += g[i];
              if (gb) gb[ib] += g[i];
              break;
            case BinaryKind::kSub:
              if (ga) ga[ia] += g[i];
              if (gb) gb[ib] -= g[i];
              break;
            case BinaryKind::kMul:
              if (ga) ga[ia] += g[i] * y[ib];
              if (gb) gb[ib] += g[i] * x[ia];
              break;
            case BinaryKind::kDiv:
              if (ga) ga[ia] += g[i] / y[ib];
              if (gb) gb[ib] -= g[i] * x[ia] / (y[ib] * y[ib]);
              break;
          }
        }
      });
}

// Elementwise map with derivative expressed through (input, output).
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& a, const char* op, Fwd fwd, Deriv deriv) {
  const auto in = a.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  Node<T>* an = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, op, [an, deriv](Node<T>& o) {
    T* ga = grad_of(an);
    if (!ga) return;
    const T* g = o.grad.data();
    const T* x = an->data.data();
    const T* y = o.data.data();
    for (std::size_t i = 0; i < o.data.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
  if (x > T(20)) return x;
  return std::log1p(std::exp(x));
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

// Output positions o in [lo, hi) whose input tap o*stride + k - pad lies in [0, extent).
struct TapRange {
  std::size_t lo, hi;
};

TapRange tap_range(std::size_t k, std::size_t pad, std::size_t stride, std::size_t extent,
                   std::size_t out_extent) {
  // o*stride + k >= pad  and  o*stride + k - pad < extent
  std::size_t lo = 0;
  if (k < pad) lo = (pad - k + stride - 1) / stride;
  std::size_t hi = 0;
  if (extent + pad > k) hi = (extent + pad - k - 1) / stride + 1;
  hi = std::min(hi, out_extent);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kDiv, "div");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary(a, "mul_scalar", [s](T x) { return x * s; }, [s](T, T) { return s; });
}
template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary(a, "neg", [](T x) { return -x; }, [](T, T) { return T(-1); });
}
template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(a, "sigmoid", [](T x) { return sigmoid_scalar(x); },
               [](T, T y) { return y * (T(1) - y); });
}
template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary(
      a, "silu", [](T x) { return x * sigmoid_scalar(x); },
      [](T x, T) {
        const T s = sigmoid_scalar(x);
        return s * (T(1) + x * (T(1) - s));
      });
}
template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary(a, "softplus", [](T x) { return softplus_scalar(x); },
               [](T x, T) { return sigmoid_scalar(x); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s(0);
  for (T v : a.data()) s += v;
  Node<T>* an = a.node();
  return detail::make_result<T>({}, {s}, {&a}, "sum", [an](Node<T>& o) {
    T* ga = grad_of(an);
    if (!ga) return;
    const T g = o.grad[0];
    for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> sum_keep_axis(const Tensor<T>& a, int axis) {
  const std::size_t ax = norm_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), ax);
  std::vector<T> out(s.extent, T(0));
  const T* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.extent; ++j) {
      const T* row = x + (o * s.extent + j) * s.inner;
      T acc(0);
      for (std::size_t i = 0; i < s.inner; ++i) acc += row[i];
      out[j] += acc;
    }
  Node<T>* an = a.node();
  return detail::make_result<T>({s.extent}, std::move(out), {&a}, "sum_keep_axis",
                                [an, s](Node<T>& o) {
                                  T* ga = grad_of(an);
                                  if (!ga) return;
                                  for (std::size_t q = 0; q < s.outer; ++q)
                                    for (std::size_t j = 0; j < s.extent; ++j) {
                                      T* row = ga + (q * s.extent + j) * s.inner;
                                      for (std::size_t i = 0; i < s.inner; ++i) row[i] += o.grad[j];
                                    }
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  Node<T>* an = a.node();
  return detail::make_result<T>(std::move(shape), std::move(out), {&a}, "reshape",
                                [an](Node<T>& o) {
                                  T* ga = grad_of(an);
                                  if (!ga) return;
                                  for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
                                });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& order) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (order.size() != r) throw ShapeError("permute: order rank mismatch for " + shape_str(in));
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    if (o >= r || seen[o]) throw ShapeError("permute: order is not a permutation");
    seen[o] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[order[i]];
    stride[i] = in_stride[order[i]];
  }
  const std::size_t n = a.numel();
  // src[k] = input offset of output element k
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < n; ++k) {
    src[k] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<T> out(n);
  const T* x = a.data().data();
  for (std::size_t k = 0; k < n; ++k) out[k] = x[src[k]];
  Node<T>* an = a.node();
  return detail::make_result<T>(out_shape, std::move(out), {&a}, "permute",
                                [an, src = std::move(src)](Node<T>& o) {
                                  T* ga = grad_of(an);
                                  if (!ga) return;
                                  for (std::size_t k = 0; k < src.size(); ++k) ga[src[k]] += o.grad[k];
                                });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), ax);
  if (start + length > s.extent || length == 0) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") invalid for axis " +
                     std::to_string(ax) + " of " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  std::vector<T> out(s.outer * length * s.inner);
  const T* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const T* src = x + (o * s.extent + start) * s.inner;
    std::copy(src, src + length * s.inner, out.begin() + static_cast<long>(o * length * s.inner));
  }
  Node<T>* an = a.node();
  return detail::make_result<T>(out_shape, std::move(out), {&a}, "slice",
                                [an, s, start, length](Node<T>& o) {
                                  T* ga = grad_of(an);
                                  if (!ga) return;
                                  const std::size_t blk = length * s.inner;
                                  for (std::size_t q = 0; q < s.outer; ++q) {
                                    T* dst = ga + (q * s.extent + start) * s.inner;
                                    const T* g = o.grad.data() + q * blk;
                                    for (std::size_t i = 0; i < blk; ++i) dst[i] += g[i];
                                  }
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = norm_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) {
      throw ShapeError("concat: rank mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    probe[ax] = out_shape[ax];
    if (probe != out_shape) {
      throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " +
                       shape_str(p.shape()) + " differ off axis " + std::to_string(ax));
    }
    total += p.shape()[ax];
  }
  out_shape[ax] = total;
  const AxisSplit s = split_at(out_shape, ax);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> extents;
  std::size_t at = 0;
  for (const auto& p : parts) {
    const std::size_t e = p.shape()[ax];
    offsets.push_back(at);
    extents.push_back(e);
    const T* x = p.data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(x + o * e * s.inner, x + (o + 1) * e * s.inner,
                out.begin() + static_cast<long>((o * total + at) * s.inner));
    }
    at += e;
  }
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<T>(
      out_shape, std::move(out), parts, "concat",
      [nodes, offsets, extents, s, total](Node<T>& o) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          T* gp = grad_of(nodes[k]);
          if (!gp) continue;
          const std::size_t e = extents[k];
          for (std::size_t q = 0; q < s.outer; ++q) {
            const T* g = o.grad.data() + (q * total + offsets[k]) * s.inner;
            T* dst = gp + q * e * s.inner;
            for (std::size_t i = 0; i < e * s.inner; ++i) dst[i] += g[i];
          }
        }
      });
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& a, std::size_t top, std::size_t bottom, std::size_t left,
                std::size_t right) {
  if (a.rank() < 2) throw ShapeError("pad2d: rank < 2 for " + shape_str(a.shape()));
  const std::size_t h = a.dim(-2), w = a.dim(-1);
  const std::size_t planes = a.numel() / (h * w);
  const std::size_t oh = h + top + bottom, ow = w + left + right;
  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  std::vector<T> out(planes * oh * ow, T(0));
  const T* x = a.data().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      std::copy(x + (p * h + y) * w, x + (p * h + y + 1) * w,
                out.begin() + static_cast<long>((p * oh + y + top) * ow + left));
  Node<T>* an = a.node();
  return detail::make_result<T>(out_shape, std::move(out), {&a}, "pad2d",
                                [an, planes, h, w, oh, ow, top, left](Node<T>& o) {
                                  T* ga = grad_of(an);
                                  if (!ga) return;
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t y = 0; y < h; ++y) {
                                      const T* g = o.grad.data() + (p * oh + y + top) * ow + left;
                                      T* dst = ga + (p * h + y) * w;
                                      for (std::size_t x = 0; x < w; ++x) dst[x] += g[x];
                                    }
                                });
}

template <typename T>
Tensor<T> reindex_spatial(const Tensor<T>& a, std::span<const std::size_t> perm, std::size_t oh,
                          std::size_t ow) {
  if (a.rank() < 2) throw ShapeError("reindex_spatial: rank < 2 for " + shape_str(a.shape()));
  const std::size_t plane = a.dim(-2) * a.dim(-1);
  if (perm.size() != plane || oh * ow != plane) {
    throw ShapeError("reindex_spatial: permutation of size " + std::to_string(perm.size()) +
                     " onto " + std::to_string(oh) + "x" + std::to_string(ow) +
                     " does not match " + shape_str(a.shape()));
  }
  const std::size_t planes = a.numel() / plane;
  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x + p * plane;
    T* dst = out.data() + p * plane;
    for (std::size_t t = 0; t < plane; ++t) dst[t] = src[perm[t]];
  }
  Node<T>* an = a.node();
  std::vector<std::size_t> pv(perm.begin(), perm.end());
  return detail::make_result<T>(out_shape, std::move(out), {&a}, "reindex_spatial",
                                [an, pv = std::move(pv), planes, plane](Node<T>& o) {
                                  T* ga = grad_of(an);
                                  if (!ga) return;
                                  for (std::size_t p = 0; p < planes; ++p) {
                                    const T* g = o.grad.data() + p * plane;
                                    T* dst = ga + p * plane;
                                    for (std::size_t t = 0; t < plane; ++t) dst[pv[t]] += g[t];
                                  }
                                });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw ShapeError("matmul: inner extents differ for " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  if (abatch == bbatch || bbatch.empty()) {
    batch = abatch;
  } else if (abatch.empty()) {
    batch = bbatch;
  } else {
    throw ShapeError("matmul: batch dims of " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not broadcast");
  }
  const std::size_t nbatch = numel(batch);
  const std::size_t sa = abatch.empty() ? 0 : m * k;
  const std::size_t sb = bbatch.empty() ? 0 : k * n;
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(nbatch * m * n, T(0));
  const T* x = a.data().data();
  const T* y = b.data().data();
  for (std::size_t q = 0; q < nbatch; ++q) {
    const T* A = x + q * sa;
    const T* B = y + q * sb;
    T* C = out.data() + q * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = A[i * k + p];
        const T* brow = B + p * n;
        T* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(
      out_shape, std::move(out), {&a, &b}, "matmul", [an, bn, nbatch, sa, sb, m, k, n](Node<T>& o) {
        T* ga = grad_of(an);
        T* gb = grad_of(bn);
        for (std::size_t q = 0; q < nbatch; ++q) {
          const T* G = o.grad.data() + q * m * n;
          const T* A = an->data.data() + q * sa;
          const T* B = bn->data.data() + q * sb;
          if (ga) {
            T* dA = ga + q * sa;  // dA = G B^T
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                T acc(0);
                for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
                dA[i * k + p] += acc;
              }
          }
          if (gb) {
            T* dB = gb + q * sb;  // dB = A^T G
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const T av = A[i * k + p];
                for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
              }
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight.shape(), 2, "linear weight");
  const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.rank() < 1 || x.dim(-1) != in_f) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not end in " +
                     std::to_string(in_f) + " (weight " + shape_str(weight.shape()) + ")");
  }
  if (bias.defined() && bias.numel() != out_f) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / in_f;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  std::vector<T> out(rows * out_f);
  const T* X = x.data().data();
  const T* W = weight.data().data();
  const T* bptr = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out_f; ++o) {
      T acc = bptr ? bptr[o] : T(0);
      const T* xr = X + r * in_f;
      const T* wr = W + o * in_f;
      for (std::size_t i = 0; i < in_f; ++i) acc += xr[i] * wr[i];
      out[r * out_f + o] = acc;
    }
  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      out_shape, std::move(out), {&x, &weight, bias.defined() ? &bias : nullptr}, "linear",
      [xn, wn, bn, rows, in_f, out_f](Node<T>& o) {
        T* gx = grad_of(xn);
        T* gw = grad_of(wn);
        T* gbias = bn ? grad_of(bn) : nullptr;
        const T* G = o.grad.data();
        const T* X = xn->data.data();
        const T* W = wn->data.data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t q = 0; q < out_f; ++q) {
            const T g = G[r * out_f + q];
            if (g == T(0)) continue;
            if (gx) {
              T* dx = gx + r * in_f;
              const T* wr = W + q * in_f;
              for (std::size_t i = 0; i < in_f; ++i) dx[i] += g * wr[i];
            }
            if (gw) {
              T* dw = gw + q * in_f;
              const T* xr = X + r * in_f;
              for (std::size_t i = 0; i < in_f; ++i) dw[i] += g * xr[i];
            }
            if (gbias) gbias[q] += g;
          }
      });
}

template <typename T>
Tensor<T> linear_channels(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight.shape(), 2, "linear_channels weight");
  if (x.rank() < 2) throw ShapeError("linear_channels: input rank < 2: " + shape_str(x.shape()));
  const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.dim(1) != in_f) {
    throw ShapeError("linear_channels: input " + shape_str(x.shape()) + " has " +
                     std::to_string(x.dim(1)) + " channels, weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(in_f));
  }
  if (bias.defined() && bias.numel() != out_f) {
    throw ShapeError("linear_channels: bias " + shape_str(bias.shape()) + " for weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t plane = x.numel() / (batch * in_f);
  Shape out_shape = x.shape();
  out_shape[1] = out_f;
  std::vector<T> out(batch * out_f * plane);
  const T* X = x.data().data();
  const T* W = weight.data().data();
  const T* bptr = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_f; ++o) {
      T* yo = out.data() + (b * out_f + o) * plane;
      std::fill(yo, yo + plane, bptr ? bptr[o] : T(0));
      for (std::size_t i = 0; i < in_f; ++i) {
        const T w = W[o * in_f + i];
        const T* xi = X + (b * in_f + i) * plane;
        for (std::size_t p = 0; p < plane; ++p) yo[p] += w * xi[p];
      }
    }
  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      out_shape, std::move(out), {&x, &weight, bias.defined() ? &bias : nullptr},
      "linear_channels", [xn, wn, bn, batch, plane, in_f, out_f](Node<T>& o) {
        T* gx = grad_of(xn);
        T* gw = grad_of(wn);
        T* gbias = bn ? grad_of(bn) : nullptr;
        const T* X = xn->data.data();
        const T* W = wn->data.data();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t q = 0; q < out_f; ++q) {
            const T* g = o.grad.data() + (b * out_f + q) * plane;
            if (gbias) {
              T acc(0);
              for (std::size_t p = 0; p < plane; ++p) acc += g[p];
              gbias[q] += acc;
            }
            for (std::size_t i = 0; i < in_f; ++i) {
              const T* xi = X + (b * in_f + i) * plane;
              if (gw) {
                T acc(0);
                for (std::size_t p = 0; p < plane; ++p) acc += g[p] * xi[p];
                gw[q * in_f + i] += acc;
              }
              if (gx) {
                const T w = W[q * in_f + i];
                T* dx = gx + (b * in_f + i) * plane;
                for (std::size_t p = 0; p < plane; ++p) dx[p] += w * g[p];
              }
            }
          }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dGeometry geom) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = weight.dim(0), cpg = weight.dim(1), KH = weight.dim(2),
                    KW = weight.dim(3);
  const std::size_t G = geom.groups, s = geom.stride, pad = geom.padding;
  if (G == 0 || s == 0 || C % G != 0 || O % G != 0 || cpg != C / G) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " with groups " +
                     std::to_string(G) + " incompatible with input " + shape_str(x.shape()));
  }
  if (H + 2 * pad < KH || W + 2 * pad < KW) {
    throw ShapeError("conv2d: kernel " + std::to_string(KH) + "x" + std::to_string(KW) +
                     " larger than padded input " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != O) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(O) +
                     " output channels");
  }
  const std::size_t HO = (H + 2 * pad - KH) / s + 1, WO = (W + 2 * pad - KW) / s + 1;
  const std::size_t opg = O / G;
  std::vector<T> out(B * O * HO * WO);
  const T* X = x.data().data();
  const T* Wt = weight.data().data();
  const T* bptr = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      T* yo = out.data() + (b * O + o) * HO * WO;
      std::fill(yo, yo + HO * WO, bptr ? bptr[o] : T(0));
      const std::size_t g = o / opg;
      for (std::size_t cl = 0; cl < cpg; ++cl) {
        const T* xc = X + (b * C + g * cpg + cl) * H * W;
        for (std::size_t ky = 0; ky < KH; ++ky) {
          const TapRange ry = tap_range(ky, pad, s, H, HO);
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const TapRange rx = tap_range(kx, pad, s, W, WO);
            const T wv = Wt[((o * cpg + cl) * KH + ky) * KW + kx];
            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
              // modular size_t arithmetic: base + ox*s is always in range
              const std::size_t base = (oy * s + ky - pad) * W + kx - pad;
              T* yrow = yo + oy * WO;
              if (s == 1) {
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) yrow[ox] += wv * xc[base + ox];
              } else {
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) yrow[ox] += wv * xc[base + ox * s];
              }
            }
          }
        }
      }
    }
  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      {B, O, HO, WO}, std::move(out), {&x, &weight, bias.defined() ? &bias : nullptr}, "conv2d",
      [=](Node<T>& on) {
        T* gx = grad_of(xn);
        T* gw = grad_of(wn);
        T* gbias = bn ? grad_of(bn) : nullptr;
        const T* X = xn->data.data();
        const T* Wt = wn->data.data();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t o = 0; o < O; ++o) {
            const T* go = on.grad.data() + (b * O + o) * HO * WO;
            if (gbias) {
              T acc(0);
              for (std::size_t i = 0; i < HO * WO; ++i) acc += go[i];
              gbias[o] += acc;
            }
            const std::size_t g = o / opg;
            for (std::size_t cl = 0; cl < cpg; ++cl) {
              const std::size_t c = g * cpg + cl;
              const T* xc = X + (b * C + c) * H * W;
              T* dxc = gx ? gx + (b * C + c) * H * W : nullptr;
              for (std::size_t ky = 0; ky < KH; ++ky) {
                const TapRange ry = tap_range(ky, pad, s, H, HO);
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  const TapRange rx = tap_range(kx, pad, s, W, WO);
                  const std::size_t widx = ((o * cpg + cl) * KH + ky) * KW + kx;
                  const T wv = Wt[widx];
                  T wacc(0);
                  for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                    const std::size_t base = (oy * s + ky - pad) * W + kx - pad;
                    const T* grow = go + oy * WO;
                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                      wacc += grow[ox] * xc[base + ox * s];
                      if (dxc) dxc[base + ox * s] += wv * grow[ox];
                    }
                  }
                  if (gw) gw[widx] += wacc;
                }
              }
            }
          }
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           Conv2dGeometry geom) {
  require_rank(x.shape(), 4, "conv_transpose2d input");
  require_rank(weight.shape(), 4, "conv_transpose2d weight");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t G = geom.groups, s = geom.stride, pad = geom.padding;
  const std::size_t opg = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
  if (G == 0 || s == 0 || weight.dim(0) != C || C % G != 0) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(weight.shape()) + " with groups " +
                     std::to_string(G) + " incompatible with input " + shape_str(x.shape()));
  }
  if ((H - 1) * s + KH <= 2 * pad || (W - 1) * s + KW <= 2 * pad) {
    throw ShapeError("conv_transpose2d: padding " + std::to_string(pad) +
                     " leaves no output for input " + shape_str(x.shape()));
  }
  const std::size_t O = opg * G, cpg = C / G;
  if (bias.defined() && bias.numel() != O) {
    throw ShapeError("conv_transpose2d: bias " + shape_str(bias.shape()) + " for " +
                     std::to_string(O) + " output channels");
  }
  const std::size_t HO = (H - 1) * s + KH - 2 * pad, WO = (W - 1) * s + KW - 2 * pad;
  std::vector<T> out(B * O * HO * WO, T(0));
  const T* X = x.data().data();
  const T* Wt = weight.data().data();
  // Input position i maps to output i*s + k - pad; valid i form a TapRange
  // with the roles of input/output swapped.
  auto in_range = [pad, s](std::size_t k, std::size_t extent_in, std::size_t extent_out) {
    std::size_t lo = 0;
    if (k < pad) lo = (pad - k + s - 1) / s;
    std::size_t hi = 0;
    if (extent_out + pad > k) hi = (extent_out + pad - k - 1) / s + 1;
    hi = std::min(hi, extent_in);
    if (lo > hi) lo = hi;
    return TapRange{lo, hi};
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t g = c / cpg;
      const T* xc = X + (b * C + c) * H * W;
      for (std::size_t ol = 0; ol < opg; ++ol) {
        const std::size_t o = g * opg + ol;
        T* yo = out.data() + (b * O + o) * HO * WO;
        for (std::size_t ky = 0; ky < KH; ++ky) {
          const TapRange ry = in_range(ky, H, HO);
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const TapRange rx = in_range(kx, W, WO);
            const T wv = Wt[((c * opg + ol) * KH + ky) * KW + kx];
            for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
              const std::size_t base = (iy * s + ky - pad) * WO + kx - pad;
              const T* xrow = xc + iy * W;
              for (std::size_t ix = rx.lo; ix < rx.hi; ++ix) yo[base + ix * s] += wv * xrow[ix];
            }
          }
        }
      }
    }
  if (bias.defined()) {
    const T* bptr = bias.data().data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o) {
        T* yo = out.data() + (b * O + o) * HO * WO;
        for (std::size_t i = 0; i < HO * WO; ++i) yo[i] += bptr[o];
      }
  }
  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      {B, O, HO, WO}, std::move(out), {&x, &weight, bias.defined() ? &bias : nullptr},
      "conv_transpose2d", [=](Node<T>& on) {
        T* gx = grad_of(xn);
        T* gw = grad_of(wn);
        T* gbias = bn ? grad_of(bn) : nullptr;
        const T* X = xn->data.data();
        const T* Wt = wn->data.data();
        if (gbias) {
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < O; ++o) {
              const T* go = on.grad.data() + (b * O + o) * HO * WO;
              T acc(0);
              for (std::size_t i = 0; i < HO * WO; ++i) acc += go[i];
              gbias[o] += acc;
            }
        }
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t g = c / cpg;
            const T* xc = X + (b * C + c) * H * W;
            T* dxc = gx ? gx + (b * C + c) * H * W : nullptr;
            for (std::size_t ol = 0; ol < opg; ++ol) {
              const std::size_t o = g * opg + ol;
              const T* go = on.grad.data() + (b * O + o) * HO * WO;
              for (std::size_t ky = 0; ky < KH; ++ky) {
                const TapRange ry = in_range(ky, H, HO);
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  const TapRange rx = in_range(kx, W, WO);
                  const std::size_t widx = ((c * opg + ol) * KH + ky) * KW + kx;
                  const T wv = Wt[widx];
                  T wacc(0);
                  for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
                    const std::size_t base = (iy * s + ky - pad) * WO + kx - pad;
                    const T* xrow = xc + iy * W;
                    for (std::size_t ix = rx.lo; ix < rx.hi; ++ix) {
                      const T gv = go[base + ix * s];
                      wacc += gv * xrow[ix];
                      if (dxc) dxc[iy * W + ix] += wv * gv;
                    }
                  }
                  if (gw) gw[widx] += wacc;
                }
              }
            }
          }
      });
}

namespace {

// Normalizes `count` elements addressed as base[i*stride]; writes xhat and
// returns the reciprocal standard deviation.
template <typename T>
T normalize_strided(const T* base, std::size_t count, std::size_t stride, T eps, T* xhat) {
  T mu(0);
  for (std::size_t i = 0; i < count; ++i) mu += base[i * stride];
  mu /= static_cast<T>(count);
  T var(0);
  for (std::size_t i = 0; i < count; ++i) {
    const T d = base[i * stride] - mu;
    var += d * d;
  }
  var /= static_cast<T>(count);
  const T rstd = T(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < count; ++i) xhat[i * stride] = (base[i * stride] - mu) * rstd;
  return rstd;
}

}  // namespace

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t groups, T eps) {
  if (x.rank() < 2) throw ShapeError("group_norm: input rank < 2: " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1);
  if (groups == 0 || C % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.numel() != C || beta.numel() != C) {
    throw ShapeError("group_norm: affine parameters must have " + std::to_string(C) +
                     " entries");
  }
  const std::size_t S = x.numel() / (B * C);
  const std::size_t cpg = C / groups;
  const std::size_t n = cpg * S;
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(B * groups);
  std::vector<T> out(x.numel());
  const T* X = x.data().data();
  const T* ga = gamma.data().data();
  const T* be = beta.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t off = (b * C + g * cpg) * S;
      rstd[b * groups + g] = normalize_strided(X + off, n, 1, eps, xhat.data() + off);
      for (std::size_t cl = 0; cl < cpg; ++cl) {
        const std::size_t c = g * cpg + cl;
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t k = off + cl * S + i;
          out[k] = xhat[k] * ga[c] + be[c];
        }
      }
    }
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta}, "group_norm",
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& o) {
        T* gx = grad_of(xn);
        T* ggam = grad_of(gn);
        T* gbet = grad_of(bn);
        const T* G = o.grad.data();
        const T* gam = gn->data.data();
        std::vector<T> dxhat(n);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t off = (b * C + g * cpg) * S;
            T m1(0), m2(0);
            for (std::size_t cl = 0; cl < cpg; ++cl) {
              const std::size_t c = g * cpg + cl;
              for (std::size_t i = 0; i < S; ++i) {
                const std::size_t k = off + cl * S + i;
                if (ggam) ggam[c] += G[k] * xhat[k];
                if (gbet) gbet[c] += G[k];
                const T d = G[k] * gam[c];
                dxhat[cl * S + i] = d;
                m1 += d;
                m2 += d * xhat[k];
              }
            }
            if (!gx) continue;
            m1 /= static_cast<T>(n);
            m2 /= static_cast<T>(n);
            const T r = rstd[b * groups + g];
            for (std::size_t j = 0; j < n; ++j)
              gx[off + j] += r * (dxhat[j] - m1 - xhat[off + j] * m2);
          }
      });
}

template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              T eps) {
  if (x.rank() < 2) {
    throw ShapeError("layer_norm_channels: input rank < 2: " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1);
  if (gamma.numel() != C || beta.numel() != C) {
    throw ShapeError("layer_norm_channels: affine parameters must have " + std::to_string(C) +
                     " entries");
  }
  const std::size_t P = x.numel() / (B * C);
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(B * P);
  std::vector<T> out(x.numel());
  const T* X = x.data().data();
  const T* ga = gamma.data().data();
  const T* be = beta.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t off = b * C * P + p;
      rstd[b * P + p] = normalize_strided(X + off, C, P, eps, xhat.data() + off);
      for (std::size_t c = 0; c < C; ++c) out[off + c * P] = xhat[off + c * P] * ga[c] + be[c];
    }
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm_channels",
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& o) {
        T* gx = grad_of(xn);
        T* ggam = grad_of(gn);
        T* gbet = grad_of(bn);
        const T* G = o.grad.data();
        const T* gam = gn->data.data();
        std::vector<T> dxhat(C);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t off = b * C * P + p;
            T m1(0), m2(0);
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t k = off + c * P;
              if (ggam) ggam[c] += G[k] * xhat[k];
              if (gbet) gbet[c] += G[k];
              dxhat[c] = G[k] * gam[c];
              m1 += dxhat[c];
              m2 += dxhat[c] * xhat[k];
            }
            if (!gx) continue;
            m1 /= static_cast<T>(C);
            m2 /= static_cast<T>(C);
            const T r = rstd[b * P + p];
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t k = off + c * P;
              gx[k] += r * (dxhat[c] - m1 - xhat[k] * m2);
            }
          }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), ax);
  std::vector<T> out(x.numel());
  const T* X = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, X[base + j * s.inner]);
      T z(0);
      for (std::size_t j = 0; j < s.extent; ++j) {
        const T e = std::exp(X[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= z;
    }
  Node<T>* xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, "softmax", [xn, s](Node<T>& o) {
    T* gx = grad_of(xn);
    if (!gx) return;
    const T* Y = o.data.data();
    const T* G = o.grad.data();
    for (std::size_t q = 0; q < s.outer; ++q)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = q * s.extent * s.inner + i;
        T dot(0);
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t k = base + j * s.inner;
          dot += G[k] * Y[k];
        }
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t k = base + j * s.inner;
          gx[k] += Y[k] * (G[k] - dot);
        }
      }
  });
}

template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  require_rank(x.shape(), 4, "adaptive_avg_pool2d input");
  if (oh == 0 || ow == 0) throw ShapeError("adaptive_avg_pool2d: empty output grid");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) {
    return ((i + 1) * in + out - 1) / out;
  };
  std::vector<T> out(B * C * oh * ow);
  const T* X = x.data().data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* xp = X + bc * H * W;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t y0 = lo(i, H, oh), y1 = hi(i, H, oh);
        const std::size_t x0 = lo(j, W, ow), x1 = hi(j, W, ow);
        T acc(0);
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += xp[y * W + xx];
        out[(bc * oh + i) * ow + j] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>(
      {B, C, oh, ow}, std::move(out), {&x}, "adaptive_avg_pool2d", [=](Node<T>& o) {
        T* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t bc = 0; bc < B * C; ++bc)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
              const std::size_t y0 = lo(i, H, oh), y1 = hi(i, H, oh);
              const std::size_t x0 = lo(j, W, ow), x1 = hi(j, W, ow);
              const T g = o.grad[(bc * oh + i) * ow + j] / static_cast<T>((y1 - y0) * (x1 - x0));
              for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t xx = x0; xx < x1; ++xx) gx[bc * H * W + y * W + xx] += g;
            }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
  if (logits.rank() < 2) {
    throw ShapeError("cross_entropy: logits rank < 2: " + shape_str(logits.shape()));
  }
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  const std::size_t P = logits.numel() / (B * K);
  if (labels.size() != B * P) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  for (auto l : labels) {
    if (l >= K) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " >= " +
                              std::to_string(K) + " classes");
    }
  }
  const T* X = logits.data().data();
  std::vector<T> prob(logits.numel());
  T total(0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      const T* xp = X + b * K * P + p;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, xp[k * P]);
      T z(0);
      for (std::size_t k = 0; k < K; ++k) z += std::exp(xp[k * P] - mx);
      const T lz = std::log(z) + mx;
      for (std::size_t k = 0; k < K; ++k) prob[b * K * P + k * P + p] = std::exp(xp[k * P] - lz);
      total += lz - xp[labels[b * P + p] * P];
    }
  const T inv = T(1) / static_cast<T>(B * P);
  Node<T>* xn = logits.node();
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  return detail::make_result<T>(
      {}, {total * inv}, {&logits}, "cross_entropy",
      [=, prob = std::move(prob), lab = std::move(lab)](Node<T>& o) {
        T* gx = grad_of(xn);
        if (!gx) return;
        const T g = o.grad[0] * inv;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t p = 0; p < P; ++p) {
              const std::size_t i = b * K * P + k * P + p;
              const T onehot = lab[b * P + p] == k ? T(1) : T(0);
              gx[i] += g * (prob[i] - onehot);
            }
      });
}

#define SAMA_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> neg(const Tensor<T>&);                                                  \
  template Tensor<T> exp(const Tensor<T>&);                                                  \
  template Tensor<T> log(const Tensor<T>&);                                                  \
  template Tensor<T> square(const Tensor<T>&);                                               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                              \
  template Tensor<T> silu(const Tensor<T>&);                                                 \
  template Tensor<T> softplus(const Tensor<T>&);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> sum_keep_axis(const Tensor<T>&, int);                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);             \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                 \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                             \
  template Tensor<T> pad2d(const Tensor<T>&, std::size_t, std::size_t, std::size_t,          \
                           std::size_t);                                                     \
  template Tensor<T> reindex_spatial(const Tensor<T>&, std::span<const std::size_t>,         \
                                     std::size_t, std::size_t);                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> linear_channels(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                            Conv2dGeometry);                                                 \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                      Conv2dGeometry);                                       \
  template Tensor<T> group_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                std::size_t, T);                                             \
  template Tensor<T> layer_norm_channels(const Tensor<T>&, const Tensor<T>&,                 \
                                         const Tensor<T>&, T);                               \
  template Tensor<T> softmax(const Tensor<T>&, int);                                         \
  template Tensor<T> adaptive_avg_pool2d(const Tensor<T>&, std::size_t, std::size_t);        \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::uint8_t>);

SAMA_INSTANTIATE_OPS(float)
SAMA_INSTANTIATE_OPS(double)

}  // namespace sama
