#include "sama/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "sama/counters.hpp"
#include "sama/ops.hpp"

namespace sama {

void AttnConfig::validate() const {
  if (channels == 0) throw std::invalid_argument("attention: channels must be positive");
  if (heads == 0 || channels % heads != 0)
    throw std::invalid_argument("attention: heads (" + std::to_string(heads) +
                                ") must divide channels (" + std::to_string(channels) + ")");
  if (differential && head_dim() % 2 != 0)
    throw std::invalid_argument("attention: differential heads need an even head width, got " +
                                std::to_string(head_dim()));
  if (local_window == 0 || local_window % 2 == 0)
    throw std::invalid_argument("attention: local window must be odd");
  if (global_pool == 0) throw std::invalid_argument("attention: global pool size must be positive");
  if (!(lambda_init > 0.0 && lambda_init < 1.0))
    throw std::invalid_argument("attention: lambda_init must lie in (0, 1)");
}

std::size_t effective_heads(std::size_t channels, std::size_t requested, bool differential) {
  for (std::size_t h = std::min(requested, channels); h >= 1; --h) {
    if (channels % h != 0) continue;
    if (differential && (channels / h) % 2 != 0) continue;
    return h;
  }
  throw std::invalid_argument("attention: no valid head count for " + std::to_string(channels) +
                              " channels");
}

NeighborhoodMap build_neighborhood(std::size_t height, std::size_t width, std::size_t window) {
  if (window % 2 == 0) throw std::invalid_argument("neighborhood: window must be odd");
  NeighborhoodMap map{height, width, window, {}, {}};
  const std::size_t taps = window * window;
  map.index.assign(height * width * taps, 0);
  map.valid.assign(height * width * taps, 0);
  const long r = static_cast<long>(window / 2);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t base = (i * width + j) * taps;
      std::size_t t = 0;
      for (long dy = -r; dy <= r; ++dy) {
        for (long dx = -r; dx <= r; ++dx, ++t) {
          const long y = static_cast<long>(i) + dy;
          const long x = static_cast<long>(j) + dx;
          if (y < 0 || x < 0 || y >= static_cast<long>(height) || x >= static_cast<long>(width))
            continue;
          map.index[base + t] = static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x);
          map.valid[base + t] = 1;
        }
      }
    }
  }
  return map;
}

namespace {

template <typename T>
using Node = TensorNode<T>;

// One query row against m contiguous keys [m,c] and values [m,cv]. The
// backward pass recomputes the softmax maps instead of storing them.
template <typename T>
struct RowKernel {
  std::size_t c = 0, cv = 0;
  bool differential = true;
  std::vector<T> a1, a2, w, dw;

  RowKernel(std::size_t c_, std::size_t cv_, bool diff) : c(c_), cv(cv_), differential(diff) {}

  static void softmax_inplace(std::vector<T>& a, std::size_t m) {
    T mx = a[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, a[j]);
    T s = 0;
    for (std::size_t j = 0; j < m; ++j) {
      a[j] = std::exp(a[j] - mx);
      s += a[j];
    }
    for (std::size_t j = 0; j < m; ++j) a[j] /= s;
  }

  void weights(const T* q, const T* k, std::size_t m, T lam) {
    a1.assign(m, T(0));
    a2.assign(m, T(0));
    w.assign(m, T(0));
    if (m == 0) return;
    if (differential) {
      const std::size_t half = c / 2;
      const T scale = T(1) / std::sqrt(static_cast<T>(half));
      for (std::size_t j = 0; j < m; ++j) {
        const T* kj = k + j * c;
        T s1 = 0, s2 = 0;
        for (std::size_t t = 0; t < half; ++t) {
          s1 += q[t] * kj[t];
          s2 += q[half + t] * kj[half + t];
        }
        a1[j] = s1 * scale;
        a2[j] = s2 * scale;
      }
      softmax_inplace(a1, m);
      softmax_inplace(a2, m);
      for (std::size_t j = 0; j < m; ++j) w[j] = a1[j] - lam * a2[j];
    } else {
      const T scale = T(1) / std::sqrt(static_cast<T>(c));
      for (std::size_t j = 0; j < m; ++j) {
        const T* kj = k + j * c;
        T s = 0;
        for (std::size_t t = 0; t < c; ++t) s += q[t] * kj[t];
        a1[j] = s * scale;
      }
      softmax_inplace(a1, m);
      w = a1;
    }
  }

  void forward(const T* q, const T* k, const T* v, std::size_t m, T lam, T* out) {
    weights(q, k, m, lam);
    std::fill(out, out + cv, T(0));
    for (std::size_t j = 0; j < m; ++j) {
      const T* vj = v + j * cv;
      for (std::size_t t = 0; t < cv; ++t) out[t] += w[j] * vj[t];
    }
    OpCounters::local().attention_macs += m * (c + cv);
  }

  // Accumulates into dq [c], dk [m,c], dv [m,cv] and dlam.
  void backward(const T* q, const T* k, const T* v, std::size_t m, T lam, const T* g, T* dq,
                T* dk, T* dv, T* dlam) {
    if (m == 0) return;
    weights(q, k, m, lam);
    dw.assign(m, T(0));
    for (std::size_t j = 0; j < m; ++j) {
      const T* vj = v + j * cv;
      T* dvj = dv + j * cv;
      T s = 0;
      for (std::size_t t = 0; t < cv; ++t) {
        s += g[t] * vj[t];
        dvj[t] += w[j] * g[t];
      }
      dw[j] = s;
    }
    auto softmax_back = [m](const std::vector<T>& a, std::vector<T>& da) {
      T dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += a[j] * da[j];
      for (std::size_t j = 0; j < m; ++j) da[j] = a[j] * (da[j] - dot);
    };
    if (differential) {
      const std::size_t half = c / 2;
      const T scale = T(1) / std::sqrt(static_cast<T>(half));
      std::vector<T> d1 = dw;
      std::vector<T> d2(m);
      T dl = 0;
      for (std::size_t j = 0; j < m; ++j) {
        d2[j] = -lam * dw[j];
        dl -= a2[j] * dw[j];
      }
      *dlam += dl;
      softmax_back(a1, d1);
      softmax_back(a2, d2);
      for (std::size_t j = 0; j < m; ++j) {
        const T* kj = k + j * c;
        T* dkj = dk + j * c;
        const T s1 = d1[j] * scale;
        const T s2 = d2[j] * scale;
        for (std::size_t t = 0; t < half; ++t) {
          dq[t] += s1 * kj[t];
          dkj[t] += s1 * q[t];
          dq[half + t] += s2 * kj[half + t];
          dkj[half + t] += s2 * q[half + t];
        }
      }
    } else {
      const T scale = T(1) / std::sqrt(static_cast<T>(c));
      std::vector<T> d1 = dw;
      softmax_back(a1, d1);
      for (std::size_t j = 0; j < m; ++j) {
        const T* kj = k + j * c;
        T* dkj = dk + j * c;
        const T s = d1[j] * scale;
        for (std::size_t t = 0; t < c; ++t) {
          dq[t] += s * kj[t];
          dkj[t] += s * q[t];
        }
      }
    }
  }
};

struct DenseGeom {
  std::size_t groups, n, m, c, cv, heads;
};

template <typename T>
DenseGeom check_dense(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>* v,
                      const Tensor<T>* lambda, std::span<const std::uint8_t> mask,
                      bool differential, const char* op) {
  auto fail = [op](const std::string& msg) { throw ShapeError(std::string(op) + ": " + msg); };
  if (q.rank() != 3 || k.rank() != 3) fail("q and k must be [G,n,c] and [G,m,c]");
  DenseGeom g{q.dim(0), q.dim(1), k.dim(1), q.dim(2), 0, 1};
  if (k.dim(0) != g.groups || k.dim(2) != g.c)
    fail("k shape " + shape_str(k.shape()) + " does not match q " + shape_str(q.shape()));
  if (v) {
    if (v->rank() != 3 || v->dim(0) != g.groups || v->dim(1) != g.m)
      fail("v shape " + shape_str(v->shape()) + " does not match k " + shape_str(k.shape()));
    g.cv = v->dim(2);
  }
  if (differential) {
    if (g.c % 2 != 0) fail("differential attention needs an even head width");
    if (!lambda || !lambda->defined() || lambda->rank() != 1 || lambda->dim(0) == 0)
      fail("lambda must be a non-empty vector");
    g.heads = lambda->dim(0);
    if (g.groups % g.heads != 0) fail("lambda length must divide the group count");
  }
  if (!mask.empty() && mask.size() != g.n * g.m)
    fail("mask must have n*m = " + std::to_string(g.n * g.m) + " entries");
  return g;
}

// Gathers the unmasked keys of row i into contiguous scratch; returns the
// pointers the row kernel should read and the key count.
template <typename T>
struct RowKeys {
  std::vector<std::size_t> idx;
  std::vector<T> k, v;
  const T* kp = nullptr;
  const T* vp = nullptr;
  std::size_t m = 0;

  void select(const T* kg, const T* vg, const DenseGeom& g, std::span<const std::uint8_t> mask,
              std::size_t i) {
    if (mask.empty()) {
      kp = kg;
      vp = vg;
      m = g.m;
      return;
    }
    idx.clear();
    for (std::size_t j = 0; j < g.m; ++j)
      if (mask[i * g.m + j]) idx.push_back(j);
    m = idx.size();
    k.resize(m * g.c);
    for (std::size_t a = 0; a < m; ++a)
      std::copy_n(kg + idx[a] * g.c, g.c, k.data() + a * g.c);
    if (vg) {
      v.resize(m * g.cv);
      for (std::size_t a = 0; a < m; ++a)
        std::copy_n(vg + idx[a] * g.cv, g.cv, v.data() + a * g.cv);
    }
    kp = k.data();
    vp = v.data();
  }
};

template <typename T>
T* grad_or_null(Node<T>* n) {
  return n && n->requires_grad ? n->grad_buffer() : nullptr;
}

template <typename T>
Tensor<T> dense_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          const Tensor<T>* lambda, std::span<const std::uint8_t> mask_in,
                          bool differential, const char* op) {
  const DenseGeom g = check_dense(q, k, &v, lambda, mask_in, differential, op);
  std::vector<std::uint8_t> mask(mask_in.begin(), mask_in.end());
  std::vector<T> out(g.groups * g.n * g.cv);
  {
    RowKernel<T> kernel(g.c, g.cv, differential);
    RowKeys<T> keys;
    const T* qd = q.data().data();
    const T* kd = k.data().data();
    const T* vd = v.data().data();
    const T* ld = differential ? lambda->data().data() : nullptr;
    for (std::size_t gi = 0; gi < g.groups; ++gi) {
      const T lam = ld ? ld[gi % g.heads] : T(0);
      for (std::size_t i = 0; i < g.n; ++i) {
        keys.select(kd + gi * g.m * g.c, vd + gi * g.m * g.cv, g, mask, i);
        kernel.forward(qd + (gi * g.n + i) * g.c, keys.kp, keys.vp, keys.m, lam,
                       out.data() + (gi * g.n + i) * g.cv);
      }
    }
  }
  Node<T>* qn = q.node();
  Node<T>* kn = k.node();
  Node<T>* vn = v.node();
  Node<T>* ln = differential ? lambda->node() : nullptr;
  return detail::make_result<T>(
      {g.groups, g.n, g.cv}, std::move(out), {&q, &k, &v, differential ? lambda : nullptr}, op,
      [qn, kn, vn, ln, g, mask, differential](Node<T>& o) {
        RowKernel<T> kernel(g.c, g.cv, differential);
        RowKeys<T> keys;
        T* gq = grad_or_null(qn);
        T* gk = grad_or_null(kn);
        T* gv = grad_or_null(vn);
        T* gl = grad_or_null(ln);
        std::vector<T> dq(g.c), dk, dv;
        for (std::size_t gi = 0; gi < g.groups; ++gi) {
          const T lam = ln ? ln->data[gi % g.heads] : T(0);
          T dlam = 0;
          for (std::size_t i = 0; i < g.n; ++i) {
            const T* kg = kn->data.data() + gi * g.m * g.c;
            const T* vg = vn->data.data() + gi * g.m * g.cv;
            keys.select(kg, vg, g, mask, i);
            std::fill(dq.begin(), dq.end(), T(0));
            dk.assign(keys.m * g.c, T(0));
            dv.assign(keys.m * g.cv, T(0));
            const std::size_t row = gi * g.n + i;
            kernel.backward(qn->data.data() + row * g.c, keys.kp, keys.vp, keys.m, lam,
                            o.grad.data() + row * g.cv, dq.data(), dk.data(), dv.data(), &dlam);
            if (gq)
              for (std::size_t t = 0; t < g.c; ++t) gq[row * g.c + t] += dq[t];
            for (std::size_t a = 0; a < keys.m; ++a) {
              const std::size_t j = mask.empty() ? a : keys.idx[a];
              if (gk)
                for (std::size_t t = 0; t < g.c; ++t)
                  gk[(gi * g.m + j) * g.c + t] += dk[a * g.c + t];
              if (gv)
                for (std::size_t t = 0; t < g.cv; ++t)
                  gv[(gi * g.m + j) * g.cv + t] += dv[a * g.cv + t];
            }
          }
          if (gl) gl[gi % g.heads] += dlam;
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> diff_softmax(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                       const Tensor<T>& lambda, std::span<const std::uint8_t> mask) {
  return dense_attention(q, k, v, &lambda, mask, true, "diff_softmax");
}

template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            std::span<const std::uint8_t> mask) {
  return dense_attention<T>(q, k, v, nullptr, mask, false, "softmax_attention");
}

template <typename T>
std::vector<T> diff_softmax_weights(const Tensor<T>& q, const Tensor<T>& k,
                                    const Tensor<T>& lambda, std::span<const std::uint8_t> mask) {
  const DenseGeom g = check_dense<T>(q, k, nullptr, &lambda, mask, true, "diff_softmax_weights");
  std::vector<T> out(g.groups * g.n * g.m, T(0));
  RowKernel<T> kernel(g.c, 0, true);
  RowKeys<T> keys;
  for (std::size_t gi = 0; gi < g.groups; ++gi) {
    const T lam = lambda[gi % g.heads];
    for (std::size_t i = 0; i < g.n; ++i) {
      keys.select(k.data().data() + gi * g.m * g.c, nullptr, g, mask, i);
      kernel.weights(q.data().data() + (gi * g.n + i) * g.c, keys.kp, keys.m, lam);
      T* row = out.data() + (gi * g.n + i) * g.m;
      for (std::size_t a = 0; a < keys.m; ++a) row[mask.empty() ? a : keys.idx[a]] = kernel.w[a];
    }
  }
  return out;
}

namespace {

// Gathers one head of one pixel's neighbourhood out of NCHW maps.
template <typename T>
struct LocalGather {
  std::size_t c = 0, hw = 0, taps = 0;
  std::vector<std::size_t> idx;
  std::vector<T> q, k, v;

  // Channel j of this head at spatial index s lives at base + j*hw + s.
  void load(const T* qd, const T* kd, const T* vd, std::size_t base, std::size_t p,
            const NeighborhoodMap& map) {
    idx.clear();
    for (std::size_t t = 0; t < taps; ++t)
      if (map.valid[p * taps + t]) idx.push_back(map.index[p * taps + t]);
    const std::size_t m = idx.size();
    q.resize(c);
    k.resize(m * c);
    v.resize(m * c);
    for (std::size_t j = 0; j < c; ++j) q[j] = qd[base + j * hw + p];
    for (std::size_t a = 0; a < m; ++a) {
      for (std::size_t j = 0; j < c; ++j) {
        k[a * c + j] = kd[base + j * hw + idx[a]];
        v[a * c + j] = vd[base + j * hw + idx[a]];
      }
    }
  }
};

}  // namespace

template <typename T>
Tensor<T> local_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          const Tensor<T>& lambda, std::size_t heads, std::size_t window) {
  if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("local_attention: q, k, v must share an NCHW shape, got " +
                     shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()));
  const std::size_t batch = q.dim(0), d = q.dim(1), H = q.dim(2), W = q.dim(3);
  if (heads == 0 || d % heads != 0)
    throw ShapeError("local_attention: heads must divide channels");
  const bool differential = lambda.defined();
  const std::size_t c = d / heads;
  if (differential && (c % 2 != 0 || lambda.rank() != 1 || lambda.dim(0) != heads))
    throw ShapeError("local_attention: lambda must be [heads] with an even head width");
  auto map = std::make_shared<NeighborhoodMap>(build_neighborhood(H, W, window));
  const std::size_t hw = H * W;

  std::vector<T> out(q.numel());
  {
    RowKernel<T> kernel(c, c, differential);
    LocalGather<T> gather{c, hw, map->taps(), {}, {}, {}, {}};
    std::vector<T> row(c);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = (b * d + h * c) * hw;
        const T lam = differential ? lambda[h] : T(0);
        for (std::size_t p = 0; p < hw; ++p) {
          gather.load(q.data().data(), k.data().data(), v.data().data(), base, p, *map);
          kernel.forward(gather.q.data(), gather.k.data(), gather.v.data(), gather.idx.size(),
                         lam, row.data());
          for (std::size_t j = 0; j < c; ++j) out[base + j * hw + p] = row[j];
        }
      }
    }
  }
  Node<T>* qn = q.node();
  Node<T>* kn = k.node();
  Node<T>* vn = v.node();
  Node<T>* ln = differential ? lambda.node() : nullptr;
  return detail::make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v, differential ? &lambda : nullptr},
      "local_attention", [qn, kn, vn, ln, map, batch, d, heads, c, hw, differential](Node<T>& o) {
        RowKernel<T> kernel(c, c, differential);
        LocalGather<T> gather{c, hw, map->taps(), {}, {}, {}, {}};
        T* gq = grad_or_null(qn);
        T* gk = grad_or_null(kn);
        T* gv = grad_or_null(vn);
        T* gl = grad_or_null(ln);
        std::vector<T> g(c), dq(c), dk, dv;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = (b * d + h * c) * hw;
            const T lam = ln ? ln->data[h] : T(0);
            T dlam = 0;
            for (std::size_t p = 0; p < hw; ++p) {
              gather.load(qn->data.data(), kn->data.data(), vn->data.data(), base, p, *map);
              const std::size_t m = gather.idx.size();
              for (std::size_t j = 0; j < c; ++j) g[j] = o.grad[base + j * hw + p];
              std::fill(dq.begin(), dq.end(), T(0));
              dk.assign(m * c, T(0));
              dv.assign(m * c, T(0));
              kernel.backward(gather.q.data(), gather.k.data(), gather.v.data(), m, lam, g.data(),
                              dq.data(), dk.data(), dv.data(), &dlam);
              if (gq)
                for (std::size_t j = 0; j < c; ++j) gq[base + j * hw + p] += dq[j];
              for (std::size_t a = 0; a < m; ++a) {
                const std::size_t s = gather.idx[a];
                for (std::size_t j = 0; j < c; ++j) {
                  if (gk) gk[base + j * hw + s] += dk[a * c + j];
                  if (gv) gv[base + j * hw + s] += dv[a * c + j];
                }
              }
            }
            if (gl) gl[h] += dlam;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Branch layer

template <typename T>
AttnBranch<T>::AttnBranch(const AttnConfig& c, Branch k, Rng& rng) : cfg(c), kind(k) {
  cfg.validate();
  const std::size_t d = cfg.channels;
  wq = Linear<T>(d, d, true, rng);
  // Softmax is invariant to a key bias, so the key projection has none.
  wk = Linear<T>(d, d, false, rng);
  wv = Linear<T>(d, d, true, rng);
  if (cfg.differential) lambda = constant_param<T>({cfg.heads}, static_cast<T>(cfg.lambda_init));
  if (cfg.positional_encoding) pe = Conv2d<T>::depthwise(d, 3, 1, true, rng);
  if (cfg.differential && cfg.post_norm) gn = GroupNorm<T>(d, cfg.heads);
}

template <typename T>
void AttnBranch<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  wq.collect(out, prefix + ".wq");
  wk.collect(out, prefix + ".wk");
  wv.collect(out, prefix + ".wv");
  if (lambda.defined()) out.push_back({prefix + ".lambda", lambda});
  if (pe.weight.defined()) pe.collect(out, prefix + ".pe");
  if (gn.gamma.defined()) gn.collect(out, prefix + ".gn");
}

namespace {

// [B,d,H,W] -> [B*h, H*W, c]
template <typename T>
Tensor<T> to_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t B = x.dim(0), d = x.dim(1), hw = x.dim(2) * x.dim(3), c = d / heads;
  auto t = permute(reshape(x, {B, heads, c, hw}), {0, 1, 3, 2});
  return reshape(t, {B * heads, hw, c});
}

template <typename T>
Tensor<T> from_heads(const Tensor<T>& x, std::size_t batch, std::size_t heads, std::size_t H,
                     std::size_t W) {
  const std::size_t c = x.dim(2);
  auto t = permute(reshape(x, {batch, heads, H * W, c}), {0, 1, 3, 2});
  return reshape(t, {batch, heads * c, H, W});
}

template <typename T>
Tensor<T> branch_attention(const Tensor<T>& x, const AttnBranch<T>& p, Tensor<T>* v_full) {
  if (x.rank() != 4 || x.dim(1) != p.cfg.channels)
    throw ShapeError("attention branch: expected [B," + std::to_string(p.cfg.channels) +
                     ",H,W], got " + shape_str(x.shape()));
  const Tensor<T> lam = p.cfg.differential ? p.lambda : Tensor<T>();
  const Tensor<T> q = p.wq.channels(x);
  const Tensor<T> v = p.wv.channels(x);
  if (v_full) *v_full = v;
  if (p.kind == Branch::kLocal) {
    return local_attention(q, p.wk.channels(x), v, lam, p.cfg.heads, p.cfg.local_window);
  }
  const std::size_t P = p.cfg.global_pool;
  // Channel projections commute with average pooling, so pool first.
  const Tensor<T> pooled = adaptive_avg_pool2d(x, P, P);
  const Tensor<T> k = to_heads(p.wk.channels(pooled), p.cfg.heads);
  const Tensor<T> vp = to_heads(p.wv.channels(pooled), p.cfg.heads);
  const Tensor<T> qh = to_heads(q, p.cfg.heads);
  const Tensor<T> a = p.cfg.differential ? diff_softmax(qh, k, vp, lam)
                                         : softmax_attention(qh, k, vp);
  return from_heads(a, x.dim(0), p.cfg.heads, x.dim(2), x.dim(3));
}

}  // namespace

template <typename T>
Tensor<T> local_branch(const Tensor<T>& x, const AttnBranch<T>& p) {
  if (p.kind != Branch::kLocal) throw std::invalid_argument("local_branch: not a local branch");
  return branch_attention<T>(x, p, nullptr);
}

template <typename T>
Tensor<T> global_branch(const Tensor<T>& x, const AttnBranch<T>& p) {
  if (p.kind != Branch::kGlobal) throw std::invalid_argument("global_branch: not a global branch");
  return branch_attention<T>(x, p, nullptr);
}

template <typename T>
Tensor<T> diff_agg(const Tensor<T>& x, const AttnBranch<T>& p) {
  Tensor<T> v;
  Tensor<T> y = branch_attention<T>(x, p, &v);
  if (p.cfg.differential && p.cfg.post_norm)
    y = mul_scalar(p.gn(y), static_cast<T>(1.0 - p.cfg.lambda_init));
  if (p.cfg.positional_encoding) y = add(y, p.pe(v));
  return y;
}

#define SAMA_INSTANTIATE_ATTENTION(T)                                                        \
  template Tensor<T> diff_softmax(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                  const Tensor<T>&, std::span<const std::uint8_t>);          \
  template Tensor<T> softmax_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                       std::span<const std::uint8_t>);                       \
  template std::vector<T> diff_softmax_weights(const Tensor<T>&, const Tensor<T>&,           \
                                               const Tensor<T>&,                             \
                                               std::span<const std::uint8_t>);               \
  template Tensor<T> local_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                     const Tensor<T>&, std::size_t, std::size_t);            \
  template struct AttnBranch<T>;                                                             \
  template Tensor<T> local_branch(const Tensor<T>&, const AttnBranch<T>&);                   \
  template Tensor<T> global_branch(const Tensor<T>&, const AttnBranch<T>&);                  \
  template Tensor<T> diff_agg(const Tensor<T>&, const AttnBranch<T>&);

SAMA_INSTANTIATE_ATTENTION(float)
SAMA_INSTANTIATE_ATTENTION(double)

}  // namespace sama
