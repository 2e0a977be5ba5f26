#include "sama/ssm.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "sama/counters.hpp"
#include "sama/ops.hpp"

namespace sama {

template <typename T>
SsmParams<T>::SsmParams(const SsmConfig& c, Rng& rng) : cfg(c) {
  if (cfg.channels == 0 || cfg.state == 0)
    throw std::invalid_argument("ssm: channels and state must be positive");
  const std::size_t C = cfg.channels, N = cfg.state;
  std::vector<T> al(C * N);
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t n = 0; n < N; ++n) al[i * N + n] = static_cast<T>(std::log(n + 1.0));
  a_log = Tensor<T>::from({C, N}, std::move(al)).set_requires_grad(true);
  d = constant_param<T>({C}, T(1));

  proj_delta = Linear<T>(C, C, true, rng);
  proj_b = Linear<T>(C, N, true, rng);
  proj_c = Linear<T>(C, N, true, rng);
  // Step sizes start log-uniform in [1e-3, 1e-1] through the inverse softplus.
  for (auto& v : proj_delta.bias.mutable_data()) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  if (cfg.static_params) {
    proj_delta.weight = Tensor<T>();
    proj_b.weight = Tensor<T>();
    proj_c.weight = Tensor<T>();
    // Nonzero constants so a static scan is not trivially zero.
    for (auto* l : {&proj_b, &proj_c})
      for (auto& v : l->bias.mutable_data()) v = static_cast<T>(rng.uniform(0.5, 1.0));
  }
}

template <typename T>
void SsmParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".a_log", a_log});
  out.push_back({prefix + ".d", d});
  for (auto [name, l] : {std::pair{".delta", &proj_delta}, std::pair{".b", &proj_b},
                         std::pair{".c", &proj_c}}) {
    if (l->weight.defined()) out.push_back({prefix + name + ".weight", l->weight});
    out.push_back({prefix + name + ".bias", l->bias});
  }
}

namespace {

template <typename T>
using Node = TensorNode<T>;

template <typename T>
T* grad_or_null(Node<T>* n) {
  return n->requires_grad ? n->grad_buffer() : nullptr;
}

}  // namespace

template <typename T>
Tensor<T> scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& b, const Tensor<T>& c,
               const Tensor<T>& a_log, const Tensor<T>& d) {
  if (x.rank() != 3) throw ShapeError("scan: x must be [B,L,C], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (L == 0) throw ShapeError("scan: empty sequence");
  if (a_log.rank() != 2 || a_log.dim(0) != C)
    throw ShapeError("scan: a_log must be [C,N], got " + shape_str(a_log.shape()));
  const std::size_t N = a_log.dim(1);
  if (delta.shape() != x.shape())
    throw ShapeError("scan: delta shape " + shape_str(delta.shape()) + " != x shape " +
                     shape_str(x.shape()));
  const Shape bc{B, L, N};
  if (b.shape() != bc || c.shape() != bc)
    throw ShapeError("scan: b and c must be " + shape_str(bc));
  if (d.shape() != Shape{C}) throw ShapeError("scan: d must be [C]");

  std::vector<T> A(C * N);
  for (std::size_t i = 0; i < C * N; ++i) A[i] = -std::exp(a_log[i]);

  // States h_t for every (b, t, channel), kept for the reverse recurrence.
  auto states = std::make_shared<std::vector<T>>(B * L * C * N);
  std::vector<T> y(B * L * C);
  const T* xd = x.data().data();
  const T* dd = delta.data().data();
  const T* bd = b.data().data();
  const T* cd = c.data().data();
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t ch = 0; ch < C; ++ch) {
      const T* a = A.data() + ch * N;
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t row = bi * L + t;
        const std::size_t xi = row * C + ch;
        const T dt = dd[xi];
        const T xv = xd[xi];
        const T* hp = t ? states->data() + (xi - C) * N : nullptr;
        T* h = states->data() + xi * N;
        T acc = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const T prev = hp ? hp[n] : T(0);
          h[n] = std::exp(dt * a[n]) * prev + dt * bd[row * N + n] * xv;
          acc += cd[row * N + n] * h[n];
        }
        y[xi] = acc + d[ch] * xv;
      }
    }
  }
  OpCounters::local().scan_macs += B * L * C * N;

  Node<T>* xn = x.node();
  Node<T>* dn = delta.node();
  Node<T>* bn = b.node();
  Node<T>* cn = c.node();
  Node<T>* an = a_log.node();
  Node<T>* Dn = d.node();
  return detail::make_result<T>(
      x.shape(), std::move(y), {&x, &delta, &b, &c, &a_log, &d}, "scan",
      [=](Node<T>& o) {
        T* gx = grad_or_null(xn);
        T* gdt = grad_or_null(dn);
        T* gb = grad_or_null(bn);
        T* gc = grad_or_null(cn);
        T* ga = grad_or_null(an);
        T* gD = grad_or_null(Dn);
        const T* gy = o.grad.data();
        std::vector<T> A(C * N);
        for (std::size_t i = 0; i < C * N; ++i) A[i] = -std::exp(an->data[i]);
        std::vector<T> gh(N);
        for (std::size_t bi = 0; bi < B; ++bi) {
          for (std::size_t ch = 0; ch < C; ++ch) {
            const T* a = A.data() + ch * N;
            std::fill(gh.begin(), gh.end(), T(0));
            for (std::size_t t = L; t-- > 0;) {
              const std::size_t row = bi * L + t;
              const std::size_t xi = row * C + ch;
              const T g = gy[xi];
              const T dt = dn->data[xi];
              const T xv = xn->data[xi];
              const T* h = states->data() + xi * N;
              const T* hp = t ? states->data() + (xi - C) * N : nullptr;
              if (gD) gD[ch] += g * xv;
              T gxv = g * Dn->data[ch];
              T gdtv = 0;
              for (std::size_t n = 0; n < N; ++n) {
                const T bv = bn->data[row * N + n];
                if (gc) gc[row * N + n] += g * h[n];
                gh[n] += g * cn->data[row * N + n];
                const T decay = std::exp(dt * a[n]);
                const T prev = hp ? hp[n] : T(0);
                const T gdecay = gh[n] * prev * decay;  // d/d(dt*a) of decay*prev
                gdtv += gdecay * a[n] + gh[n] * bv * xv;
                // a = -exp(a_log): d a / d a_log = a
                if (ga) ga[ch * N + n] += gdecay * dt * a[n];
                if (gb) gb[row * N + n] += gh[n] * dt * xv;
                gxv += gh[n] * dt * bv;
                gh[n] *= decay;
              }
              if (gx) gx[xi] += gxv;
              if (gdt) gdt[xi] += gdtv;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const SsmParams<T>& p) {
  if (x.rank() != 3 || x.dim(2) != p.cfg.channels)
    throw ShapeError("selective_scan: expected [B,L," + std::to_string(p.cfg.channels) +
                     "], got " + shape_str(x.shape()));
  auto project = [&](const Linear<T>& l) {
    if (l.weight.defined()) return l(x);
    return add(Tensor<T>::zeros({x.dim(0), x.dim(1), l.bias.dim(0)}), l.bias);
  };
  return scan(x, softplus(project(p.proj_delta)), project(p.proj_b), project(p.proj_c), p.a_log,
              p.d);
}

#define SAMA_INSTANTIATE_SSM(T)                                                             \
  template struct SsmParams<T>;                                                             \
  template Tensor<T> scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                          const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> selective_scan(const Tensor<T>&, const SsmParams<T>&);

SAMA_INSTANTIATE_SSM(float)
SAMA_INSTANTIATE_SSM(double)

}  // namespace sama
