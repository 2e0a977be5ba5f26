#include <cmath>

#include "doctest.h"
#include "sama/counters.hpp"
#include "sama/gradcheck.hpp"
#include "sama/ssm.hpp"
#include "test_util.hpp"

using namespace sama;
using sama::testing::probe;
using sama::testing::random_tensor;

namespace {

using TD = Tensor<double>;

double softplus_ref(double v) { return v > 20 ? v : std::log1p(std::exp(v)); }

// Step-by-step recurrence with every projection written as an explicit loop.
std::vector<double> unrolled(const TD& x, const SsmParams<double>& p) {
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2), N = p.cfg.state;
  auto proj = [&](const Linear<double>& l, std::size_t row, std::size_t o) {
    double s = l.bias[o];
    if (l.weight.defined())
      for (std::size_t i = 0; i < C; ++i) s += l.weight[o * C + i] * x[row * C + i];
    return s;
  };
  std::vector<double> y(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<double> h(N, 0.0);
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t row = b * L + t;
        const double dt = softplus_ref(proj(p.proj_delta, row, c));
        const double xv = x[row * C + c];
        double out = p.d[c] * xv;
        for (std::size_t n = 0; n < N; ++n) {
          const double a = -std::exp(p.a_log[c * N + n]);
          h[n] = std::exp(dt * a) * h[n] + dt * proj(p.proj_b, row, n) * xv;
          out += proj(p.proj_c, row, n) * h[n];
        }
        y[row * C + c] = out;
      }
    }
  return y;
}

SsmParams<double> make_params(std::size_t C, std::size_t N, std::uint64_t seed,
                              bool static_params = false) {
  Rng rng(seed);
  SsmConfig cfg{C, N, static_params};
  SsmParams<double> p(cfg, rng);
  // Larger step sizes than the default init so the state actually mixes.
  for (auto& v : p.proj_delta.bias.mutable_data()) v = rng.uniform(-1.0, 0.5);
  return p;
}

std::vector<NamedInput> all_inputs(const TD& x, const SsmParams<double>& p) {
  std::vector<NamedInput> in{{"x", x}};
  ParamList<double> params;
  p.collect(params, "ssm");
  for (auto& np : params) in.push_back({np.name, np.tensor});
  return in;
}

}  // namespace

TEST_SUITE("selective scan") {
  TEST_CASE("single step has no history") {
    auto p = make_params(3, 4, 1);
    Rng rng(2);
    auto x = random_tensor({2, 1, 3}, rng);
    auto y = selective_scan(x, p);
    auto want = unrolled(x, p);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - want[i]) < 1e-12);
  }

  TEST_CASE("matches the unrolled recurrence") {
    for (std::size_t L : {6, 64}) {
      auto p = make_params(4, 8, 3);
      Rng rng(4);
      auto x = random_tensor({2, L, 4}, rng);
      auto y = selective_scan(x, p);
      auto want = unrolled(x, p);
      double m = 0;
      for (std::size_t i = 0; i < y.numel(); ++i) m = std::max(m, std::abs(y[i] - want[i]));
      CHECK(m < 1e-6);
    }
  }

  TEST_CASE("very negative A forgets all history") {
    auto p = make_params(3, 4, 5);
    for (auto& v : p.a_log.mutable_data()) v = 20.0;
    Rng rng(6);
    auto x = random_tensor({1, 5, 3}, rng);
    auto y = selective_scan(x, p);
    for (std::size_t t = 0; t < 5; ++t) {
      auto xt = slice(x, 1, t, 1);
      auto yt = selective_scan(xt, p);
      for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(y[t * 3 + c] - yt[c]) < 1e-5);
    }
  }

  TEST_CASE("causality") {
    auto p = make_params(3, 4, 7);
    Rng rng(8);
    auto x = random_tensor({1, 10, 3}, rng);
    auto y = selective_scan(x, p);
    for (std::size_t cut : {1, 4, 9}) {
      auto x2 = TD::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
      for (std::size_t t = cut; t < 10; ++t)
        for (std::size_t c = 0; c < 3; ++c) x2.mutable_data()[t * 3 + c] += rng.uniform(-3, 3);
      auto y2 = selective_scan(x2, p);
      for (std::size_t i = 0; i < cut * 3; ++i) CHECK(y[i] == y2[i]);
      CHECK(y[cut * 3] != y2[cut * 3]);
    }
  }

  TEST_CASE("long constant input stays bounded") {
    Rng rng(9);
    SsmParams<float> p(SsmConfig{4, 8, false}, rng);
    auto x = Tensor<float>::full({1, 10000, 4}, 1.0f);
    auto y = selective_scan(x, p);
    float m = 0;
    for (float v : y.data()) {
      REQUIRE(std::isfinite(v));
      m = std::max(m, std::abs(v));
    }
    CHECK(m < 1e3f);
  }

  TEST_CASE("cost is linear in sequence length") {
    Rng rng(10);
    SsmParams<float> p(SsmConfig{4, 8, false}, rng);
    auto count = [&](std::size_t L) {
      auto x = random_tensor<float>({1, L, 4}, rng);
      OpCounters::reset();
      (void)selective_scan(x, p);
      return static_cast<double>(OpCounters::local().scan_macs);
    };
    const double ratio = count(512) / count(256);
    CHECK(ratio >= 1.9);
    CHECK(ratio <= 2.1);
    CHECK(count(256) == 256.0 * 4 * 8);
  }

  TEST_CASE("errors") {
    auto p = make_params(3, 2, 11);
    CHECK_THROWS_AS(selective_scan(TD::zeros({1, 0, 3}), p), ShapeError);
    CHECK_THROWS_AS(selective_scan(TD::zeros({1, 4, 2}), p), ShapeError);
    Rng rng(1);
    CHECK_THROWS(SsmParams<double>(SsmConfig{3, 0, false}, rng));
  }

  TEST_CASE("static parameters keep only biases") {
    auto p = make_params(3, 2, 12, true);
    ParamList<double> params;
    p.collect(params, "s");
    CHECK(count_scalars(params) == 3 * 2 + 3 + 3 + 2 + 2);
    Rng rng(13);
    auto x = random_tensor({1, 7, 3}, rng);
    auto y = selective_scan(x, p);
    auto want = unrolled(x, p);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - want[i]) < 1e-12);
  }
}

TEST_SUITE("scan gradients") {
  TEST_CASE("one channel, one state, two steps") {
    auto p = make_params(1, 1, 20);
    Rng rng(21);
    auto x = random_tensor({1, 2, 1}, rng);
    auto r = grad_check([&] { return probe(selective_scan(x, p)); }, all_inputs(x, p));
    INFO(r.worst_input, "[", r.worst_index, "]");
    CHECK(r.max_rel_error < 1e-5);
  }

  TEST_CASE("eight steps, four channels, four states") {
    auto p = make_params(4, 4, 22);
    Rng rng(23);
    auto x = random_tensor({2, 8, 4}, rng);
    auto r = grad_check([&] { return probe(selective_scan(x, p)); }, all_inputs(x, p));
    INFO(r.worst_input, "[", r.worst_index, "]");
    CHECK(r.max_rel_error < 1e-4);
  }

  TEST_CASE("static scan gradient") {
    auto p = make_params(2, 3, 24, true);
    Rng rng(25);
    auto x = random_tensor({1, 6, 2}, rng);
    auto r = grad_check([&] { return probe(selective_scan(x, p)); }, all_inputs(x, p));
    CHECK(r.max_rel_error < 1e-4);
  }

  TEST_CASE("frozen delta, B, C: gradient is the transposed convolution") {
    // With per-step quantities fixed the scan is y = M x per channel, where
    // M[t][s] = sum_n c_t[n] prod_{s<r<=t} exp(dt_r a_n) dt_s b_s[n] + d [t==s].
    const std::size_t L = 7, C = 2, N = 3;
    Rng rng(26);
    auto dt = random_tensor({1, L, C}, rng, 0.1, 0.9);
    auto b = random_tensor({1, L, N}, rng);
    auto c = random_tensor({1, L, N}, rng);
    auto a_log = random_tensor({C, N}, rng, -1, 1);
    auto d = random_tensor({C}, rng);
    auto x = random_tensor({1, L, C}, rng).set_requires_grad(true);
    auto g = random_tensor({1, L, C}, rng);
    {
      Tape<double> tape;
      auto y = scan(x, dt, b, c, a_log, d);
      tape.backward(y, g.data());
    }
    for (std::size_t ch = 0; ch < C; ++ch) {
      std::vector<double> M(L * L, 0.0);
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t s = 0; s <= t; ++s) {
          double v = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const double a = -std::exp(a_log[ch * N + n]);
            double decay = 1.0;
            for (std::size_t r = s + 1; r <= t; ++r) decay *= std::exp(dt[r * C + ch] * a);
            v += c[t * N + n] * decay * dt[s * C + ch] * b[s * N + n];
          }
          M[t * L + s] = v + (t == s ? d[ch] : 0.0);
        }
      for (std::size_t s = 0; s < L; ++s) {
        double want = 0.0;
        for (std::size_t t = 0; t < L; ++t) want += M[t * L + s] * g[t * C + ch];
        CHECK(std::abs(x.grad()[s * C + ch] - want) < 1e-12);
      }
    }
  }
}
