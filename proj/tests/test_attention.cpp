#include <cmath>
#include <limits>

#include "doctest.h"
#include "sama/attention.hpp"
#include "sama/counters.hpp"
#include "sama/gradcheck.hpp"
#include "test_util.hpp"

using namespace sama;
using sama::testing::bit_equal;
using sama::testing::max_abs_diff;
using sama::testing::probe;
using sama::testing::random_tensor;

namespace {

using TD = Tensor<double>;

// Plain softmax attention of one row written out longhand: weights over the
// listed keys, using channels [c0, c0+cw) of q and k.
std::vector<double> attend_row(const double* q, const std::vector<const double*>& keys,
                               const std::vector<const double*>& vals, std::size_t c0,
                               std::size_t cw, std::size_t cv, std::vector<double>* weights) {
  std::vector<double> logits;
  for (const double* k : keys) {
    double s = 0.0;
    for (std::size_t t = c0; t < c0 + cw; ++t) s += q[t] * k[t];
    logits.push_back(s / std::sqrt(static_cast<double>(cw)));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l);
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - mx));
  for (double& l : logits) l /= z;
  std::vector<double> out(cv, 0.0);
  for (std::size_t j = 0; j < keys.size(); ++j)
    for (std::size_t t = 0; t < cv; ++t) out[t] += logits[j] * vals[j][t];
  if (weights) *weights = logits;
  return out;
}

// Differential row: two half-channel softmax maps combined with lambda.
std::vector<double> diff_row(const double* q, const std::vector<const double*>& keys,
                             const std::vector<const double*>& vals, std::size_t c,
                             std::size_t cv, double lam) {
  auto a = attend_row(q, keys, vals, 0, c / 2, cv, nullptr);
  auto b = attend_row(q, keys, vals, c / 2, c / 2, cv, nullptr);
  for (std::size_t t = 0; t < cv; ++t) a[t] -= lam * b[t];
  return a;
}

// Local attention by enumerating each pixel's in-image neighbours explicitly
// from NCHW buffers, per head.
std::vector<double> local_oracle(const TD& q, const TD& k, const TD& v, const TD& lambda,
                                 std::size_t heads, std::size_t window) {
  const std::size_t B = q.dim(0), d = q.dim(1), H = q.dim(2), W = q.dim(3), c = d / heads;
  const long r = static_cast<long>(window / 2);
  std::vector<double> out(q.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          auto at = [&](const TD& t, std::size_t ch, std::size_t y, std::size_t x) {
            return t[((b * d + h * c + ch) * H + y) * W + x];
          };
          std::vector<double> qv(c);
          for (std::size_t t = 0; t < c; ++t) qv[t] = at(q, t, i, j);
          std::vector<std::vector<double>> ks, vs;
          for (long dy = -r; dy <= r; ++dy)
            for (long dx = -r; dx <= r; ++dx) {
              const long y = static_cast<long>(i) + dy, x = static_cast<long>(j) + dx;
              if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W))
                continue;
              std::vector<double> kk(c), vv(c);
              for (std::size_t t = 0; t < c; ++t) {
                kk[t] = at(k, t, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
                vv[t] = at(v, t, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
              }
              ks.push_back(kk);
              vs.push_back(vv);
            }
          std::vector<const double*> kp, vp;
          for (std::size_t a = 0; a < ks.size(); ++a) {
            kp.push_back(ks[a].data());
            vp.push_back(vs[a].data());
          }
          const auto row = lambda.defined() ? diff_row(qv.data(), kp, vp, c, c, lambda[h])
                                            : attend_row(qv.data(), kp, vp, 0, c, c, nullptr);
          for (std::size_t t = 0; t < c; ++t) out[((b * d + h * c + t) * H + i) * W + j] = row[t];
        }
  return out;
}

AttnConfig small_config(std::size_t d, std::size_t heads) {
  AttnConfig cfg;
  cfg.channels = d;
  cfg.heads = heads;
  return cfg;
}

void zero(TD& t) {
  for (auto& x : t.mutable_data()) x = 0.0;
}

}  // namespace

TEST_SUITE("diff_softmax") {
  TEST_CASE("lambda zero reduces to softmax attention on the first halves") {
    Rng rng(3);
    auto q = random_tensor({2, 3, 4}, rng, -2, 2);
    auto k = random_tensor({2, 5, 4}, rng, -2, 2);
    auto v = random_tensor({2, 5, 3}, rng);
    auto lam = TD::zeros({1});
    auto y = diff_softmax(q, k, v, lam);
    for (std::size_t g = 0; g < 2; ++g)
      for (std::size_t i = 0; i < 3; ++i) {
        std::vector<const double*> ks, vs;
        for (std::size_t j = 0; j < 5; ++j) {
          ks.push_back(k.data().data() + (g * 5 + j) * 4);
          vs.push_back(v.data().data() + (g * 5 + j) * 3);
        }
        auto want = attend_row(q.data().data() + (g * 3 + i) * 4, ks, vs, 0, 2, 3, nullptr);
        for (std::size_t t = 0; t < 3; ++t)
          CHECK(std::abs(y[(g * 3 + i) * 3 + t] - want[t]) < 1e-6);
      }
  }

  TEST_CASE("rows of the combined map sum to one minus lambda") {
    Rng rng(4);
    auto q = random_tensor<float>({4, 6, 8}, rng, -3, 3);
    auto k = random_tensor<float>({4, 7, 8}, rng, -3, 3);
    auto lam = Tensor<float>::from({2}, {0.3f, 0.8f});
    auto w = diff_softmax_weights(q, k, lam);
    for (std::size_t g = 0; g < 4; ++g)
      for (std::size_t i = 0; i < 6; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 7; ++j) s += w[(g * 6 + i) * 7 + j];
        CHECK(std::abs(s - (1.0 - lam[g % 2])) < 1e-6);
      }
  }

  TEST_CASE("two by two hand evaluation") {
    // c = 2: first map uses channel 0, second uses channel 1, scale 1.
    auto q = TD::from({1, 2, 2}, {1, 2, 0, -1});
    auto k = TD::from({1, 2, 2}, {1, 0, 2, 1});
    auto v = TD::from({1, 2, 2}, {1, 2, 3, -1});
    const double lam = 0.5;
    auto y = diff_softmax(q, k, v, TD::from({1}, {lam}));
    const double e = std::exp(1.0);
    // row 0: logits A1 (1, 2), A2 (0, 2); row 1: A1 (0, 0), A2 (0, -1)
    const double w00 = 1 / (1 + e) - lam / (1 + e * e);
    const double w01 = e / (1 + e) - lam * e * e / (1 + e * e);
    const double w10 = 0.5 - lam * e / (e + 1);
    const double w11 = 0.5 - lam * 1 / (e + 1);
    const double want[] = {w00 * 1 + w01 * 3, w00 * 2 - w01, w10 * 1 + w11 * 3, w10 * 2 - w11};
    for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(want[i]).epsilon(1e-14));
  }

  TEST_CASE("odd head width is rejected") {
    Rng rng(5);
    auto q = random_tensor({1, 2, 3}, rng);
    auto v = random_tensor({1, 2, 3}, rng);
    CHECK_THROWS_AS(diff_softmax(q, q, v, TD::from({1}, {0.5})), ShapeError);
  }

  TEST_CASE("shape mismatches are rejected") {
    Rng rng(5);
    auto q = random_tensor({2, 2, 4}, rng);
    auto k = random_tensor({2, 3, 4}, rng);
    auto v = random_tensor({2, 2, 4}, rng);
    CHECK_THROWS_AS(diff_softmax(q, k, v, TD::from({1}, {0.5})), ShapeError);
    CHECK_THROWS_AS(diff_softmax(q, q, v, TD::from({3}, {0.5, 0.5, 0.5})), ShapeError);
    std::vector<std::uint8_t> mask(3, 1);
    CHECK_THROWS_AS(diff_softmax(q, q, v, TD::from({1}, {0.5}), mask), ShapeError);
  }

  TEST_CASE("masked keys have no influence") {
    Rng rng(6);
    auto q = random_tensor({1, 3, 4}, rng);
    auto k = random_tensor({1, 4, 4}, rng);
    auto v = random_tensor({1, 4, 2}, rng);
    auto lam = TD::from({1}, {0.8});
    std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1};
    auto y = diff_softmax(q, k, v, lam, mask);
    auto w = diff_softmax_weights(q, k, lam, mask);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (!mask[i]) CHECK(w[i] == 0.0);
    // Key 1 is masked for row 0 only; perturbing it must leave that row alone.
    auto k2 = TD::from(k.shape(), std::vector<double>(k.data().begin(), k.data().end()));
    auto v2 = TD::from(v.shape(), std::vector<double>(v.data().begin(), v.data().end()));
    for (std::size_t t = 0; t < 4; ++t) k2.mutable_data()[4 + t] += 10.0;
    for (std::size_t t = 0; t < 2; ++t) v2.mutable_data()[2 + t] -= 7.0;
    auto y2 = diff_softmax(q, k2, v2, lam, mask);
    for (std::size_t t = 0; t < 2; ++t) CHECK(y[t] == y2[t]);
    CHECK(y[2] != y2[2]);
  }

  TEST_CASE("gradient check with a mask") {
    Rng rng(7);
    auto q = random_tensor({2, 3, 4}, rng);
    auto k = random_tensor({2, 4, 4}, rng);
    auto v = random_tensor({2, 4, 3}, rng);
    auto lam = TD::from({2}, {0.4, 0.7});
    std::vector<std::uint8_t> mask = {1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1, 0};
    auto r = grad_check([&] { return probe(diff_softmax(q, k, v, lam, mask)); },
                        {{"q", q}, {"k", k}, {"v", v}, {"lambda", lam}});
    CHECK(r.max_rel_error < 1e-6);
  }

  TEST_CASE("gradient check of plain softmax attention") {
    Rng rng(8);
    auto q = random_tensor({1, 3, 3}, rng);
    auto k = random_tensor({1, 5, 3}, rng);
    auto v = random_tensor({1, 5, 2}, rng);
    auto r = grad_check([&] { return probe(softmax_attention(q, k, v)); },
                        {{"q", q}, {"k", k}, {"v", v}});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_SUITE("neighborhood") {
  TEST_CASE("corner, edge and interior tap counts") {
    auto map = build_neighborhood(3, 4, 3);
    auto count = [&](std::size_t p) {
      std::size_t n = 0;
      for (std::size_t t = 0; t < 9; ++t) n += map.valid[p * 9 + t];
      return n;
    };
    CHECK(count(0) == 4);
    CHECK(count(1) == 6);
    CHECK(count(5) == 9);
    // centre tap is the pixel itself
    for (std::size_t p = 0; p < 12; ++p) CHECK(map.index[p * 9 + 4] == p);
    // pixel (1,1): top-left tap is (0,0)
    CHECK(map.index[5 * 9 + 0] == 0);
    CHECK_THROWS(build_neighborhood(3, 3, 2));
  }
}

TEST_SUITE("local attention") {
  TEST_CASE("matches explicit neighbour enumeration") {
    Rng rng(11);
    for (std::size_t heads : {1, 2}) {
      auto q = random_tensor({2, 4, 3, 3}, rng, -2, 2);
      auto k = random_tensor({2, 4, 3, 3}, rng, -2, 2);
      auto v = random_tensor({2, 4, 3, 3}, rng);
      auto lam = heads == 1 ? TD::from({1}, {0.8}) : TD::from({2}, {0.8, 0.3});
      auto y = local_attention(q, k, v, lam, heads, 3);
      auto want = local_oracle(q, k, v, lam, heads, 3);
      CHECK(max_abs_diff<double>(y.data(), want) < 1e-12);
    }
  }

  TEST_CASE("non-square image, wider window, plain softmax") {
    Rng rng(12);
    auto q = random_tensor({1, 3, 4, 6}, rng);
    auto k = random_tensor({1, 3, 4, 6}, rng);
    auto v = random_tensor({1, 3, 4, 6}, rng);
    auto y = local_attention(q, k, v, TD(), 1, 5);
    auto want = local_oracle(q, k, v, TD(), 1, 5);
    CHECK(max_abs_diff<double>(y.data(), want) < 1e-12);
  }

  TEST_CASE("uniform keys give uniform weights over valid neighbours") {
    // Constant keys make every logit in a row equal, so each valid tap gets
    // weight (1 - lambda) / count and the output is (1 - lambda) times the
    // neighbourhood mean of v.
    Rng rng(13);
    auto q = random_tensor({1, 2, 4, 4}, rng);
    auto k = TD::full({1, 2, 4, 4}, 0.7);
    auto v = random_tensor({1, 2, 4, 4}, rng);
    const double lam = 0.8;
    auto y = local_attention(q, k, v, TD::from({1}, {lam}), 1, 3);
    auto map = build_neighborhood(4, 4, 3);
    for (std::size_t ch = 0; ch < 2; ++ch)
      for (std::size_t p = 0; p < 16; ++p) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t t = 0; t < 9; ++t)
          if (map.valid[p * 9 + t]) {
            s += v[ch * 16 + map.index[p * 9 + t]];
            ++n;
          }
        CHECK(std::abs(y[ch * 16 + p] - (1 - lam) * s / static_cast<double>(n)) < 1e-12);
      }
  }

  TEST_CASE("gradient check") {
    Rng rng(14);
    auto q = random_tensor({1, 4, 3, 4}, rng);
    auto k = random_tensor({1, 4, 3, 4}, rng);
    auto v = random_tensor({1, 4, 3, 4}, rng);
    auto lam = TD::from({2}, {0.6, 0.2});
    auto r = grad_check([&] { return probe(local_attention(q, k, v, lam, 2, 3)); },
                        {{"q", q}, {"k", k}, {"v", v}, {"lambda", lam}});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_SUITE("branches") {
  TEST_CASE("config validation and head selection") {
    AttnConfig cfg = small_config(8, 4);
    CHECK_NOTHROW(cfg.validate());
    cfg.heads = 3;
    CHECK_THROWS(cfg.validate());
    cfg = small_config(6, 2);
    CHECK_THROWS(cfg.validate());  // head width 3 is odd
    cfg.differential = false;
    CHECK_NOTHROW(cfg.validate());
    cfg = small_config(8, 2);
    cfg.local_window = 4;
    CHECK_THROWS(cfg.validate());
    cfg.local_window = 3;
    cfg.lambda_init = 1.0;
    CHECK_THROWS(cfg.validate());
    CHECK(effective_heads(8, 4, true) == 4);
    CHECK(effective_heads(12, 4, true) == 3);
    CHECK(effective_heads(6, 4, true) == 3);
    CHECK(effective_heads(6, 4, false) == 3);
    CHECK(effective_heads(10, 4, true) == 1);
    CHECK_THROWS(effective_heads(5, 4, true));
  }

  TEST_CASE("one pixel image attends only to itself") {
    Rng rng(21);
    auto cfg = small_config(4, 2);
    cfg.post_norm = false;
    AttnBranch<double> p(cfg, Branch::kLocal, rng);
    auto x = random_tensor({1, 4, 1, 1}, rng);
    auto v = p.wv.channels(x);
    auto y = local_branch(x, p);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(std::abs(y[i] - (1 - cfg.lambda_init) * v[i]) < 1e-12);
    auto z = diff_agg(x, p);
    auto pe = p.pe(v);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(std::abs(z[i] - ((1 - cfg.lambda_init) * v[i] + pe[i])) < 1e-12);
  }

  TEST_CASE("global branch with pooled grid equal to the image is full attention") {
    Rng rng(22);
    auto cfg = small_config(4, 2);
    cfg.global_pool = 3;
    AttnBranch<double> p(cfg, Branch::kGlobal, rng);
    p.lambda = TD::from({2}, {0.8, 0.5}).set_requires_grad(true);
    auto x = random_tensor({2, 4, 3, 3}, rng);
    auto y = global_branch(x, p);
    auto q = p.wq.channels(x), k = p.wk.channels(x), v = p.wv.channels(x);
    // every pixel attends to all nine pixels: a 9x9 window covers them all
    auto want = local_oracle(q, k, v, p.lambda, 2, 5);
    CHECK(max_abs_diff<double>(y.data(), want) < 1e-12);
  }

  TEST_CASE("constant input gives a constant global output") {
    Rng rng(23);
    AttnBranch<double> p(small_config(4, 1), Branch::kGlobal, rng);
    auto x = TD::zeros({1, 4, 9, 5});
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t s = 0; s < 45; ++s) x.mutable_data()[c * 45 + s] = 0.3 * (c + 1.0);
    auto y = global_branch(x, p);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t s = 0; s < 45; ++s) CHECK(std::abs(y[c * 45 + s] - y[c * 45]) < 1e-12);
  }

  TEST_CASE("single global token carries one minus lambda of the mean value") {
    Rng rng(24);
    auto cfg = small_config(4, 1);
    cfg.global_pool = 1;
    AttnBranch<double> p(cfg, Branch::kGlobal, rng);
    auto x = random_tensor({1, 4, 5, 3}, rng);
    auto y = global_branch(x, p);
    for (std::size_t c = 0; c < 4; ++c) {
      double vbar = p.wv.bias[c];
      for (std::size_t i = 0; i < 4; ++i) {
        double m = 0.0;
        for (std::size_t s = 0; s < 15; ++s) m += x[i * 15 + s];
        vbar += p.wv.weight[c * 4 + i] * m / 15.0;
      }
      for (std::size_t s = 0; s < 15; ++s)
        CHECK(std::abs(y[c * 15 + s] - (1 - cfg.lambda_init) * vbar) < 1e-12);
    }
  }

  TEST_CASE("zero input with zero biases gives zero output") {
    Rng rng(25);
    for (Branch kind : {Branch::kLocal, Branch::kGlobal}) {
      AttnBranch<double> p(small_config(4, 2), kind, rng);
      zero(p.wq.bias);
      zero(p.wv.bias);
      zero(p.pe.bias);
      auto y = diff_agg(TD::zeros({1, 4, 4, 4}), p);
      for (double a : y.data()) CHECK(a == 0.0);
    }
  }

  TEST_CASE("ablation switches recover the raw attention") {
    Rng rng(26);
    auto cfg = small_config(4, 2);
    cfg.positional_encoding = false;
    cfg.post_norm = false;
    auto x = random_tensor({1, 4, 5, 5}, rng);
    AttnBranch<double> local(cfg, Branch::kLocal, rng);
    CHECK(bit_equal(diff_agg(x, local), local_branch(x, local)));
    AttnBranch<double> global(cfg, Branch::kGlobal, rng);
    CHECK(bit_equal(diff_agg(x, global), global_branch(x, global)));
    ParamList<double> params;
    local.collect(params, "b");
    CHECK(params.size() == 6);  // wq.w, wq.b, wk.w, wv.w, wv.b, lambda
  }

  TEST_CASE("parameter inventory") {
    Rng rng(27);
    AttnBranch<double> p(small_config(8, 2), Branch::kLocal, rng);
    ParamList<double> params;
    p.collect(params, "attn");
    // 3 d^2 + 2 d projections, heads lambdas, 10 d PE, 2 d GN
    CHECK(count_scalars(params) == 3 * 64 + 16 + 2 + 80 + 16);
    CHECK(params.front().name == "attn.wq.weight");
    CHECK(params.back().name == "attn.gn.beta");
  }

  TEST_CASE("full gradient check of diff_agg") {
    for (Branch kind : {Branch::kLocal, Branch::kGlobal}) {
      Rng rng(31);
      auto cfg = small_config(4, 1);
      cfg.global_pool = 2;
      AttnBranch<double> p(cfg, kind, rng);
      auto x = random_tensor({1, 4, 4, 4}, rng);
      ParamList<double> params;
      p.collect(params, "b");
      std::vector<NamedInput> inputs{{"x", x}};
      for (auto& np : params) inputs.push_back({np.name, np.tensor});
      auto r = grad_check([&] { return probe(diff_agg(x, p)); }, inputs);
      INFO("worst ", r.worst_input, "[", r.worst_index, "]");
      CHECK(r.max_rel_error < 1e-4);
    }
  }

  TEST_CASE("cost grows linearly with pixel count") {
    for (Branch kind : {Branch::kLocal, Branch::kGlobal}) {
      Rng rng(41);
      AttnBranch<float> p(small_config(4, 1), kind, rng);
      auto run = [&](std::size_t H, std::size_t W) {
        auto x = random_tensor<float>({1, 4, H, W}, rng);
        OpCounters::reset();
        (void)diff_agg(x, p);
        return static_cast<double>(OpCounters::local().attention_macs);
      };
      const double ratio = run(64, 32) / run(32, 32);
      CHECK(ratio >= 1.9);
      CHECK(ratio <= 2.1);
    }
  }
}
