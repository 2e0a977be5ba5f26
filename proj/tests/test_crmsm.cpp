#include <cmath>

#include "doctest.h"
#include "sama/crmsm.hpp"
#include "sama/gradcheck.hpp"
#include "test_util.hpp"

using namespace sama;
using sama::testing::bit_equal;
using sama::testing::probe;
using sama::testing::random_tensor;

namespace {

using TD = Tensor<double>;

Linear<double> identity_linear(std::size_t c) {
  Linear<double> l;
  l.weight = TD::zeros({c, c});
  for (std::size_t i = 0; i < c; ++i) l.weight.mutable_data()[i * c + i] = 1.0;
  l.bias = TD::zeros({c});
  return l;
}

std::vector<double> token_values(const TD& tokens) {
  return {tokens.data().begin(), tokens.data().end()};
}

// Spatial transpose and 180 degree rotation of a [1,C,H,W] buffer.
std::vector<double> transpose_map(const TD& m) {
  const std::size_t C = m.dim(1), H = m.dim(2), W = m.dim(3);
  std::vector<double> out(m.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out[(c * W + j) * H + i] = m[(c * H + i) * W + j];
  return out;
}

std::vector<double> rotate_map(const TD& m) {
  const std::size_t C = m.dim(1), H = m.dim(2), W = m.dim(3);
  std::vector<double> out(m.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        out[(c * H + (H - 1 - i)) * W + (W - 1 - j)] = m[(c * H + i) * W + j];
  return out;
}

}  // namespace

TEST_SUITE("views") {
  TEST_CASE("two by two enumeration") {
    auto f = TD::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto v = make_views(f);
    REQUIRE(v.tokens.size() == 4);
    CHECK(token_values(v.tokens[0]) == std::vector<double>{1, 2, 3, 4});
    CHECK(token_values(v.tokens[1]) == std::vector<double>{1, 3, 2, 4});
    CHECK(token_values(v.tokens[2]) == std::vector<double>{4, 3, 2, 1});
    CHECK(token_values(v.tokens[3]) == std::vector<double>{4, 2, 3, 1});
  }

  TEST_CASE("mirror mode enumeration") {
    auto f = TD::from({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
    auto v = make_views(f, FlipMode::kMirror);
    CHECK(token_values(v.tokens[2]) == std::vector<double>{3, 2, 1, 6, 5, 4});
    // transposed map is [[1,4],[2,5],[3,6]]; mirrored rows
    CHECK(token_values(v.tokens[3]) == std::vector<double>{4, 1, 5, 2, 6, 3});
  }

  TEST_CASE("one pixel: all views coincide") {
    auto f = TD::from({1, 3, 1, 1}, {7, 8, 9});
    auto v = make_views(f);
    for (const auto& t : v.tokens) {
      CHECK(t.shape() == Shape{1, 1, 3});
      CHECK(bit_equal(t, v.tokens[0]));
    }
  }

  TEST_CASE("tokens carry channels last") {
    Rng rng(1);
    auto f = random_tensor({2, 3, 2, 4}, rng);
    auto v = make_views(f);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t s = 0; s < 8; ++s)
        for (std::size_t c = 0; c < 3; ++c) CHECK(v.tokens[0][(b * 8 + s) * 3 + c] == f[(b * 3 + c) * 8 + s]);
  }

  TEST_CASE("round trip is exact for all extents up to eight") {
    Rng rng(2);
    for (FlipMode flip : {FlipMode::kReverse, FlipMode::kMirror})
      for (std::size_t H = 1; H <= 8; ++H)
        for (std::size_t W = 1; W <= 8; ++W) {
          auto f = random_tensor({2, 3, H, W}, rng);
          auto v = make_views(f, flip);
          for (std::size_t j = 0; j < 4; ++j) {
            auto back = invert_view(v.tokens[j], v.geometry[j], H, W);
            CHECK(bit_equal(back, f));
          }
        }
  }

  TEST_CASE("inverse permutation rejects non-bijections") {
    CHECK(inverse_permutation({2, 0, 1}) == std::vector<std::size_t>{1, 2, 0});
    CHECK_THROWS(inverse_permutation({0, 0, 1}));
    CHECK_THROWS(inverse_permutation({0, 3}));
  }
}

TEST_SUITE("crmsm") {
  TEST_CASE("identity mixer and projection is the identity map") {
    Rng rng(3);
    auto f = random_tensor({2, 4, 5, 3}, rng);
    ViewMixer<double> id = [](const TD& m) { return m; };
    for (FlipMode flip : {FlipMode::kReverse, FlipMode::kMirror}) {
      CrmsmFlags flags;
      flags.flip = flip;
      CHECK(bit_equal(crmsm_scale(f, id, identity_linear(4), flags), f));
      flags.multi_view = false;
      CHECK(bit_equal(crmsm_scale(f, id, identity_linear(4), flags), f));
    }
  }

  TEST_CASE("matches an explicit four-permutation oracle") {
    Rng rng(4);
    CrmsmScale<double> m(2, CrmsmFlags{}, SsmConfig{0, 4, false}, rng);
    auto f = random_tensor({1, 2, 3, 3}, rng);
    auto z = m(f);
    const std::size_t H = 3, W = 3, C = 2, L = 9;
    auto pixel = [&](std::size_t s) {  // row-major pixel s of f as a token
      std::vector<double> t(C);
      for (std::size_t c = 0; c < C; ++c) t[c] = f[c * L + s];
      return t;
    };
    // source pixel for token s of each direction, written out directly
    std::vector<std::vector<std::size_t>> src(4, std::vector<std::size_t>(L));
    for (std::size_t s = 0; s < L; ++s) {
      src[0][s] = s;
      src[1][s] = (s % H) * W + s / H;
      src[2][s] = L - 1 - s;
      const std::size_t r = L - 1 - s;
      src[3][s] = (r % H) * W + r / H;
    }
    std::vector<double> fused(C * L, 0.0);
    for (const auto& order : src) {
      std::vector<double> seq;
      for (std::size_t s = 0; s < L; ++s)
        for (double v : pixel(order[s])) seq.push_back(v);
      auto y = selective_scan(TD::from({1, L, C}, seq), m.ssm);
      for (std::size_t s = 0; s < L; ++s)
        for (std::size_t c = 0; c < C; ++c) fused[c * L + order[s]] += 0.25 * y[s * C + c];
    }
    for (std::size_t o = 0; o < C; ++o)
      for (std::size_t s = 0; s < L; ++s) {
        double want = m.proj.bias[o];
        for (std::size_t c = 0; c < C; ++c) want += m.proj.weight[o * C + c] * fused[c * L + s];
        CHECK(std::abs(z[o * L + s] - want) < 1e-6);
      }
  }

  TEST_CASE("flags preserve shape") {
    Rng rng(5);
    auto f = random_tensor({2, 4, 4, 6}, rng);
    for (int mask = 0; mask < 8; ++mask) {
      CrmsmFlags flags;
      flags.multi_view = mask & 1;
      flags.use_ssm = mask & 2;
      flags.causal_fusion = mask & 4;
      CrmsmScale<double> m(4, flags, SsmConfig{0, 4, false}, rng);
      CHECK(m(f).shape() == f.shape());
      ParamList<double> params;
      m.collect(params, "s");
      CHECK(params.back().name == "s.proj.bias");
    }
  }

  TEST_CASE("single view uses only the original orientation") {
    Rng rng(6);
    CrmsmFlags flags;
    flags.multi_view = false;
    CrmsmScale<double> m(3, flags, SsmConfig{0, 4, false}, rng);
    auto f = random_tensor({1, 3, 4, 5}, rng);
    auto y = selective_scan(map_to_tokens(f), m.ssm);
    auto want = m.proj.channels(tokens_to_map(y, 4, 5));
    CHECK(bit_equal(m(f), want));
  }

  TEST_CASE("convolution fallback applies one shared conv per view") {
    Rng rng(7);
    CrmsmFlags flags;
    flags.use_ssm = false;
    CrmsmScale<double> m(2, flags, SsmConfig{}, rng);
    auto f = random_tensor({1, 2, 3, 4}, rng);
    ViewMixer<double> conv = [&](const TD& v) { return m.conv(v); };
    CHECK(bit_equal(m(f), crmsm_scale(f, conv, m.proj, flags)));
  }

  TEST_CASE("fused map inherits transpose and rotation symmetry") {
    for (bool static_ssm : {true, false}) {
      Rng rng(8);
      CrmsmScale<double> m(2, CrmsmFlags{}, SsmConfig{0, 4, static_ssm}, rng);
      // f(i,j) depends on the unordered pair {|i-2|,|j-2|}: symmetric under
      // transpose and 180 degree rotation of a 5x5 grid.
      auto f = TD::zeros({1, 2, 5, 5});
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 5; ++i)
          for (std::size_t j = 0; j < 5; ++j) {
            const double a = std::abs(static_cast<double>(i) - 2);
            const double b = std::abs(static_cast<double>(j) - 2);
            f.mutable_data()[(c * 5 + i) * 5 + j] = std::cos(a * b + c) + 0.3 * (a + b);
          }
      auto z = m(f);
      auto t = transpose_map(z);
      auto r = rotate_map(z);
      for (std::size_t i = 0; i < z.numel(); ++i) {
        CHECK(std::abs(t[i] - z[i]) < 1e-5);
        CHECK(std::abs(r[i] - z[i]) < 1e-5);
      }
    }
  }

  TEST_CASE("scales are independent") {
    Rng rng(9);
    std::vector<CrmsmScale<double>> scales;
    std::vector<TD> pyr;
    const std::size_t chans[] = {2, 4, 6};
    for (std::size_t i = 0; i < 3; ++i) {
      scales.emplace_back(chans[i], CrmsmFlags{}, SsmConfig{0, 4, false}, rng);
      pyr.push_back(random_tensor({1, chans[i], std::size_t{8} >> i, std::size_t{8} >> i}, rng));
    }
    auto z = crmsm_forward(pyr, scales);
    REQUIRE(z.size() == 3);
    for (std::size_t j = 0; j < 3; ++j) {
      auto pert = pyr;
      pert[j] = random_tensor(pyr[j].shape(), rng);
      auto z2 = crmsm_forward(pert, scales);
      for (std::size_t i = 0; i < 3; ++i) {
        if (i == j) CHECK_FALSE(bit_equal(z[i], z2[i]));
        else CHECK(bit_equal(z[i], z2[i]));
      }
    }
    auto single = crmsm_forward(std::vector<TD>{pyr[0]}, std::vector<CrmsmScale<double>>{scales[0]});
    REQUIRE(single.size() == 1);
    CHECK(bit_equal(single[0], scales[0](pyr[0])));
    CHECK_THROWS(crmsm_forward(std::vector<TD>{}, std::vector<CrmsmScale<double>>{}));
    CHECK_THROWS(crmsm_forward(pyr, std::vector<CrmsmScale<double>>{scales[0]}));
  }

  TEST_CASE("gradient check through views and scan") {
    for (bool causal : {true, false}) {
      Rng rng(10);
      CrmsmFlags flags;
      flags.causal_fusion = causal;
      CrmsmScale<double> m(2, flags, SsmConfig{0, 2, false}, rng);
      for (auto& v : m.ssm.proj_delta.bias.mutable_data()) v = rng.uniform(-1, 0.5);
      auto f = random_tensor({1, 2, 3, 2}, rng);
      ParamList<double> params;
      m.collect(params, "c");
      std::vector<NamedInput> in{{"f", f}};
      for (auto& p : params) in.push_back({p.name, p.tensor});
      auto r = grad_check([&] { return probe(m(f)); }, in);
      INFO(r.worst_input, "[", r.worst_index, "]");
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}
