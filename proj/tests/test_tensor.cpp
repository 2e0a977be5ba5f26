#include <cmath>

#include "doctest.h"
#include "sama/gradcheck.hpp"
#include "sama/io.hpp"
#include "sama/ops.hpp"
#include "test_util.hpp"

using namespace sama;
using sama::testing::integer_tensor;
using sama::testing::probe;
using sama::testing::random_tensor;

namespace {

using TD = Tensor<double>;

TD vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return TD::from({n}, std::move(v));
}

// Straight triple loop; reference for matmul.
std::vector<double> naive_matmul(const TD& a, const TD& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

}  // namespace

TEST_SUITE("elementwise") {
  TEST_CASE("add of two vectors") {
    auto y = add(vec({1, 2}), vec({3, 4}));
    CHECK(y[0] == 4);
    CHECK(y[1] == 6);
  }

  TEST_CASE("multiplying by zero annihilates value and gradient") {
    auto x = vec({1.5, -2.0, 3.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto y = mul(x, TD::scalar(0.0));
    for (double v : y.data()) CHECK(v == 0.0);
    tape.backward(sum(y));
    for (double g : x.grad()) CHECK(g == 0.0);
  }

  TEST_CASE("silu values") {
    auto y = silu(vec({0.0, 1.0}));
    CHECK(y[0] == 0.0);
    // 1 * sigmoid(1) = 1 / (1 + e^-1)
    CHECK(y[1] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  }

  TEST_CASE("shape mismatch names both shapes") {
    try {
      add(TD::zeros({2, 3}), TD::zeros({4}));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2,3]") != std::string::npos);
      CHECK(msg.find("[4]") != std::string::npos);
    }
  }

  TEST_CASE("trailing-axis broadcast") {
    auto a = TD::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto y = add(a, vec({10, 20, 30}));
    CHECK(y[4] == 25);
  }
}

TEST_SUITE("matmul") {
  TEST_CASE("identity") {
    auto eye = TD::from({2, 2}, {1, 0, 0, 1});
    auto y = matmul(eye, eye);
    CHECK(testing::bit_equal(y, eye));
  }

  TEST_CASE("small product") {
    auto y = matmul(TD::from({2, 2}, {1, 2, 3, 4}), TD::from({2, 1}, {1, 1}));
    CHECK(y.shape() == Shape{2, 1});
    CHECK(y[0] == 3);
    CHECK(y[1] == 7);
  }

  TEST_CASE("random integer matrices match the triple loop exactly") {
    Rng rng(3);
    for (int rep = 0; rep < 10; ++rep) {
      auto a = integer_tensor({3, 4}, rng);
      auto b = integer_tensor({4, 2}, rng);
      auto y = matmul(a, b);
      const auto ref = naive_matmul(a, b);
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == ref[i]);
    }
  }

  TEST_CASE("inner dimension mismatch") {
    CHECK_THROWS_AS(matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), ShapeError);
  }

  TEST_CASE("batched with shared right operand") {
    Rng rng(4);
    auto a = integer_tensor({2, 3, 4}, rng);
    auto b = integer_tensor({4, 5}, rng);
    auto y = matmul(a, b);
    CHECK(y.shape() == Shape{2, 3, 5});
    auto a1 = slice(a, 0, 1, 1);
    const auto ref = naive_matmul(reshape(a1, {3, 4}), b);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[15 + i] == ref[i]);
  }

  TEST_CASE("adjoints dA = G B^T and dB = A^T G") {
    Rng rng(5);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto r = grad_check([&] { return probe(matmul(a, b)); }, {{"a", a}, {"b", b}});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum of squares") {
    auto x = vec({1, 2, 3});
    x.set_requires_grad(true);
    Tape<double> tape;
    tape.backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 2);
    CHECK(x.grad()[1] == 4);
    CHECK(x.grad()[2] == 6);
  }

  TEST_CASE("gradient of a linear function does not depend on the point") {
    auto b = vec({0.5, -1.0, 2.0});
    std::vector<double> first;
    for (double scale : {1.0, -7.0}) {
      auto a = vec({scale, 2 * scale, 3 * scale});
      a.set_requires_grad(true);
      Tape<double> tape;
      tape.backward(sum(mul(a, b)));
      std::vector<double> g(a.grad().begin(), a.grad().end());
      if (first.empty()) first = g;
      CHECK(g == first);
    }
  }

  TEST_CASE("reused value accumulates every contribution") {
    auto x = vec({2.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    // y = x + x + x*x -> dy/dx = 2 + 2x = 6
    auto y = add(add(x, x), mul(x, x));
    tape.backward(sum(y));
    CHECK(x.grad()[0] == 6.0);
  }

  TEST_CASE("composite silu(linear(x)) matches central differences") {
    Rng rng(11);
    auto x = random_tensor({3, 5}, rng);
    auto w = random_tensor({4, 5}, rng);
    auto b = random_tensor({4}, rng);
    auto r = grad_check([&] { return probe(silu(linear(x, w, b))); },
                        {{"x", x}, {"w", w}, {"b", b}});
    CHECK(r.max_rel_error < 1e-6);
  }

  TEST_CASE("second backward on the same tape is rejected") {
    auto x = vec({1.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto y = sum(mul(x, x));
    tape.backward(y);
    CHECK_THROWS_AS(tape.backward(y), AutogradError);
  }

  TEST_CASE("detached tensors cannot seed backward") {
    auto x = vec({1.0, 2.0});
    CHECK_THROWS_AS(backward(sum(x)), AutogradError);
    auto leaf = vec({1.0});
    leaf.set_requires_grad(true);
    Tape<double> tape;
    CHECK_THROWS_AS(backward(leaf), AutogradError);
  }

  TEST_CASE("non-scalar root needs a seed") {
    auto x = vec({1.0, 2.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), AutogradError);
    const std::vector<double> seed{1.0, 1.0};
    Tape<double> other;
    auto z = mul(x, x);
    other.backward(z, seed);
    CHECK(x.grad()[1] == 4.0);
  }

  TEST_CASE("no recording without an active tape") {
    auto x = vec({1.0});
    x.set_requires_grad(true);
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_SUITE("grad_check") {
  TEST_CASE("sum has all-ones gradient") {
    Rng rng(1);
    auto x = random_tensor({6}, rng);
    CHECK(grad_check([](const TD& t) { return sum(t); }, x) < 1e-9);
  }

  TEST_CASE("sum of squares") {
    Rng rng(2);
    auto x = random_tensor({10}, rng);
    CHECK(grad_check([](const TD& t) { return sum(square(t)); }, x) < 1e-7);
  }

  TEST_CASE("non-scalar output is an error") {
    auto x = vec({1.0, 2.0});
    CHECK_THROWS_AS(grad_check([](const TD& t) { return mul(t, t); }, x), AutogradError);
  }

  TEST_CASE("every elementwise and structural op at 64-bit") {
    Rng rng(21);
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto pos = random_tensor({2, 3, 4}, rng, 0.5, 2.0);
    const std::size_t perm[] = {5, 0, 3, 1, 2, 4, 11, 6, 9, 7, 8, 10};
    struct Case {
      const char* name;
      std::function<TD()> f;
      double tol;
    };
    const std::vector<Case> cases = {
        {"add", [&] { return probe(add(a, b)); }, 1e-6},
        {"sub", [&] { return probe(sub(a, b)); }, 1e-6},
        {"mul", [&] { return probe(mul(a, b)); }, 1e-6},
        {"div", [&] { return probe(div(a, pos)); }, 1e-6},
        {"scalars", [&] { return probe(add_scalar(mul_scalar(neg(a), 3.0), 1.0)); }, 1e-6},
        {"exp", [&] { return probe(exp(a)); }, 1e-4},
        {"log", [&] { return probe(log(pos)); }, 1e-6},
        {"sigmoid", [&] { return probe(sigmoid(a)); }, 1e-4},
        {"silu", [&] { return probe(silu(a)); }, 1e-4},
        {"softplus", [&] { return probe(softplus(a)); }, 1e-4},
        {"mean", [&] { return mean(square(a)); }, 1e-6},
        {"sum_keep_axis", [&] { return probe(sum_keep_axis(a, 1)); }, 1e-6},
        {"permute", [&] { return probe(permute(a, {2, 0, 1})); }, 1e-6},
        {"slice", [&] { return probe(slice(a, 2, 1, 2)); }, 1e-6},
        {"concat", [&] { return probe(concat<double>({a, pos}, 1)); }, 1e-6},
        {"pad2d", [&] { return probe(pad2d(a, 1, 0, 2, 1)); }, 1e-6},
        {"reindex", [&] { return probe(reindex_spatial(a, perm, 4, 3)); }, 1e-6},
        {"softmax", [&] { return probe(softmax(a, 1)); }, 1e-4},
    };
    for (const auto& c : cases) {
      CAPTURE(c.name);
      auto r = grad_check(c.f, {{"a", a}, {"b", b}, {"pos", pos}});
      CHECK(r.max_rel_error < c.tol);
    }
  }
}

TEST_SUITE("stn1") {
  TEST_CASE("header layout is bit-exact") {
    auto t = Tensor<float>::from({2, 1}, {1.0f, -2.0f});
    const auto bytes = encode_stn(to_stn(t));
    REQUIRE(bytes.size() == 4 + 1 + 1 + 2 * 8 + 2 * 4);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "STN1");
    CHECK(bytes[4] == 0);
    CHECK(bytes[5] == 2);
    CHECK(bytes[6] == 2);
    for (int i = 7; i < 14; ++i) CHECK(bytes[i] == 0);
    CHECK(bytes[14] == 1);
    // 1.0f little-endian = 00 00 80 3f
    CHECK(bytes[22] == 0x00);
    CHECK(bytes[24] == 0x80);
    CHECK(bytes[25] == 0x3f);
  }

  TEST_CASE("round trip preserves every dtype") {
    Rng rng(8);
    for (int rep = 0; rep < 5; ++rep) {
      const Shape shape{1 + rng.index(3), 1 + rng.index(4), 1 + rng.index(2)};
      auto f = random_tensor<float>(shape, rng);
      auto d = random_tensor<double>(shape, rng);
      std::vector<std::uint8_t> u8(numel(shape));
      std::vector<std::uint16_t> u16(numel(shape));
      for (std::size_t i = 0; i < u8.size(); ++i) {
        u8[i] = static_cast<std::uint8_t>(rng.index(256));
        u16[i] = static_cast<std::uint16_t>(rng.index(65536));
      }
      CHECK(testing::bit_equal(tensor_from_stn<float>(decode_stn(encode_stn(to_stn(f)))), f));
      CHECK(testing::bit_equal(tensor_from_stn<double>(decode_stn(encode_stn(to_stn(d)))), d));
      auto a8 = decode_stn(encode_stn(to_stn_u8(shape, u8)));
      CHECK(a8.dtype == DType::kU8);
      CHECK(a8.values<std::uint8_t>() == u8);
      auto a16 = decode_stn(encode_stn(to_stn_u16(shape, u16)));
      CHECK(a16.values<std::uint16_t>() == u16);
    }
  }

  TEST_CASE("corrupt inputs are rejected") {
    std::vector<std::uint8_t> junk{'S', 'T', 'N', '2', 0, 0};
    CHECK_THROWS_AS(decode_stn(junk), StnError);
    auto ok = encode_stn(to_stn(Tensor<double>::zeros({3})));
    ok.pop_back();
    CHECK_THROWS_AS(decode_stn(ok), StnError);
    ok = encode_stn(to_stn(Tensor<double>::zeros({3})));
    ok[4] = 9;
    CHECK_THROWS_AS(decode_stn(ok), StnError);
  }
}
