#include "sama/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sama {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double scalar_of(const Tensor<double>& y) {
  if (y.numel() != 1) {
    throw AutogradError("grad_check: function output must be scalar, got shape " +
                        shape_str(y.shape()));
  }
  return y.item();
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<NamedInput> inputs, double h, Stencil stencil) {
  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    const Tensor<double> y = f();
    scalar_of(y);
    tape.backward(y);
    for (const auto& in : inputs) {
      if (in.tensor.has_grad()) {
        analytic.emplace_back(in.tensor.grad().begin(), in.tensor.grad().end());
      } else {
        analytic.emplace_back(in.tensor.numel(), 0.0);
      }
    }
  }
  GradCheckResult result;
  NoGradGuard<double> no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].tensor.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      auto at = [&](double dx) {
        data[i] = saved + dx;
        return scalar_of(f());
      };
      const double d1 = at(h) - at(-h);
      double numeric = d1 / (2.0 * h);
      if (stencil == Stencil::kCentral4) numeric = (8.0 * d1 - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      data[i] = saved;
      const double err = relative_error(analytic[k][i], numeric);
      ++result.elements;
      if (err > result.max_rel_error || result.worst_input.empty()) {
        result.max_rel_error = std::max(err, result.max_rel_error);
        result.worst_input = inputs[k].name;
        result.worst_index = i;
        result.worst_analytic = analytic[k][i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  Tensor<double> x, double h) {
  return grad_check([&] { return f(x); }, {{"x", x}}, h).max_rel_error;
}

}  // namespace sama
