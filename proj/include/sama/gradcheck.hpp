#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sama/tensor.hpp"

namespace sama {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t elements = 0;
};

struct NamedInput {
  std::string name;
  Tensor<double> tensor;
};

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

/// Second order: (f(x+h) - f(x-h)) / 2h. Fourth order adds the 2h pair and
/// tolerates larger h, which keeps rounding noise in an O(1) loss from
/// swamping tiny gradients deep inside a network.
enum class Stencil { kCentral2, kCentral4 };

/// Compares reverse-mode gradients of the scalar f() against finite
/// differences with step h, perturbing every element of every input in place.
/// Inputs are marked requires_grad; their grad buffers are overwritten.
GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<NamedInput> inputs, double h = 1e-5,
                           Stencil stencil = Stencil::kCentral2);

/// Single-input form: f(x) must return a scalar.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  Tensor<double> x, double h = 1e-5);

}  // namespace sama
