#pragma once

#include <string>

#include "sama/nn.hpp"
#include "sama/tensor.hpp"

namespace sama {

struct SsmConfig {
  std::size_t channels = 0;
  std::size_t state = 8;
  /// Delta, B and C from learned constants instead of input projections.
  bool static_params = false;
};

/// Diagonal selective state space with A = -exp(a_log).
///   delta_t = softplus(proj_delta(x_t))        [C]
///   B_t = proj_b(x_t), C_t = proj_c(x_t)       [N]
/// Static mode keeps only the projection biases.
template <typename T>
struct SsmParams {
  SsmConfig cfg;
  Tensor<T> a_log;  // [C, N]
  Tensor<T> d;      // [C]
  Linear<T> proj_delta, proj_b, proj_c;

  SsmParams() = default;
  SsmParams(const SsmConfig& cfg, Rng& rng);

  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// The recurrence itself, given already-computed per-step quantities:
///   x, delta [B,L,C]; b, c [B,L,N]; a_log [C,N]; d [C]
///   h_t = exp(delta_t A) h_{t-1} + delta_t b_t x_t,  y_t = <c_t, h_t> + d x_t
template <typename T>
Tensor<T> scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& b, const Tensor<T>& c,
               const Tensor<T>& a_log, const Tensor<T>& d);

/// x [B,L,C] -> [B,L,C], scanning left to right from h_0 = 0.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const SsmParams<T>& p);

}  // namespace sama
