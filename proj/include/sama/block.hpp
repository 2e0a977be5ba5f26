#pragma once

#include <string>

#include "sama/attention.hpp"
#include "sama/nn.hpp"

namespace sama {

struct BlockConfig {
  std::size_t channels = 0;
  std::size_t expansion = 2;
  std::size_t ffn_ratio = 4;
  /// Template for both branches; channels and heads are resolved per block.
  AttnConfig attn;
  bool use_mamba_macro = true;
  bool use_differential = true;

  /// Channels of each attention branch after the split.
  std::size_t branch_channels() const {
    return (use_mamba_macro ? expansion * channels : channels) / 2;
  }
  AttnConfig branch_config() const;
  void validate() const;
};

/// Pre-norm encoder block:
///   Y = I + mixer(LN(I)),  Z = Y + FFN(LN(Y))
/// with the mixer
///   X = SiLU(DWConv(Linear(I))),  (X_l, X_g) = split(X),  X_res = SiLU(Linear(I))
///   O = Linear(concat(DiffAgg_local(X_l), DiffAgg_global(X_g)) * X_res)
/// Without the Mamba-like macro the mixer splits I directly and drops the
/// conv pre-stage and the gate.
template <typename T>
struct SamaBlock {
  BlockConfig cfg;
  LayerNorm2d<T> norm1, norm2;
  Linear<T> in_proj, res_proj;
  Conv2d<T> dw;
  AttnBranch<T> local, global;
  Linear<T> out_proj;
  Linear<T> ffn1, ffn2;

  SamaBlock() = default;
  SamaBlock(const BlockConfig& cfg, Rng& rng);

  Tensor<T> mixer(const Tensor<T>& x) const;
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

}  // namespace sama
