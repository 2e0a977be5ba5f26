#include "sama/block.hpp"

#include <stdexcept>

#include "sama/ops.hpp"

namespace sama {

void BlockConfig::validate() const {
  if (channels == 0) throw std::invalid_argument("block: channels must be positive");
  if (expansion == 0 || ffn_ratio == 0)
    throw std::invalid_argument("block: expansion and ffn ratio must be positive");
  if ((use_mamba_macro ? expansion * channels : channels) % 2 != 0)
    throw std::invalid_argument("block: split width must be even");
}

AttnConfig BlockConfig::branch_config() const {
  AttnConfig a = attn;
  a.channels = branch_channels();
  a.differential = use_differential;
  a.heads = effective_heads(a.channels, attn.heads, use_differential);
  return a;
}

template <typename T>
SamaBlock<T>::SamaBlock(const BlockConfig& c, Rng& rng) : cfg(c) {
  cfg.validate();
  const std::size_t C = cfg.channels;
  const std::size_t wide = 2 * cfg.branch_channels();
  norm1 = LayerNorm2d<T>(C);
  norm2 = LayerNorm2d<T>(C);
  if (cfg.use_mamba_macro) {
    in_proj = Linear<T>(C, wide, true, rng);
    dw = Conv2d<T>::depthwise(wide, 3, 1, true, rng);
    res_proj = Linear<T>(C, wide, true, rng);
  }
  const AttnConfig a = cfg.branch_config();
  local = AttnBranch<T>(a, Branch::kLocal, rng);
  global = AttnBranch<T>(a, Branch::kGlobal, rng);
  out_proj = Linear<T>(wide, C, true, rng);
  ffn1 = Linear<T>(C, cfg.ffn_ratio * C, true, rng);
  ffn2 = Linear<T>(cfg.ffn_ratio * C, C, true, rng);
}

template <typename T>
Tensor<T> SamaBlock<T>::mixer(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != cfg.channels)
    throw ShapeError("sama block: expected [B," + std::to_string(cfg.channels) + ",H,W], got " +
                     shape_str(x.shape()));
  const std::size_t d = cfg.branch_channels();
  const Tensor<T> X = cfg.use_mamba_macro ? silu(dw(in_proj.channels(x))) : x;
  Tensor<T> agg = concat<T>({diff_agg(slice(X, 1, 0, d), local), diff_agg(slice(X, 1, d, d), global)}, 1);
  if (cfg.use_mamba_macro) agg = mul(agg, silu(res_proj.channels(x)));
  return out_proj.channels(agg);
}

template <typename T>
Tensor<T> SamaBlock<T>::operator()(const Tensor<T>& x) const {
  const Tensor<T> y = add(x, mixer(norm1(x)));
  return add(y, ffn2.channels(silu(ffn1.channels(norm2(y)))));
}

template <typename T>
void SamaBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  if (cfg.use_mamba_macro) {
    in_proj.collect(out, prefix + ".in_proj");
    dw.collect(out, prefix + ".dw");
    res_proj.collect(out, prefix + ".res_proj");
  }
  local.collect(out, prefix + ".local");
  global.collect(out, prefix + ".global");
  out_proj.collect(out, prefix + ".out_proj");
  norm2.collect(out, prefix + ".norm2");
  ffn1.collect(out, prefix + ".ffn1");
  ffn2.collect(out, prefix + ".ffn2");
}

template struct SamaBlock<float>;
template struct SamaBlock<double>;

}  // namespace sama
