#pragma once

#include <string>
#include <vector>

#include "sama/attention.hpp"
#include "sama/block.hpp"
#include "sama/crmsm.hpp"
#include "sama/nn.hpp"
#include "sama/ssm.hpp"

namespace sama {

struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t num_classes = 3;
  std::size_t base_channels = 16;
  std::vector<std::size_t> stage_depths{2, 2, 2, 2};
  std::vector<std::size_t> channel_multipliers{1, 2, 4, 8};
  std::size_t expansion = 2;
  std::size_t ffn_ratio = 4;
  AttnConfig attn;  // heads, window, pool and lambda_init; channels set per stage
  std::size_t ssm_state = 8;
  bool ssm_static = false;
  bool use_mamba_macro = true;
  bool use_differential = true;
  bool use_crmsm = true;
  bool crmsm_on_bottleneck = true;
  CrmsmFlags crmsm;
  bool deep_supervision = true;

  std::size_t stages() const { return stage_depths.size(); }
  std::size_t stage_channels(std::size_t s) const {
    return base_channels * channel_multipliers.at(s);
  }
  /// Patch embedding (x4) times one x2 per later stage.
  std::size_t total_stride() const { return std::size_t{4} << (stages() - 1); }
  /// Downsampling factor of each output head, finest first.
  std::vector<std::size_t> head_strides() const;
  /// Halving per coarser head, normalized to sum to one.
  std::vector<double> ds_weights() const;
  BlockConfig block_config(std::size_t stage) const;
  void validate() const;
};

/// conv3x3 -> GN -> SiLU -> conv3x3 -> GN, plus a 1x1 projection of the
/// input when widths differ, then SiLU of the sum.
template <typename T>
struct ResBlock {
  Conv2d<T> conv1, conv2, skip;
  GroupNorm<T> gn1, gn2;

  ResBlock() = default;
  ResBlock(std::size_t in, std::size_t out, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct PatchEmbed {
  Conv2d<T> conv1, conv2;

  PatchEmbed() = default;
  PatchEmbed(std::size_t in, std::size_t out, Rng& rng);

  /// [B,in,H,W] -> [B,out,ceil(H/4),ceil(W/4)]; H, W >= 8.
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct EncoderStage {
  Conv2d<T> down_dw, down_pw;  // absent for the first stage
  std::vector<SamaBlock<T>> blocks;
};

template <typename T>
struct DecoderStage {
  ConvTranspose2d<T> up;
  ResBlock<T> res;
  Conv2d<T> head;  // deep supervision only
};

template <typename T>
class SamaUNet {
 public:
  SamaUNet(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Logits per head, finest first; the first has the input's extents. Inputs
  /// not divisible by the total stride are zero padded and cropped back.
  std::vector<Tensor<T>> forward(const Tensor<T>& image) const;

  /// Encoder feature maps, fine to coarse, for a padded input.
  std::vector<Tensor<T>> encode(const Tensor<T>& padded) const;

  ParamList<T> parameters() const;

  PatchEmbed<T> embed;
  std::vector<EncoderStage<T>> encoder;
  std::vector<CrmsmScale<T>> skips;  // one per stage that uses CR-MSM
  std::vector<DecoderStage<T>> decoder;  // decoder[s] produces stage s resolution
  ConvTranspose2d<T> final_up;
  ResBlock<T> final_res;
  Conv2d<T> final_head;

 private:
  ModelConfig cfg_;
};

}  // namespace sama
