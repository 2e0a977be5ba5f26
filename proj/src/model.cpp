#include "sama/model.hpp"

#include <stdexcept>

#include "sama/ops.hpp"

namespace sama {

std::vector<std::size_t> ModelConfig::head_strides() const {
  std::vector<std::size_t> out{1};
  if (deep_supervision)
    for (std::size_t s = 0; s + 1 < stages(); ++s) out.push_back(std::size_t{4} << s);
  return out;
}

std::vector<double> ModelConfig::ds_weights() const {
  const std::size_t n = head_strides().size();
  std::vector<double> w(n);
  double total = 0.0, v = 1.0;
  for (std::size_t i = 0; i < n; ++i, v *= 0.5) total += (w[i] = v);
  for (double& x : w) x /= total;
  return w;
}

BlockConfig ModelConfig::block_config(std::size_t stage) const {
  BlockConfig b;
  b.channels = stage_channels(stage);
  b.expansion = expansion;
  b.ffn_ratio = ffn_ratio;
  b.attn = attn;
  b.use_mamba_macro = use_mamba_macro;
  b.use_differential = use_differential;
  return b;
}

void ModelConfig::validate() const {
  if (in_channels == 0) throw std::invalid_argument("model: in_channels must be positive");
  if (num_classes < 2) throw std::invalid_argument("model: need at least two classes");
  if (num_classes > 256) throw std::invalid_argument("model: labels are 8-bit, at most 256 classes");
  if (base_channels < 2 || base_channels % 2 != 0)
    throw std::invalid_argument("model: base_channels must be even and >= 2");
  if (stage_depths.empty()) throw std::invalid_argument("model: need at least one stage");
  if (channel_multipliers.size() != stage_depths.size())
    throw std::invalid_argument("model: " + std::to_string(channel_multipliers.size()) +
                                " channel multipliers for " + std::to_string(stage_depths.size()) +
                                " stages");
  for (std::size_t s = 0; s < stages(); ++s) {
    if (stage_depths[s] == 0) throw std::invalid_argument("model: stage depth must be positive");
    if (channel_multipliers[s] == 0)
      throw std::invalid_argument("model: channel multiplier must be positive");
    block_config(s).validate();
    (void)block_config(s).branch_config();  // throws if no head count fits
  }
  AttnConfig probe = attn;
  probe.channels = 2;
  probe.heads = 1;
  probe.differential = false;
  probe.validate();
  if (ssm_state == 0) throw std::invalid_argument("model: ssm_state must be positive");
}

// ---------------------------------------------------------------------------

template <typename T>
ResBlock<T>::ResBlock(std::size_t in, std::size_t out, Rng& rng)
    : conv1(in, out, 3, {1, 1, 1}, false, rng),
      conv2(out, out, 3, {1, 1, 1}, false, rng),
      gn1(out, default_groups(out)),
      gn2(out, default_groups(out)) {
  if (in != out) skip = Conv2d<T>(in, out, 1, {1, 0, 1}, false, rng);
}

template <typename T>
Tensor<T> ResBlock<T>::operator()(const Tensor<T>& x) const {
  const Tensor<T> h = gn2(conv2(silu(gn1(conv1(x)))));
  return silu(add(h, skip.weight.defined() ? skip(x) : x));
}

template <typename T>
void ResBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".conv1");
  gn1.collect(out, prefix + ".gn1");
  conv2.collect(out, prefix + ".conv2");
  gn2.collect(out, prefix + ".gn2");
  if (skip.weight.defined()) skip.collect(out, prefix + ".skip");
}

template <typename T>
PatchEmbed<T>::PatchEmbed(std::size_t in, std::size_t out, Rng& rng)
    : conv1(in, out / 2, 3, {2, 1, 1}, true, rng), conv2(out / 2, out, 3, {2, 1, 1}, true, rng) {}

template <typename T>
Tensor<T> PatchEmbed<T>::operator()(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(2) < 8 || x.dim(3) < 8)
    throw ShapeError("patch_embed: need [B,C,H,W] with H, W >= 8, got " + shape_str(x.shape()));
  return conv2(silu(conv1(x)));
}

template <typename T>
void PatchEmbed<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".conv1");
  conv2.collect(out, prefix + ".conv2");
}

// ---------------------------------------------------------------------------

template <typename T>
SamaUNet<T>::SamaUNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t S = cfg_.stages();
  const std::size_t C0 = cfg_.base_channels;
  embed = PatchEmbed<T>(cfg_.in_channels, C0, rng);
  encoder.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t C = cfg_.stage_channels(s);
    if (s > 0) {
      const std::size_t P = cfg_.stage_channels(s - 1);
      encoder[s].down_dw = Conv2d<T>::depthwise(P, 3, 2, true, rng);
      encoder[s].down_pw = Conv2d<T>(P, C, 1, {1, 0, 1}, true, rng);
    }
    for (std::size_t b = 0; b < cfg_.stage_depths[s]; ++b)
      encoder[s].blocks.emplace_back(cfg_.block_config(s), rng);
  }
  if (cfg_.use_crmsm) {
    const std::size_t n = cfg_.crmsm_on_bottleneck ? S : S - 1;
    SsmConfig sc;
    sc.state = cfg_.ssm_state;
    sc.static_params = cfg_.ssm_static;
    for (std::size_t s = 0; s < n; ++s)
      skips.emplace_back(cfg_.stage_channels(s), cfg_.crmsm, sc, rng);
  }
  decoder.resize(S > 0 ? S - 1 : 0);
  for (std::size_t s = S - 1; s-- > 0;) {
    const std::size_t C = cfg_.stage_channels(s);
    decoder[s].up = ConvTranspose2d<T>(cfg_.stage_channels(s + 1), C, 2, 2, true, rng);
    decoder[s].res = ResBlock<T>(2 * C, C, rng);
    if (cfg_.deep_supervision)
      decoder[s].head = Conv2d<T>(C, cfg_.num_classes, 1, {1, 0, 1}, true, rng);
  }
  const std::size_t half = C0 / 2;
  final_up = ConvTranspose2d<T>(C0, half, 4, 4, true, rng);
  final_res = ResBlock<T>(half + cfg_.in_channels, half, rng);
  final_head = Conv2d<T>(half, cfg_.num_classes, 1, {1, 0, 1}, true, rng);
}

template <typename T>
std::vector<Tensor<T>> SamaUNet<T>::encode(const Tensor<T>& padded) const {
  std::vector<Tensor<T>> feats;
  Tensor<T> x = embed(padded);
  for (std::size_t s = 0; s < encoder.size(); ++s) {
    if (s > 0) x = encoder[s].down_pw(encoder[s].down_dw(x));
    for (const auto& b : encoder[s].blocks) x = b(x);
    feats.push_back(x);
  }
  return feats;
}

namespace {

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t h, std::size_t w) {
  if (x.dim(2) == h && x.dim(3) == w) return x;
  return slice(slice(x, 2, 0, h), 3, 0, w);
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> SamaUNet<T>::forward(const Tensor<T>& image) const {
  if (image.rank() != 4 || image.dim(1) != cfg_.in_channels)
    throw ShapeError("model: expected [B," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                     shape_str(image.shape()));
  const std::size_t H = image.dim(2), W = image.dim(3);
  const std::size_t f = cfg_.total_stride();
  const std::size_t PH = (H + f - 1) / f * f, PW = (W + f - 1) / f * f;
  const Tensor<T> x = (PH == H && PW == W) ? image : pad2d(image, 0, PH - H, 0, PW - W);

  auto feats = encode(x);
  for (std::size_t s = 0; s < skips.size(); ++s) feats[s] = skips[s](feats[s]);

  Tensor<T> y = feats.back();
  std::vector<Tensor<T>> heads(decoder.size());
  for (std::size_t s = decoder.size(); s-- > 0;) {
    y = decoder[s].res(concat<T>({decoder[s].up(y), feats[s]}, 1));
    if (cfg_.deep_supervision) {
      const std::size_t stride = std::size_t{4} << s;
      heads[s] = crop(decoder[s].head(y), (H + stride - 1) / stride, (W + stride - 1) / stride);
    }
  }
  y = final_res(concat<T>({final_up(y), x}, 1));
  std::vector<Tensor<T>> out{crop(final_head(y), H, W)};
  if (cfg_.deep_supervision)
    for (auto& h : heads) out.push_back(h);
  return out;
}

template <typename T>
ParamList<T> SamaUNet<T>::parameters() const {
  ParamList<T> out;
  embed.collect(out, "embed");
  for (std::size_t s = 0; s < encoder.size(); ++s) {
    const std::string p = "enc" + std::to_string(s);
    if (encoder[s].down_dw.weight.defined()) {
      encoder[s].down_dw.collect(out, p + ".down_dw");
      encoder[s].down_pw.collect(out, p + ".down_pw");
    }
    for (std::size_t b = 0; b < encoder[s].blocks.size(); ++b)
      encoder[s].blocks[b].collect(out, p + ".block" + std::to_string(b));
  }
  for (std::size_t s = 0; s < skips.size(); ++s) skips[s].collect(out, "skip" + std::to_string(s));
  for (std::size_t s = decoder.size(); s-- > 0;) {
    const std::string p = "dec" + std::to_string(s);
    decoder[s].up.collect(out, p + ".up");
    decoder[s].res.collect(out, p + ".res");
    if (decoder[s].head.weight.defined()) decoder[s].head.collect(out, p + ".head");
  }
  final_up.collect(out, "final.up");
  final_res.collect(out, "final.res");
  final_head.collect(out, "final.head");
  return out;
}

template struct ResBlock<float>;
template struct ResBlock<double>;
template struct PatchEmbed<float>;
template struct PatchEmbed<double>;
template class SamaUNet<float>;
template class SamaUNet<double>;

}  // namespace sama
