#include "sama/loss.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "sama/ops.hpp"

namespace sama {

std::vector<std::uint8_t> downsample_labels(std::span<const std::uint8_t> labels, std::size_t B,
                                            std::size_t H, std::size_t W, std::size_t s) {
  if (labels.size() != B * H * W) throw ShapeError("downsample_labels: buffer size mismatch");
  if (s == 0) throw std::invalid_argument("downsample_labels: stride must be positive");
  if (s == 1) return {labels.begin(), labels.end()};
  const std::size_t h = (H + s - 1) / s, w = (W + s - 1) / s;
  std::vector<std::uint8_t> out(B * h * w);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t y = std::min(i * s + s / 2, H - 1), x = std::min(j * s + s / 2, W - 1);
        out[(b * h + i) * w + j] = labels[(b * H + y) * W + x];
      }
  return out;
}

template <typename T>
Tensor<T> dice_ce_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels,
                       double smooth, bool batch_dice) {
  if (logits.rank() != 4) throw ShapeError("seg loss: logits must be NCHW");
  const std::size_t B = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  const Tensor<T> ce = cross_entropy(logits, labels);  // validates labels
  if (K < 2) return ce;
  std::vector<T> onehot(B * K * HW, T(0));
  // Ground-truth sums per class (pooled) or per sample and class.
  std::vector<T> gsum(batch_dice ? K : B * K, T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < HW; ++p) {
      const std::size_t c = labels[b * HW + p];
      onehot[(b * K + c) * HW + p] = T(1);
      gsum[batch_dice ? c : b * K + c] += T(1);
    }
  const Tensor<T> g = Tensor<T>::from(logits.shape(), std::move(onehot));
  const Tensor<T> prob = softmax(logits, 1);
  Tensor<T> inter = mul(prob, g), psum = prob;
  if (batch_dice) {
    inter = sum_keep_axis(inter, 1);
    psum = sum_keep_axis(psum, 1);
  } else {
    inter = sum_keep_axis(reshape(inter, {B * K, HW}), 0);
    psum = sum_keep_axis(reshape(psum, {B * K, HW}), 0);
  }
  const Tensor<T> num = add_scalar(mul_scalar(inter, T(2)), static_cast<T>(smooth));
  const std::size_t n = gsum.size();
  const Tensor<T> den =
      add(add_scalar(psum, static_cast<T>(smooth)), Tensor<T>::from({n}, std::move(gsum)));
  const Tensor<T> ratio = div(num, den);
  const Tensor<T> dice =
      batch_dice ? slice(ratio, 0, 1, K - 1) : slice(reshape(ratio, {B, K}), 1, 1, K - 1);
  return add(ce, add_scalar(neg(mean(dice)), T(1)));
}

template <typename T>
Tensor<T> seg_loss(const std::vector<Tensor<T>>& heads, std::span<const std::uint8_t> labels,
                   std::size_t H, std::size_t W, const std::vector<std::size_t>& strides,
                   const std::vector<double>& weights, double smooth, bool batch_dice) {
  if (heads.empty() || heads.size() != strides.size() || heads.size() != weights.size())
    throw std::invalid_argument("seg_loss: " + std::to_string(heads.size()) + " heads, " +
                                std::to_string(strides.size()) + " strides, " +
                                std::to_string(weights.size()) + " weights");
  const std::size_t B = heads[0].dim(0);
  Tensor<T> total;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const auto lab = downsample_labels(labels, B, H, W, strides[i]);
    if (lab.size() != B * heads[i].dim(2) * heads[i].dim(3))
      throw ShapeError("seg_loss: head " + std::to_string(i) + " has extents " +
                       shape_str(heads[i].shape()) + " for stride " + std::to_string(strides[i]));
    const Tensor<T> l = mul_scalar(dice_ce_loss(heads[i], lab, smooth, batch_dice), static_cast<T>(weights[i]));
    total = total.defined() ? add(total, l) : l;
  }
  return total;
}

template Tensor<float> dice_ce_loss(const Tensor<float>&, std::span<const std::uint8_t>, double, bool);
template Tensor<double> dice_ce_loss(const Tensor<double>&, std::span<const std::uint8_t>, double, bool);
template Tensor<float> seg_loss(const std::vector<Tensor<float>>&, std::span<const std::uint8_t>,
                                std::size_t, std::size_t, const std::vector<std::size_t>&,
                                const std::vector<double>&, double, bool);
template Tensor<double> seg_loss(const std::vector<Tensor<double>>&, std::span<const std::uint8_t>,
                                 std::size_t, std::size_t, const std::vector<std::size_t>&,
                                 const std::vector<double>&, double, bool);

}  // namespace sama
