#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sama/tensor.hpp"

namespace sama {

/// Nearest-centre subsampling of labels [B,H,W] to [B,ceil(H/s),ceil(W/s)]:
/// coarse pixel (i,j) takes the label at (min(i*s + s/2, H-1), min(j*s + s/2, W-1)).
std::vector<std::uint8_t> downsample_labels(std::span<const std::uint8_t> labels, std::size_t batch,
                                            std::size_t height, std::size_t width,
                                            std::size_t stride);

/// Mean pixel cross-entropy plus soft Dice loss over the foreground classes:
///   dice_bc = (2 sum p_bc g_bc + smooth) / (sum p_bc + sum g_bc + smooth)
///   loss = CE + 1 - mean_{b, c>=1} dice_bc
/// With batch_dice the sums run over the whole batch instead of per sample.
template <typename T>
Tensor<T> dice_ce_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels,
                       double smooth = 1.0, bool batch_dice = false);

/// Weighted sum of dice_ce_loss over heads (finest first) against labels
/// [B,H,W] downsampled to each head's stride.
template <typename T>
Tensor<T> seg_loss(const std::vector<Tensor<T>>& heads, std::span<const std::uint8_t> labels,
                   std::size_t height, std::size_t width, const std::vector<std::size_t>& strides,
                   const std::vector<double>& weights, double smooth = 1.0,
                   bool batch_dice = false);

}  // namespace sama
