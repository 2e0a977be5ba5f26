#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sama/tensor.hpp"

// Differentiable tensor ops. Every function records its adjoint on the active
// tape when an input requires grad. Broadcasting is limited to a rank-0 (or
// single-element) operand or an operand whose shape is a trailing suffix of
// the other's.

namespace sama {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> neg(const Tensor<T>& a);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);
template <typename T>
Tensor<T> log(const Tensor<T>& a);
template <typename T>
Tensor<T> square(const Tensor<T>& a);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T>
Tensor<T> silu(const Tensor<T>& a);
template <typename T>
Tensor<T> softplus(const Tensor<T>& a);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
/// Sums over every axis except `axis`; result shape is [dim(axis)].
template <typename T>
Tensor<T> sum_keep_axis(const Tensor<T>& a, int axis);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& order);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t start, std::size_t length);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
/// Zero padding of the two trailing (spatial) axes.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& a, std::size_t top, std::size_t bottom, std::size_t left,
                std::size_t right);

/// Output pixel t of the [oh, ow] grid takes input pixel perm[t] (row-major
/// over the input's trailing two axes). `perm` must be a bijection.
template <typename T>
Tensor<T> reindex_spatial(const Tensor<T>& a, std::span<const std::size_t> perm, std::size_t oh,
                          std::size_t ow);

/// [.., m, k] x [.., k, n]; batch dims equal, or either side is rank 2.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// y = x W^T + b over the last axis. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
/// Same contraction applied to the channel axis of an NCHW tensor (a 1x1 conv).
template <typename T>
Tensor<T> linear_channels(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Cross-correlation. weight [out, in/groups, kh, kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dGeometry geom);
/// Adjoint of conv2d in x. weight [in, out/groups, kh, kw]; output extent
/// (H-1)*stride - 2*padding + kh.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           Conv2dGeometry geom);

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t groups, T eps);
/// Normalizes each pixel's channel vector of an NCHW tensor (token LayerNorm).
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              T eps);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  return softmax(x, -1);
}

/// Bins follow floor(i*H/P) .. ceil((i+1)*H/P), so bins overlap when P > H.
template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t oh, std::size_t ow);

/// Mean pixel cross-entropy of NCHW logits against labels [B*H*W].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels);

}  // namespace sama
