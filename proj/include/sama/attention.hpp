#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sama/nn.hpp"
#include "sama/tensor.hpp"

namespace sama {

struct AttnConfig {
  std::size_t channels = 0;  // d, channels of one branch after the split
  std::size_t heads = 4;
  std::size_t local_window = 3;
  std::size_t global_pool = 7;
  double lambda_init = 0.8;
  bool differential = true;
  bool positional_encoding = true;
  /// GroupNorm (one group per head) followed by the (1 - lambda_init) rescale.
  bool post_norm = true;

  std::size_t head_dim() const { return channels / heads; }
  void validate() const;
};

/// Largest head count <= requested that divides `channels` and, for
/// differential attention, leaves an even per-head width.
std::size_t effective_heads(std::size_t channels, std::size_t requested, bool differential);

enum class Branch { kLocal, kGlobal };

/// k x k neighbourhood of every pixel, row-major over offsets; out-of-image
/// entries have valid == 0 and a placeholder index of 0.
struct NeighborhoodMap {
  std::size_t height = 0, width = 0, window = 0;
  std::vector<std::size_t> index;  // [H*W, k*k]
  std::vector<std::uint8_t> valid;

  std::size_t taps() const { return window * window; }
};

NeighborhoodMap build_neighborhood(std::size_t height, std::size_t width, std::size_t window);

/// Differential softmax attention. q [G,n,c], k [G,m,c], v [G,m,cv],
/// lambda [h] with head(g) = g % h.
///   A1 = softmax(q1 k1^T / sqrt(c/2)), A2 = softmax(q2 k2^T / sqrt(c/2))
///   out = (A1 - lambda A2) v
/// `mask` (optional, [n,m], shared over G) excludes keys from both maps.
template <typename T>
Tensor<T> diff_softmax(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                       const Tensor<T>& lambda, std::span<const std::uint8_t> mask = {});

/// Ordinary softmax attention with scale 1/sqrt(c); same layout as diff_softmax.
template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            std::span<const std::uint8_t> mask = {});

/// The combined weights (A1 - lambda A2) as [G,n,m]; masked entries are 0.
template <typename T>
std::vector<T> diff_softmax_weights(const Tensor<T>& q, const Tensor<T>& k,
                                    const Tensor<T>& lambda,
                                    std::span<const std::uint8_t> mask = {});

/// Neighbourhood attention on NCHW maps q, k, v [B,d,H,W]: each pixel attends
/// over its valid window taps, per head. `lambda` undefined selects plain
/// softmax attention.
template <typename T>
Tensor<T> local_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          const Tensor<T>& lambda, std::size_t heads, std::size_t window);

/// Parameters of one DiffAgg branch.
template <typename T>
struct AttnBranch {
  AttnConfig cfg;
  Branch kind = Branch::kLocal;
  Linear<T> wq, wk, wv;
  Tensor<T> lambda;  // [heads], differential only
  Conv2d<T> pe;      // depthwise 3x3 on the value map
  GroupNorm<T> gn;

  AttnBranch() = default;
  AttnBranch(const AttnConfig& cfg, Branch kind, Rng& rng);

  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Raw branch attention (A1 - lambda A2) v, before normalization and PE.
template <typename T>
Tensor<T> local_branch(const Tensor<T>& x, const AttnBranch<T>& p);
template <typename T>
Tensor<T> global_branch(const Tensor<T>& x, const AttnBranch<T>& p);

/// GN(attention) * (1 - lambda_init) + PE(v).
template <typename T>
Tensor<T> diff_agg(const Tensor<T>& x, const AttnBranch<T>& p);

}  // namespace sama
