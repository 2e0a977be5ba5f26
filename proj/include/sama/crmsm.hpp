#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sama/nn.hpp"
#include "sama/ssm.hpp"
#include "sama/tensor.hpp"

namespace sama {

/// How the third and fourth views flip: full sequence reversal (a 180 degree
/// rotation of the map) or a horizontal mirror.
enum class FlipMode { kReverse, kMirror };

struct CrmsmFlags {
  bool multi_view = true;     // false: scan only the original view
  bool use_ssm = true;        // false: a shared 3x3 conv mixes each view map
  bool causal_fusion = true;  // false: concat views, then a 1x1 projection
  FlipMode flip = FlipMode::kReverse;
};

/// One directional view: token s of the view reads source pixel perm[s]; laid
/// out as a map it has extents height x width.
struct ViewGeometry {
  std::vector<std::size_t> perm;
  std::size_t height = 0, width = 0;
};

/// Original, transposed, flipped, flipped-transposed.
std::vector<ViewGeometry> view_geometries(std::size_t height, std::size_t width,
                                          FlipMode flip = FlipMode::kReverse);
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm);

template <typename T>
struct DirectionalViews {
  std::vector<Tensor<T>> tokens;  // [B, H*W, C] each
  std::vector<ViewGeometry> geometry;
  std::size_t height = 0, width = 0;
};

template <typename T>
DirectionalViews<T> make_views(const Tensor<T>& f, FlipMode flip = FlipMode::kReverse);

/// Places the tokens [B,L,C] of one view back into source orientation [B,C,H,W].
template <typename T>
Tensor<T> invert_view(const Tensor<T>& tokens, const ViewGeometry& view, std::size_t height,
                      std::size_t width);

/// [B,C,h,w] <-> [B,h*w,C], row-major tokens.
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map);
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t height, std::size_t width);

/// Mixes one view laid out as a map [B,C,h,w]; must preserve its shape.
template <typename T>
using ViewMixer = std::function<Tensor<T>(const Tensor<T>&)>;

/// Views -> mixer -> inverse views -> fusion -> proj. `fuse` (nviews*C -> C)
/// is required when flags.causal_fusion is off.
template <typename T>
Tensor<T> crmsm_scale(const Tensor<T>& f, const ViewMixer<T>& mixer, const Linear<T>& proj,
                      const CrmsmFlags& flags, const Linear<T>* fuse = nullptr);

/// Parameters for one pyramid level: one SSM shared by the views.
template <typename T>
struct CrmsmScale {
  CrmsmFlags flags;
  std::size_t channels = 0;
  SsmParams<T> ssm;
  Conv2d<T> conv;  // use_ssm == false
  Linear<T> fuse;  // causal_fusion == false
  Linear<T> proj;

  CrmsmScale() = default;
  CrmsmScale(std::size_t channels, const CrmsmFlags& flags, const SsmConfig& ssm_cfg, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& f) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Applies each level's module to the matching feature map, fine to coarse.
template <typename T>
std::vector<Tensor<T>> crmsm_forward(const std::vector<Tensor<T>>& pyramid,
                                     const std::vector<CrmsmScale<T>>& scales);

}  // namespace sama
