#include "sama/crmsm.hpp"

#include <stdexcept>

#include "sama/ops.hpp"

namespace sama {

std::vector<ViewGeometry> view_geometries(std::size_t H, std::size_t W, FlipMode flip) {
  const std::size_t L = H * W;
  std::vector<ViewGeometry> v(4);
  v[0] = {std::vector<std::size_t>(L), H, W};
  v[1] = {std::vector<std::size_t>(L), W, H};
  for (std::size_t s = 0; s < L; ++s) v[0].perm[s] = s;
  // Transposed map is W x H; its pixel (j, i) is source (i, j).
  for (std::size_t j = 0; j < W; ++j)
    for (std::size_t i = 0; i < H; ++i) v[1].perm[j * H + i] = i * W + j;
  if (flip == FlipMode::kReverse) {
    v[2] = {std::vector<std::size_t>(v[0].perm.rbegin(), v[0].perm.rend()), H, W};
    v[3] = {std::vector<std::size_t>(v[1].perm.rbegin(), v[1].perm.rend()), W, H};
  } else {
    v[2] = {std::vector<std::size_t>(L), H, W};
    v[3] = {std::vector<std::size_t>(L), W, H};
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) v[2].perm[i * W + j] = v[0].perm[i * W + (W - 1 - j)];
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t i = 0; i < H; ++i) v[3].perm[j * H + i] = v[1].perm[j * H + (H - 1 - i)];
  }
  return v;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size(), perm.size());
  for (std::size_t s = 0; s < perm.size(); ++s) {
    if (perm[s] >= perm.size() || inv[perm[s]] != perm.size())
      throw std::invalid_argument("inverse_permutation: not a bijection");
    inv[perm[s]] = s;
  }
  return inv;
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  if (map.rank() != 4) throw ShapeError("map_to_tokens: expected NCHW, got " + shape_str(map.shape()));
  const std::size_t B = map.dim(0), C = map.dim(1), L = map.dim(2) * map.dim(3);
  return permute(reshape(map, {B, C, L}), {0, 2, 1});
}

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t height, std::size_t width) {
  if (tokens.rank() != 3 || tokens.dim(1) != height * width)
    throw ShapeError("tokens_to_map: expected [B," + std::to_string(height * width) + ",C], got " +
                     shape_str(tokens.shape()));
  const std::size_t B = tokens.dim(0), C = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {B, C, height, width});
}

namespace {

template <typename T>
Tensor<T> view_map(const Tensor<T>& f, const ViewGeometry& g) {
  return reindex_spatial(f, g.perm, g.height, g.width);
}

template <typename T>
Tensor<T> unview_map(const Tensor<T>& m, const ViewGeometry& g, std::size_t H, std::size_t W) {
  const auto inv = inverse_permutation(g.perm);
  return reindex_spatial(m, inv, H, W);
}

}  // namespace

template <typename T>
DirectionalViews<T> make_views(const Tensor<T>& f, FlipMode flip) {
  if (f.rank() != 4) throw ShapeError("make_views: expected NCHW, got " + shape_str(f.shape()));
  DirectionalViews<T> out;
  out.height = f.dim(2);
  out.width = f.dim(3);
  out.geometry = view_geometries(out.height, out.width, flip);
  for (const auto& g : out.geometry) out.tokens.push_back(map_to_tokens(view_map(f, g)));
  return out;
}

template <typename T>
Tensor<T> invert_view(const Tensor<T>& tokens, const ViewGeometry& view, std::size_t H,
                      std::size_t W) {
  return unview_map(tokens_to_map(tokens, view.height, view.width), view, H, W);
}

template <typename T>
Tensor<T> crmsm_scale(const Tensor<T>& f, const ViewMixer<T>& mixer, const Linear<T>& proj,
                      const CrmsmFlags& flags, const Linear<T>* fuse) {
  if (f.rank() != 4) throw ShapeError("crmsm_scale: expected NCHW, got " + shape_str(f.shape()));
  const std::size_t H = f.dim(2), W = f.dim(3);
  auto geoms = view_geometries(H, W, flags.flip);
  if (!flags.multi_view) geoms.resize(1);
  std::vector<Tensor<T>> ys;
  for (const auto& g : geoms) {
    auto y = mixer(view_map(f, g));
    if (y.shape() != Shape{f.dim(0), f.dim(1), g.height, g.width})
      throw ShapeError("crmsm_scale: view mixer changed the shape to " + shape_str(y.shape()));
    ys.push_back(unview_map(y, g, H, W));
  }
  Tensor<T> fused;
  if (!flags.causal_fusion) {
    if (!fuse || !fuse->weight.defined())
      throw std::invalid_argument("crmsm_scale: concat fusion needs a fuse projection");
    fused = fuse->channels(concat(ys, 1));
  } else if (ys.size() == 1) {
    fused = ys[0];
  } else {
    // Pairwise sum then an exact power-of-two scale: equal views average to
    // themselves bit for bit.
    fused = mul_scalar(add(add(ys[0], ys[1]), add(ys[2], ys[3])), T(0.25));
  }
  return proj.channels(fused);
}

template <typename T>
CrmsmScale<T>::CrmsmScale(std::size_t c, const CrmsmFlags& f, const SsmConfig& ssm_cfg, Rng& rng)
    : flags(f), channels(c) {
  if (flags.use_ssm) {
    SsmConfig sc = ssm_cfg;
    sc.channels = c;
    ssm = SsmParams<T>(sc, rng);
  } else {
    conv = Conv2d<T>(c, c, 3, Conv2dGeometry{1, 1, 1}, true, rng);
  }
  if (!flags.causal_fusion) fuse = Linear<T>((flags.multi_view ? 4 : 1) * c, c, true, rng);
  proj = Linear<T>(c, c, true, rng);
}

template <typename T>
Tensor<T> CrmsmScale<T>::operator()(const Tensor<T>& f) const {
  if (f.rank() != 4 || f.dim(1) != channels)
    throw ShapeError("crmsm: expected [B," + std::to_string(channels) + ",H,W], got " +
                     shape_str(f.shape()));
  ViewMixer<T> mixer;
  if (flags.use_ssm) {
    mixer = [this](const Tensor<T>& m) {
      return tokens_to_map(selective_scan(map_to_tokens(m), ssm), m.dim(2), m.dim(3));
    };
  } else {
    mixer = [this](const Tensor<T>& m) { return conv(m); };
  }
  return crmsm_scale(f, mixer, proj, flags, flags.causal_fusion ? nullptr : &fuse);
}

template <typename T>
void CrmsmScale<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  if (flags.use_ssm) ssm.collect(out, prefix + ".ssm");
  else conv.collect(out, prefix + ".conv");
  if (!flags.causal_fusion) fuse.collect(out, prefix + ".fuse");
  proj.collect(out, prefix + ".proj");
}

template <typename T>
std::vector<Tensor<T>> crmsm_forward(const std::vector<Tensor<T>>& pyramid,
                                     const std::vector<CrmsmScale<T>>& scales) {
  if (pyramid.empty()) throw std::invalid_argument("crmsm_forward: empty pyramid");
  if (pyramid.size() != scales.size())
    throw std::invalid_argument("crmsm_forward: " + std::to_string(pyramid.size()) +
                                " feature maps for " + std::to_string(scales.size()) + " scales");
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < pyramid.size(); ++i) out.push_back(scales[i](pyramid[i]));
  return out;
}

#define SAMA_INSTANTIATE_CRMSM(T)                                                             \
  template Tensor<T> map_to_tokens(const Tensor<T>&);                                         \
  template Tensor<T> tokens_to_map(const Tensor<T>&, std::size_t, std::size_t);               \
  template DirectionalViews<T> make_views(const Tensor<T>&, FlipMode);                        \
  template Tensor<T> invert_view(const Tensor<T>&, const ViewGeometry&, std::size_t,          \
                                 std::size_t);                                                \
  template Tensor<T> crmsm_scale(const Tensor<T>&, const ViewMixer<T>&, const Linear<T>&,     \
                                 const CrmsmFlags&, const Linear<T>*);                        \
  template struct CrmsmScale<T>;                                                              \
  template std::vector<Tensor<T>> crmsm_forward(const std::vector<Tensor<T>>&,                \
                                                const std::vector<CrmsmScale<T>>&);

SAMA_INSTANTIATE_CRMSM(float)
SAMA_INSTANTIATE_CRMSM(double)

}  // namespace sama
