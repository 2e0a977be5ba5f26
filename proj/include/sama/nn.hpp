#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "sama/ops.hpp"
#include "sama/tensor.hpp"

namespace sama {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
std::size_t count_scalars(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

/// Seeded generator shared by initializers and data synthesis. Draws are made
/// in double and narrowed afterwards so float and double models built from
/// the same seed agree up to rounding.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  std::uint64_t index(std::uint64_t n);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Leaf parameter with entries ~ U(-bound, bound).
template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng);
template <typename T>
Tensor<T> constant_param(Shape shape, T value);

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out] or undefined

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng);

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  /// Contracts the last axis.
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  /// Contracts the channel axis of an NCHW map.
  Tensor<T> channels(const Tensor<T>& x) const { return linear_channels(x, weight, bias); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in/groups, kh, kw]
  Tensor<T> bias;
  Conv2dGeometry geom;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dGeometry geom,
         bool with_bias, Rng& rng);
  static Conv2d depthwise(std::size_t channels, std::size_t kernel, std::size_t stride,
                          bool with_bias, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, geom); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct ConvTranspose2d {
  Tensor<T> weight;  // [in, out/groups, kh, kw]
  Tensor<T> bias;
  Conv2dGeometry geom;

  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                  bool with_bias, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv_transpose2d(x, weight, bias, geom);
  }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Default group count: 8, or the channel count when fewer than 8. Falls back
/// to the largest divisor of `channels` not exceeding 8.
std::size_t default_groups(std::size_t channels);

template <typename T>
struct GroupNorm {
  Tensor<T> gamma, beta;
  std::size_t groups = 1;
  T eps = T(1e-5);

  GroupNorm() = default;
  GroupNorm(std::size_t channels, std::size_t num_groups);

  Tensor<T> operator()(const Tensor<T>& x) const {
    return group_norm(x, gamma, beta, groups, eps);
  }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// LayerNorm over the channel vector of each pixel of an NCHW map.
template <typename T>
struct LayerNorm2d {
  Tensor<T> gamma, beta;
  T eps = T(1e-5);

  LayerNorm2d() = default;
  explicit LayerNorm2d(std::size_t channels);

  Tensor<T> operator()(const Tensor<T>& x) const {
    return layer_norm_channels(x, gamma, beta, eps);
  }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

struct AdamWOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay and bias-corrected moments. Parameters
/// whose grad buffer was never touched are treated as having zero gradient.
template <typename T>
class AdamW {
 public:
  AdamW(ParamList<T> params, AdamWOptions options);

  void set_lr(double lr);
  double lr() const { return options_.lr; }
  std::size_t steps() const { return step_; }
  void step();
  void zero_grad();

  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  ParamList<T> params_;
  AdamWOptions options_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t step_ = 0;
};

/// Single cosine decay lr_max * 0.5 * (1 + cos(pi * step / total_steps)).
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max);

/// Checkpoint directory: one STN1 file per parameter plus manifest.txt with
/// lines "name<TAB>file<TAB>d0,d1,...".
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamList<T>& params);
/// Loads every listed parameter into `params` by name; shapes must match.
template <typename T>
void load_checkpoint(const std::filesystem::path& dir, ParamList<T>& params);

struct ManifestEntry {
  std::string name;
  std::string file;
  Shape shape;
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);

}  // namespace sama
