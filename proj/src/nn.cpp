#include "sama/nn.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "sama/io.hpp"

namespace sama {

double Rng::uniform(double lo, double hi) {
  // 53 random mantissa bits; avoids distribution-object implementation drift.
  const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

double Rng::normal(double mean, double stddev) {
  // Box-Muller on two fresh uniforms.
  double u1 = uniform(0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(0.0, 1.0);
  const double u2 = uniform(0.0, 1.0);
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::index(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index: empty range");
  return engine_() % n;
}

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  auto t = Tensor<T>::from(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> constant_param(Shape shape, T value) {
  auto t = Tensor<T>::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

namespace {

template <typename T>
void push(ParamList<T>& out, const std::string& name, const Tensor<T>& t) {
  if (t.defined()) out.push_back({name, t});
}

}  // namespace

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  weight = uniform_param<T>({out, in}, bound, rng);
  if (with_bias) bias = uniform_param<T>({out}, bound, rng);
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  push(out, prefix + ".weight", weight);
  push(out, prefix + ".bias", bias);
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dGeometry g,
                  bool with_bias, Rng& rng)
    : geom(g) {
  if (g.groups == 0 || in % g.groups != 0 || out % g.groups != 0) {
    throw ShapeError("Conv2d: groups " + std::to_string(g.groups) + " must divide " +
                     std::to_string(in) + " and " + std::to_string(out));
  }
  const std::size_t fan_in = (in / g.groups) * kernel * kernel;
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  weight = uniform_param<T>({out, in / g.groups, kernel, kernel}, bound, rng);
  if (with_bias) bias = uniform_param<T>({out}, bound, rng);
}

template <typename T>
Conv2d<T> Conv2d<T>::depthwise(std::size_t channels, std::size_t kernel, std::size_t stride,
                               bool with_bias, Rng& rng) {
  return Conv2d(channels, channels, kernel, {stride, kernel / 2, channels}, with_bias, rng);
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  push(out, prefix + ".weight", weight);
  push(out, prefix + ".bias", bias);
}

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(std::size_t in, std::size_t out, std::size_t kernel,
                                    std::size_t stride, bool with_bias, Rng& rng)
    : geom{stride, 0, 1} {
  const double bound = std::sqrt(1.0 / static_cast<double>(out * kernel * kernel));
  weight = uniform_param<T>({in, out, kernel, kernel}, bound, rng);
  if (with_bias) bias = uniform_param<T>({out}, bound, rng);
}

template <typename T>
void ConvTranspose2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  push(out, prefix + ".weight", weight);
  push(out, prefix + ".bias", bias);
}

std::size_t default_groups(std::size_t channels) {
  if (channels < 8) return channels;
  for (std::size_t g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

template <typename T>
GroupNorm<T>::GroupNorm(std::size_t channels, std::size_t num_groups)
    : gamma(constant_param<T>({channels}, T(1))),
      beta(constant_param<T>({channels}, T(0))),
      groups(num_groups) {
  if (num_groups == 0 || channels % num_groups != 0) {
    throw ShapeError("GroupNorm: " + std::to_string(channels) + " channels not divisible by " +
                     std::to_string(num_groups) + " groups");
  }
}

template <typename T>
void GroupNorm<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  push(out, prefix + ".gamma", gamma);
  push(out, prefix + ".beta", beta);
}

template <typename T>
LayerNorm2d<T>::LayerNorm2d(std::size_t channels)
    : gamma(constant_param<T>({channels}, T(1))), beta(constant_param<T>({channels}, T(0))) {}

template <typename T>
void LayerNorm2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  push(out, prefix + ".gamma", gamma);
  push(out, prefix + ".beta", beta);
}

template <typename T>
AdamW<T>::AdamW(ParamList<T> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  if (options_.lr < 0.0) throw std::invalid_argument("AdamW: negative learning rate");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::set_lr(double lr) {
  if (lr < 0.0) throw std::invalid_argument("AdamW: negative learning rate");
  options_.lr = lr;
}

template <typename T>
void AdamW<T>::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("AdamW: non-finite gradient in parameter '" + p.name + "'");
      }
    }
  }
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = options_.lr;
  const double decay = 1.0 - lr * options_.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& t = params_[k].tensor;
    auto theta = t.mutable_data();
    const bool has = t.has_grad();
    const auto grad = t.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = has ? static_cast<double>(grad[i]) : 0.0;
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + options_.eps);
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) * decay - lr * update);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max) {
  if (total_steps == 0 || step > total_steps) {
    throw std::out_of_range("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  }
  if (step == total_steps) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {

std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(s[i]);
  }
  return out;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamList<T>& params) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (const auto& p : params) {
    const std::string file = p.name + ".stn";
    write_stn(dir / file, to_stn(p.tensor));
    manifest << p.name << '\t' << file << '\t' << join_shape(p.tensor.shape()) << '\n';
  }
  if (!manifest) throw std::runtime_error("manifest write failed in " + dir.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw std::runtime_error("no manifest.txt in " + dir.string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string shape;
    if (!std::getline(ls, e.name, '\t') || !std::getline(ls, e.file, '\t')) {
      throw std::runtime_error("malformed manifest line: " + line);
    }
    std::getline(ls, shape);
    std::istringstream ss(shape);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (!tok.empty()) e.shape.push_back(std::stoull(tok));
    }
    out.push_back(std::move(e));
  }
  return out;
}

template <typename T>
void load_checkpoint(const std::filesystem::path& dir, ParamList<T>& params) {
  const auto entries = read_manifest(dir);
  for (auto& p : params) {
    const ManifestEntry* hit = nullptr;
    for (const auto& e : entries) {
      if (e.name == p.name) hit = &e;
    }
    if (!hit) throw std::runtime_error("checkpoint lacks parameter '" + p.name + "'");
    const StnArray arr = read_stn(dir / hit->file);
    if (arr.shape != p.tensor.shape()) {
      throw ShapeError("checkpoint parameter '" + p.name + "' has shape " + shape_str(arr.shape) +
                       ", model expects " + shape_str(p.tensor.shape()));
    }
    const auto values = arr.values<T>();
    std::copy(values.begin(), values.end(), p.tensor.mutable_data().begin());
  }
}

#define SAMA_INSTANTIATE_NN(T)                                                             \
  template Tensor<T> uniform_param<T>(Shape, double, Rng&);                                \
  template Tensor<T> constant_param<T>(Shape, T);                                          \
  template struct Linear<T>;                                                               \
  template struct Conv2d<T>;                                                               \
  template struct ConvTranspose2d<T>;                                                      \
  template struct GroupNorm<T>;                                                            \
  template struct LayerNorm2d<T>;                                                          \
  template class AdamW<T>;                                                                 \
  template void save_checkpoint<T>(const std::filesystem::path&, const ParamList<T>&);     \
  template void load_checkpoint<T>(const std::filesystem::path&, ParamList<T>&);

SAMA_INSTANTIATE_NN(float)
SAMA_INSTANTIATE_NN(double)

}  // namespace sama
