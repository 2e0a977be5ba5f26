#include "sama/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

#include "sama/io.hpp"
#include "sama/nn.hpp"

namespace sama {

namespace {

constexpr std::size_t kMinClassPixels = 4;

struct Shape2d {
  bool ellipse;
  double cy, cx, ry, rx;
  std::uint8_t cls;

  // Positive inside, roughly in pixels.
  double depth(double y, double x) const {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    if (ellipse) return (1.0 - std::sqrt(dy * dy + dx * dx)) * std::min(ry, rx);
    return std::min(ry - std::abs(y - cy), rx - std::abs(x - cx));
  }
};

bool draw_sample(const SyntheticSpec& spec, Rng& rng, Sample& out) {
  const std::size_t H = spec.height, W = spec.width, K = spec.num_classes;
  const double lo = 0.1 * static_cast<double>(std::min(H, W));
  const double hi = 0.25 * static_cast<double>(std::min(H, W));
  std::vector<Shape2d> shapes;
  for (std::size_t c = 1; c < K; ++c) {
    const std::size_t n = spec.min_shapes + rng.index(spec.max_shapes - spec.min_shapes + 1);
    for (std::size_t k = 0; k < n; ++k) {
      Shape2d s;
      s.ellipse = rng.index(2) == 0;
      s.ry = rng.uniform(lo, hi);
      s.rx = rng.uniform(lo, hi);
      s.cy = rng.uniform(0.0, static_cast<double>(H - 1));
      s.cx = rng.uniform(0.0, static_cast<double>(W - 1));
      s.cls = static_cast<std::uint8_t>(c);
      shapes.push_back(s);
    }
  }
  // Paint in random order so no class always sits on top.
  for (std::size_t i = shapes.size(); i > 1; --i) std::swap(shapes[i - 1], shapes[rng.index(i)]);

  out.height = H;
  out.width = W;
  out.image.assign(H * W, 0.0f);
  out.mask.assign(H * W, 0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double v = 0.0;
      std::uint8_t label = 0;
      for (const auto& s : shapes) {
        const double d = s.depth(static_cast<double>(i), static_cast<double>(j));
        const double a = 1.0 / (1.0 + std::exp(-2.0 * d));
        const double level = static_cast<double>(s.cls) / static_cast<double>(K - 1);
        v = (1.0 - a) * v + a * level;
        if (d > 0.0) label = s.cls;
      }
      out.image[i * W + j] = static_cast<float>(v + rng.normal(0.0, spec.noise));
      out.mask[i * W + j] = label;
    }
  std::vector<std::size_t> hist(K, 0);
  for (auto l : out.mask) ++hist[l];
  for (std::size_t c = 1; c < K; ++c)
    if (hist[c] < kMinClassPixels) return false;
  return true;
}

std::filesystem::path numbered(const std::filesystem::path& dir, const char* stem, std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof name, "%s_%04zu.stn", stem, i);
  return dir / name;
}

}  // namespace

std::vector<Sample> make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2 || spec.num_classes > 256)
    throw std::invalid_argument("synthetic data: num_classes must be in [2, 256]");
  if (spec.height < 8 || spec.width < 8)
    throw std::invalid_argument("synthetic data: images must be at least 8x8");
  if (spec.min_shapes == 0 || spec.max_shapes < spec.min_shapes)
    throw std::invalid_argument("synthetic data: need 1 <= min_shapes <= max_shapes");
  if (spec.noise < 0.0) throw std::invalid_argument("synthetic data: noise must be >= 0");
  Rng rng(spec.seed);
  std::vector<Sample> out(spec.count);
  for (auto& s : out) {
    std::size_t tries = 0;
    while (!draw_sample(spec, rng, s))
      if (++tries == 1000)
        throw std::runtime_error("synthetic data: could not place every class in 1000 draws");
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    write_stn(numbered(dir, "img", i), to_stn(Tensor<float>::from({1, s.height, s.width}, s.image)));
    write_stn(numbered(dir, "mask", i), to_stn_u8({s.height, s.width}, s.mask));
  }
}

namespace {

Sample read_mask(const std::filesystem::path& path) {
  const auto m = read_stn(path);
  if (m.shape.size() != 2) throw StnError(path.string() + ": mask must be rank 2");
  Sample s;
  s.height = m.shape[0];
  s.width = m.shape[1];
  s.mask = m.values<std::uint8_t>();
  return s;
}

}  // namespace

std::vector<Sample> read_masks(const std::filesystem::path& dir) {
  std::vector<Sample> out;
  for (std::size_t i = 0;; ++i) {
    const auto path = numbered(dir, "mask", i);
    if (!std::filesystem::exists(path)) break;
    out.push_back(read_mask(path));
  }
  if (out.empty()) throw std::runtime_error("no mask_0000.stn in " + dir.string());
  return out;
}

std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::vector<Sample> out;
  for (std::size_t i = 0;; ++i) {
    const auto ip = numbered(dir, "img", i);
    const auto mp = numbered(dir, "mask", i);
    if (!std::filesystem::exists(ip)) break;
    if (!std::filesystem::exists(mp)) throw std::runtime_error("missing " + mp.string());
    Sample s = read_mask(mp);
    const auto img = read_stn(ip);
    if (img.shape != Shape{1, s.height, s.width})
      throw StnError(ip.string() + ": expected [1," + std::to_string(s.height) + "," +
                     std::to_string(s.width) + "], got " + shape_str(img.shape));
    s.image = img.values<float>();
    out.push_back(std::move(s));
  }
  if (out.empty()) throw std::runtime_error("no img_0000.stn in " + dir.string());
  return out;
}

}  // namespace sama
