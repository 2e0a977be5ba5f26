#include "sama/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sama {

namespace {

void check_pair(const MaskView& g, const MaskView& p) {
  if (g.height != p.height || g.width != p.width)
    throw std::invalid_argument("metrics: mask shapes differ (" + std::to_string(g.height) + "x" +
                                std::to_string(g.width) + " vs " + std::to_string(p.height) + "x" +
                                std::to_string(p.width) + ")");
  if (g.labels.size() != g.height * g.width || p.labels.size() != p.height * p.width)
    throw std::invalid_argument("metrics: label buffer does not match its extents");
}

std::vector<std::uint8_t> binarize(const MaskView& m, std::uint8_t cls) {
  std::vector<std::uint8_t> out(m.labels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.labels[i] == cls;
  return out;
}

// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher). Infinite
// samples carry no parabola and are skipped.
void edt_1d(std::vector<double>& f, std::size_t n, std::vector<double>& d,
            std::vector<std::size_t>& v, std::vector<double>& z) {
  const double inf = std::numeric_limits<double>::infinity();
  auto meet = [&](std::size_t a, std::size_t b) {
    const double x = static_cast<double>(a), y = static_cast<double>(b);
    return ((f[b] + y * y) - (f[a] + x * x)) / (2 * y - 2 * x);
  };
  long k = -1;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s = meet(v[static_cast<std::size_t>(k)], q);
    while (s <= z[static_cast<std::size_t>(k)]) {
      --k;
      s = meet(v[static_cast<std::size_t>(k)], q);
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = inf;
  }
  if (k < 0) return;
  std::size_t j = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[j + 1] < static_cast<double>(q)) ++j;
    const double diff = static_cast<double>(q) - static_cast<double>(v[j]);
    d[q] = diff * diff + f[v[j]];
  }
  f.swap(d);
}

}  // namespace

Score dsc(const MaskView& g, const MaskView& p, std::uint8_t cls) {
  check_pair(g, p);
  std::size_t ng = 0, np = 0, both = 0;
  for (std::size_t i = 0; i < g.labels.size(); ++i) {
    const bool a = g.labels[i] == cls, b = p.labels[i] == cls;
    ng += a;
    np += b;
    both += a && b;
  }
  if (ng + np == 0) return {1.0, true};
  return {2.0 * static_cast<double>(both) / static_cast<double>(ng + np), false};
}

std::vector<std::size_t> boundary(std::span<const std::uint8_t> region, std::size_t H,
                                  std::size_t W) {
  if (region.size() != H * W) throw std::invalid_argument("boundary: buffer size mismatch");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t p = i * W + j;
      if (!region[p]) continue;
      const bool edge = i == 0 || j == 0 || i + 1 == H || j + 1 == W || !region[p - W] ||
                        !region[p + W] || !region[p - 1] || !region[p + 1];
      if (edge) out.push_back(p);
    }
  return out;
}

std::vector<double> squared_distance_transform(std::span<const std::uint8_t> seeds,
                                               std::size_t H, std::size_t W) {
  if (seeds.size() != H * W) throw std::invalid_argument("distance transform: size mismatch");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(H * W);
  for (std::size_t i = 0; i < H * W; ++i) grid[i] = seeds[i] ? 0.0 : inf;
  const std::size_t n = std::max(H, W);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<std::size_t> v(n);
  for (std::size_t j = 0; j < W; ++j) {  // columns
    f.assign(H, inf);
    d.assign(H, inf);
    for (std::size_t i = 0; i < H; ++i) f[i] = grid[i * W + j];
    edt_1d(f, H, d, v, z);
    for (std::size_t i = 0; i < H; ++i) grid[i * W + j] = f[i];
  }
  for (std::size_t i = 0; i < H; ++i) {  // rows
    f.assign(grid.begin() + static_cast<long>(i * W), grid.begin() + static_cast<long>((i + 1) * W));
    d.assign(W, inf);
    edt_1d(f, W, d, v, z);
    std::copy(f.begin(), f.end(), grid.begin() + static_cast<long>(i * W));
  }
  return grid;
}

Score nsd(const MaskView& g, const MaskView& p, std::uint8_t cls, double tau) {
  check_pair(g, p);
  if (!(tau >= 0.0)) throw std::invalid_argument("nsd: tau must be non-negative");
  const auto bg = binarize(g, cls), bp = binarize(p, cls);
  const auto sg = boundary(bg, g.height, g.width);
  const auto sp = boundary(bp, p.height, p.width);
  if (sg.empty() && sp.empty()) return {1.0, true};
  if (sg.empty() || sp.empty()) return {0.0, false};
  auto seeds = [&](const std::vector<std::size_t>& pts) {
    std::vector<std::uint8_t> s(g.labels.size(), 0);
    for (std::size_t i : pts) s[i] = 1;
    return s;
  };
  const auto to_g = squared_distance_transform(seeds(sg), g.height, g.width);
  const auto to_p = squared_distance_transform(seeds(sp), g.height, g.width);
  std::size_t hits = 0;
  for (std::size_t i : sp) hits += std::sqrt(to_g[i]) <= tau;
  for (std::size_t i : sg) hits += std::sqrt(to_p[i]) <= tau;
  return {static_cast<double>(hits) / static_cast<double>(sp.size() + sg.size()), false};
}

std::vector<ClassScore> score_foreground(const MaskView& g, const MaskView& p,
                                         std::size_t num_classes, double tau) {
  std::vector<ClassScore> out;
  for (std::size_t c = 1; c < num_classes; ++c) {
    const auto cls = static_cast<std::uint8_t>(c);
    out.push_back({cls, dsc(g, p, cls), nsd(g, p, cls, tau)});
  }
  return out;
}

namespace {

double mean_of(const std::vector<ClassScore>& scores, Score ClassScore::*field) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& c : scores) {
    if ((c.*field).both_empty) continue;
    s += (c.*field).value;
    ++n;
  }
  return n ? s / static_cast<double>(n) : 1.0;
}

}  // namespace

double mean_dsc(const std::vector<ClassScore>& scores) { return mean_of(scores, &ClassScore::dsc); }
double mean_nsd(const std::vector<ClassScore>& scores) { return mean_of(scores, &ClassScore::nsd); }

}  // namespace sama
