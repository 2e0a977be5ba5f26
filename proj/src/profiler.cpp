#include "sama/profiler.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "sama/io.hpp"
#include "sama/nn.hpp"

namespace sama {

std::uint64_t FlopsReport::total_params() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.params;
  return n;
}

std::uint64_t FlopsReport::total_macs() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.macs;
  return n;
}

std::uint64_t FlopsReport::macs_of(const std::string& kind) const {
  std::uint64_t n = 0;
  for (const auto& r : rows)
    if (r.kind == kind) n += r.macs;
  return n;
}

namespace {

bool under(const std::string& name, const std::string& prefix) {
  return name == prefix ||
         (name.size() > prefix.size() && name.compare(0, prefix.size(), prefix) == 0 &&
          name[prefix.size()] == '.');
}

}  // namespace

std::uint64_t FlopsReport::params_under(const std::string& prefix) const {
  std::uint64_t n = 0;
  for (const auto& r : rows)
    if (under(r.name, prefix)) n += r.params;
  return n;
}

std::uint64_t FlopsReport::macs_under(const std::string& prefix) const {
  std::uint64_t n = 0;
  for (const auto& r : rows)
    if (under(r.name, prefix)) n += r.macs;
  return n;
}

std::string FlopsReport::table() const {
  std::ostringstream out;
  out << "# analytic profile of one " << height << "x" << width << " image (padded to "
      << padded_height << "x" << padded_width << "); MACs = multiply-accumulates, 1 MAC = 2 FLOPs\n";
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, r.name.size());
  char line[512];
  std::snprintf(line, sizeof line, "%-*s  %-9s  %12s  %15s\n", static_cast<int>(w), "layer", "kind",
                "params", "MACs");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-*s  %-9s  %12llu  %15llu\n", static_cast<int>(w),
                  r.name.c_str(), r.kind.c_str(), static_cast<unsigned long long>(r.params),
                  static_cast<unsigned long long>(r.macs));
    out << line;
  }
  std::snprintf(line, sizeof line, "%-*s  %-9s  %12llu  %15llu\n", static_cast<int>(w), "total", "",
                static_cast<unsigned long long>(total_params()),
                static_cast<unsigned long long>(total_macs()));
  out << line;
  std::snprintf(line, sizeof line, "params %.4f M, MACs %.4f G, FLOPs %.4f G (attention %.4f G MACs, scan %.4f G MACs)\n",
                total_params() / 1e6, total_macs() / 1e9, 2.0 * total_macs() / 1e9,
                macs_of("attention") / 1e9, macs_of("scan") / 1e9);
  out << line;
  return out.str();
}

std::string FlopsReport::csv() const {
  std::ostringstream out;
  out << "layer,kind,params,macs\n";
  for (const auto& r : rows) out << r.name << ',' << r.kind << ',' << r.params << ',' << r.macs << '\n';
  return out.str();
}

namespace {

using u64 = std::uint64_t;

struct Walker {
  std::vector<LayerRow>& rows;

  void add(const std::string& name, const std::string& kind, u64 params, u64 macs) {
    rows.push_back({name, kind, params, macs});
  }
  // 1x1 projection over `tokens` positions.
  void linear(const std::string& name, u64 in, u64 out, u64 tokens, bool bias = true) {
    add(name, "linear", in * out + (bias ? out : 0), in * out * tokens);
  }
  void conv(const std::string& name, u64 in, u64 out, u64 k, u64 groups, u64 out_pixels,
            bool bias) {
    add(name, "conv", out * (in / groups) * k * k + (bias ? out : 0),
        out * (in / groups) * k * k * out_pixels);
  }
  void conv_t(const std::string& name, u64 in, u64 out, u64 k, u64 in_pixels) {
    add(name, "conv", in * out * k * k + out, in * out * k * k * in_pixels);
  }
  void norm(const std::string& name, u64 channels) { add(name, "norm", 2 * channels, 0); }
};

std::size_t conv_out(std::size_t n, std::size_t k, std::size_t s, std::size_t p) {
  return (n + 2 * p - k) / s + 1;
}

// Sum over positions of in-bounds offsets in [-r, r] along one axis.
u64 valid_span(std::size_t n, std::size_t window) {
  const long r = static_cast<long>(window / 2), N = static_cast<long>(n);
  u64 s = 0;
  for (long i = 0; i < N; ++i) s += static_cast<u64>(std::min(i + r, N - 1) - std::max(i - r, 0L) + 1);
  return s;
}

void branch(Walker& w, const std::string& name, const AttnConfig& a, Branch kind, std::size_t H,
            std::size_t W) {
  const u64 d = a.channels, hw = static_cast<u64>(H) * W, P2 = a.global_pool * a.global_pool;
  w.linear(name + ".wq", d, d, hw);
  if (kind == Branch::kLocal) {
    w.linear(name + ".wk", d, d, hw, false);
    w.linear(name + ".wv", d, d, hw);
    // Per head and valid tap: c for q.k (two maps of width c/2 when
    // differential) plus c for a.v; summed over heads that is 2d.
    w.add(name + ".attn", "attention", 0, valid_span(H, a.local_window) * valid_span(W, a.local_window) * 2 * d);
  } else {
    w.linear(name + ".wk", d, d, P2, false);
    w.add(name + ".wv", "linear", d * d + d, d * d * (hw + P2));  // full map for PE, pooled for keys
    w.add(name + ".attn", "attention", 0, hw * P2 * 2 * d);
  }
  if (a.differential) w.add(name + ".lambda", "param", a.heads, 0);
  if (a.positional_encoding) w.conv(name + ".pe", d, d, 3, d, hw, true);
  if (a.differential && a.post_norm) w.norm(name + ".gn", d);
}

void block(Walker& w, const std::string& name, const BlockConfig& b, std::size_t H, std::size_t W) {
  const u64 C = b.channels, hw = static_cast<u64>(H) * W, eC = b.expansion * C;
  w.norm(name + ".norm1", C);
  if (b.use_mamba_macro) {
    w.linear(name + ".in_proj", C, eC, hw);
    w.conv(name + ".dw", eC, eC, 3, eC, hw, true);
    w.linear(name + ".res_proj", C, eC, hw);
  }
  const AttnConfig a = b.branch_config();
  branch(w, name + ".local", a, Branch::kLocal, H, W);
  branch(w, name + ".global", a, Branch::kGlobal, H, W);
  w.linear(name + ".out_proj", b.use_mamba_macro ? eC : C, C, hw);
  w.norm(name + ".norm2", C);
  w.linear(name + ".ffn1", C, b.ffn_ratio * C, hw);
  w.linear(name + ".ffn2", b.ffn_ratio * C, C, hw);
}

void crmsm(Walker& w, const std::string& name, const ModelConfig& cfg, u64 C, u64 L) {
  const u64 views = cfg.crmsm.multi_view ? 4 : 1, N = cfg.ssm_state;
  if (cfg.crmsm.use_ssm) {
    w.add(name + ".ssm.a_log", "param", C * N, 0);
    w.add(name + ".ssm.d", "param", C, 0);
    if (cfg.ssm_static) {
      w.add(name + ".ssm.delta", "param", C, 0);
      w.add(name + ".ssm.b", "param", N, 0);
      w.add(name + ".ssm.c", "param", N, 0);
    } else {
      w.linear(name + ".ssm.delta", C, C, views * L);
      w.linear(name + ".ssm.b", C, N, views * L);
      w.linear(name + ".ssm.c", C, N, views * L);
    }
    w.add(name + ".ssm.scan", "scan", 0, views * L * C * N);
  } else {
    w.conv(name + ".conv", C, C, 3, 1, views * L, true);
  }
  if (!cfg.crmsm.causal_fusion) w.linear(name + ".fuse", views * C, C, L);
  w.linear(name + ".proj", C, C, L);
}

void resblock(Walker& w, const std::string& name, u64 in, u64 out, u64 hw) {
  w.conv(name + ".conv1", in, out, 3, 1, hw, false);
  w.norm(name + ".gn1", out);
  w.conv(name + ".conv2", out, out, 3, 1, hw, false);
  w.norm(name + ".gn2", out);
  if (in != out) w.conv(name + ".skip", in, out, 1, 1, hw, false);
}

}  // namespace

FlopsReport profile(const ModelConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  FlopsReport rep;
  rep.height = height;
  rep.width = width;
  const std::size_t f = cfg.total_stride();
  rep.padded_height = (height + f - 1) / f * f;
  rep.padded_width = (width + f - 1) / f * f;
  Walker w{rep.rows};

  const std::size_t S = cfg.stages(), C0 = cfg.base_channels, K = cfg.num_classes;
  std::size_t H = rep.padded_height, W = rep.padded_width;
  const u64 full = static_cast<u64>(H) * W;
  H = conv_out(H, 3, 2, 1);
  W = conv_out(W, 3, 2, 1);
  w.conv("embed.conv1", cfg.in_channels, C0 / 2, 3, 1, static_cast<u64>(H) * W, true);
  H = conv_out(H, 3, 2, 1);
  W = conv_out(W, 3, 2, 1);
  w.conv("embed.conv2", C0 / 2, C0, 3, 1, static_cast<u64>(H) * W, true);

  std::vector<std::pair<std::size_t, std::size_t>> extents;
  for (std::size_t s = 0; s < S; ++s) {
    const std::string p = "enc" + std::to_string(s);
    const u64 C = cfg.stage_channels(s);
    if (s > 0) {
      const u64 P = cfg.stage_channels(s - 1);
      H = conv_out(H, 3, 2, 1);
      W = conv_out(W, 3, 2, 1);
      w.conv(p + ".down_dw", P, P, 3, P, static_cast<u64>(H) * W, true);
      w.conv(p + ".down_pw", P, C, 1, 1, static_cast<u64>(H) * W, true);
    }
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b)
      block(w, p + ".block" + std::to_string(b), cfg.block_config(s), H, W);
    extents.emplace_back(H, W);
  }
  if (cfg.use_crmsm) {
    const std::size_t n = cfg.crmsm_on_bottleneck ? S : S - 1;
    for (std::size_t s = 0; s < n; ++s)
      crmsm(w, "skip" + std::to_string(s), cfg, cfg.stage_channels(s),
            static_cast<u64>(extents[s].first) * extents[s].second);
  }
  for (std::size_t s = S - 1; s-- > 0;) {
    const std::string p = "dec" + std::to_string(s);
    const u64 C = cfg.stage_channels(s);
    const u64 coarse = static_cast<u64>(extents[s + 1].first) * extents[s + 1].second;
    const u64 fine = static_cast<u64>(extents[s].first) * extents[s].second;
    w.conv_t(p + ".up", cfg.stage_channels(s + 1), C, 2, coarse);
    resblock(w, p + ".res", 2 * C, C, fine);
    if (cfg.deep_supervision) w.conv(p + ".head", C, K, 1, 1, fine, true);
  }
  const u64 half = C0 / 2;
  w.conv_t("final.up", C0, half, 4, static_cast<u64>(extents[0].first) * extents[0].second);
  resblock(w, "final.res", half + cfg.in_channels, half, full);
  w.conv("final.head", half, K, 1, 1, full, true);
  return rep;
}

std::uint64_t checkpoint_scalars(const std::filesystem::path& dir) {
  std::uint64_t n = 0;
  for (const auto& e : read_manifest(dir)) n += read_stn(dir / e.file).numel();
  return n;
}

}  // namespace sama
