#include "sama/gradsuite.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <numeric>

#include "sama/attention.hpp"
#include "sama/block.hpp"
#include "sama/crmsm.hpp"
#include "sama/loss.hpp"
#include "sama/model.hpp"
#include "sama/ops.hpp"
#include "sama/ssm.hpp"

namespace sama {

namespace {

using TD = Tensor<double>;

TD rand(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD::from(std::move(shape), std::move(v));
}

// sum(y * w) with fixed random w: a scalar that exercises every output.
TD probe(const TD& y) {
  Rng rng(4242);
  return sum(mul(y, rand(y.shape(), rng)));
}

std::vector<NamedInput> with_params(std::vector<NamedInput> inputs, const ParamList<double>& ps) {
  for (const auto& p : ps) inputs.push_back({p.name, p.tensor});
  return inputs;
}

class Suite {
 public:
  // Single ops use second-order differences at h=1e-5. Composites and the
  // network use fourth order at h=1e-3: deep stacks produce gradient entries
  // near 1e-7..1e-9 that second-order rounding noise would swamp.
  void add(const std::string& name, const std::string& group,
           const std::function<TD()>& f, std::vector<NamedInput> inputs) {
    const bool op = group == "op";
    const double h = op ? 1e-5 : 1e-3;
    const Stencil stencil = op ? Stencil::kCentral2 : Stencil::kCentral4;
    GradSuiteRow row;
    row.name = name;
    row.group = group;
    row.tolerance = group == "model" ? 1e-3 : 1e-4;
    const auto t0 = std::chrono::steady_clock::now();
    row.result = grad_check(f, std::move(inputs), h, stencil);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
  }

  std::vector<GradSuiteRow> rows;
};

void ops(Suite& s, std::size_t n, Rng& rng) {
  auto a = rand({2, n}, rng), b = rand({2, n}, rng), pos = rand({2, n}, rng, 0.5, 2.0);
  s.add("add", "op", [&] { return probe(add(a, b)); }, {{"a", a}, {"b", b}});
  s.add("sub", "op", [&] { return probe(sub(a, b)); }, {{"a", a}, {"b", b}});
  s.add("mul", "op", [&] { return probe(mul(a, b)); }, {{"a", a}, {"b", b}});
  s.add("div", "op", [&] { return probe(div(a, pos)); }, {{"a", a}, {"b", pos}});
  auto row = rand({n}, rng);
  s.add("add (broadcast)", "op", [&] { return probe(add(a, row)); }, {{"a", a}, {"b", row}});
  s.add("scalar ops", "op", [&] { return probe(neg(add_scalar(mul_scalar(a, 1.5), 0.25))); },
        {{"a", a}});
  s.add("exp", "op", [&] { return probe(exp(a)); }, {{"a", a}});
  s.add("log", "op", [&] { return probe(log(pos)); }, {{"a", pos}});
  s.add("square", "op", [&] { return probe(square(a)); }, {{"a", a}});
  s.add("sigmoid", "op", [&] { return probe(sigmoid(a)); }, {{"a", a}});
  s.add("silu", "op", [&] { return probe(silu(a)); }, {{"a", a}});
  s.add("softplus", "op", [&] { return probe(softplus(a)); }, {{"a", a}});
  s.add("mean", "op", [&] { return mean(mul(a, a)); }, {{"a", a}});
  s.add("sum_keep_axis", "op", [&] { return probe(sum_keep_axis(square(a), 1)); }, {{"a", a}});

  auto t = rand({2, 3, 4, n}, rng);
  s.add("reshape + permute", "op",
        [&] { return probe(permute(reshape(t, {6, 4, n}), {2, 0, 1})); }, {{"t", t}});
  s.add("slice + concat", "op",
        [&] { return probe(concat<double>({slice(t, 3, 1, n - 1), square(slice(t, 3, 0, 1))}, 3)); },
        {{"t", t}});
  s.add("pad2d", "op", [&] { return probe(pad2d(t, 1, 0, 2, 1)); }, {{"t", t}});
  std::vector<std::size_t> perm(4 * n);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = (i * 5 + 3) % perm.size();
  if (std::gcd(std::size_t{5}, perm.size()) != 1)
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = perm.size() - 1 - i;
  s.add("reindex_spatial", "op", [&] { return probe(reindex_spatial(t, perm, n, 4)); },
        {{"t", t}});

  auto m1 = rand({2, 3, n}, rng), m2 = rand({2, n, 4}, rng);
  s.add("matmul", "op", [&] { return probe(matmul(m1, m2)); }, {{"a", m1}, {"b", m2}});
  auto W = rand({5, n}, rng), bias = rand({5}, rng);
  s.add("linear", "op", [&] { return probe(linear(m1, W, bias)); },
        {{"x", m1}, {"weight", W}, {"bias", bias}});
  auto img = rand({2, 3, n, n + 1}, rng);
  auto Wc = rand({4, 3}, rng), bc = rand({4}, rng);
  s.add("linear_channels", "op", [&] { return probe(linear_channels(img, Wc, bc)); },
        {{"x", img}, {"weight", Wc}, {"bias", bc}});

  auto k = rand({4, 3, 3, 3}, rng), kb = rand({4}, rng);
  s.add("conv2d", "op", [&] { return probe(conv2d(img, k, kb, {1, 1, 1})); },
        {{"x", img}, {"weight", k}, {"bias", kb}});
  s.add("conv2d stride 2", "op", [&] { return probe(conv2d(img, k, kb, {2, 1, 1})); },
        {{"x", img}, {"weight", k}, {"bias", kb}});
  auto kd = rand({3, 1, 3, 3}, rng), kdb = rand({3}, rng);
  s.add("conv2d depthwise", "op", [&] { return probe(conv2d(img, kd, kdb, {2, 1, 3})); },
        {{"x", img}, {"weight", kd}, {"bias", kdb}});
  auto kt = rand({3, 2, 2, 2}, rng), ktb = rand({2}, rng);
  s.add("conv_transpose2d", "op", [&] { return probe(conv_transpose2d(img, kt, ktb, {2, 0, 1})); },
        {{"x", img}, {"weight", kt}, {"bias", ktb}});

  auto g4 = rand({2, 4, n, n}, rng), gamma = rand({4}, rng, 0.5, 1.5), beta = rand({4}, rng);
  s.add("group_norm", "op", [&] { return probe(group_norm(g4, gamma, beta, 2, 1e-5)); },
        {{"x", g4}, {"gamma", gamma}, {"beta", beta}});
  s.add("layer_norm_channels", "op",
        [&] { return probe(layer_norm_channels(g4, gamma, beta, 1e-5)); },
        {{"x", g4}, {"gamma", gamma}, {"beta", beta}});
  s.add("softmax", "op", [&] { return probe(softmax(g4, 1)); }, {{"x", g4}});
  s.add("adaptive_avg_pool2d", "op", [&] { return probe(adaptive_avg_pool2d(img, 2, 3)); },
        {{"x", img}});
  s.add("adaptive_avg_pool2d (upsampling)", "op",
        [&] { return probe(adaptive_avg_pool2d(img, n + 2, n + 3)); }, {{"x", img}});
  std::vector<std::uint8_t> labels(2 * n * n);
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.index(4));
  s.add("cross_entropy", "op", [&] { return cross_entropy(g4, labels); }, {{"x", g4}});
  s.add("dice_ce_loss", "op", [&] { return dice_ce_loss(g4, labels); }, {{"x", g4}});
}

void attention(Suite& s, std::size_t n, Rng& rng) {
  const std::size_t m = n + 2;
  auto q = rand({2, n, 4}, rng), k = rand({2, m, 4}, rng), v = rand({2, m, 3}, rng);
  auto lam = rand({2}, rng, 0.2, 0.9);
  s.add("diff_softmax", "composite", [&] { return probe(diff_softmax(q, k, v, lam)); },
        {{"q", q}, {"k", k}, {"v", v}, {"lambda", lam}});
  s.add("softmax_attention", "composite", [&] { return probe(softmax_attention(q, k, v)); },
        {{"q", q}, {"k", k}, {"v", v}});
  auto ql = rand({1, 4, n, n}, rng), kl = rand({1, 4, n, n}, rng), vl = rand({1, 4, n, n}, rng);
  s.add("local_attention", "composite",
        [&] { return probe(local_attention(ql, kl, vl, lam, 2, 3)); },
        {{"q", ql}, {"k", kl}, {"v", vl}, {"lambda", lam}});

  AttnConfig cfg;
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.global_pool = 3;
  for (Branch kind : {Branch::kLocal, Branch::kGlobal}) {
    AttnBranch<double> br(cfg, kind, rng);
    ParamList<double> ps;
    br.collect(ps, "p");
    auto x = rand({1, 4, n, n + 1}, rng);
    s.add(kind == Branch::kLocal ? "diff_agg local" : "diff_agg global", "composite",
          [&] { return probe(diff_agg(x, br)); }, with_params({{"x", x}}, ps));
  }
}

void block(Suite& s, std::size_t n, Rng& rng) {
  for (bool ml : {true, false}) {
    BlockConfig cfg;
    cfg.channels = 4;
    cfg.attn.heads = 1;
    cfg.attn.global_pool = 3;
    cfg.use_mamba_macro = ml;
    SamaBlock<double> blk(cfg, rng);
    ParamList<double> ps;
    blk.collect(ps, "b");
    auto x = rand({1, 4, n, n}, rng);
    s.add(ml ? "sama_block" : "sama_block (no macro)", "composite",
          [&] { return probe(blk(x)); }, with_params({{"x", x}}, ps));
  }
}

void ssm(Suite& s, std::size_t n, Rng& rng) {
  SsmConfig cfg;
  cfg.channels = 3;
  cfg.state = 2;
  SsmParams<double> p(cfg, rng);
  ParamList<double> ps;
  p.collect(ps, "ssm");
  auto x = rand({2, 2 * n, 3}, rng);
  s.add("selective_scan", "composite", [&] { return probe(selective_scan(x, p)); },
        with_params({{"x", x}}, ps));

  CrmsmFlags flags;
  CrmsmScale<double> scale(3, flags, cfg, rng);
  ParamList<double> sp;
  scale.collect(sp, "crmsm");
  auto f = rand({1, 3, n, n + 1}, rng);
  s.add("crmsm_scale", "composite", [&] { return probe(scale(f)); }, with_params({{"f", f}}, sp));
  flags.causal_fusion = false;
  flags.use_ssm = false;
  CrmsmScale<double> alt(3, flags, cfg, rng);
  ParamList<double> ap;
  alt.collect(ap, "crmsm");
  s.add("crmsm_scale (conv, concat)", "composite", [&] { return probe(alt(f)); },
        with_params({{"f", f}}, ap));
}

void network(Suite& s, std::size_t n, Rng& rng) {
  PatchEmbed<double> pe(1, 4, rng);
  ParamList<double> pp;
  pe.collect(pp, "embed");
  auto img = rand({1, 1, 8, 8}, rng);
  s.add("patch_embed", "composite", [&] { return probe(pe(img)); }, with_params({{"x", img}}, pp));

  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.stage_depths = {1, 1};
  cfg.channel_multipliers = {1, 2};
  cfg.ssm_state = 2;
  SamaUNet<double> model(cfg, rng.index(1u << 30));
  auto x = rand({1, 1, n, n}, rng);
  std::vector<std::uint8_t> labels(n * n);
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.index(cfg.num_classes));
  s.add("micro network (seg loss)", "model",
        [&] {
          return seg_loss(model.forward(x), labels, n, n, cfg.head_strides(), cfg.ds_weights());
        },
        with_params({{"image", x}}, model.parameters()));
}

}  // namespace

std::vector<GradSuiteRow> run_grad_suite(GradLevel level) {
  Suite s;
  Rng rng(20240611);
  const bool full = level == GradLevel::kFull;
  ops(s, full ? 5 : 3, rng);
  attention(s, full ? 5 : 3, rng);
  block(s, full ? 6 : 4, rng);
  ssm(s, full ? 6 : 3, rng);
  network(s, full ? 24 : 16, rng);
  return s.rows;
}

std::string format_grad_suite(const std::vector<GradSuiteRow>& rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-34s %-10s %9s %12s %9s %8s  %s\n", "check", "group",
                "elements", "max rel err", "tol", "seconds", "result");
  out += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-34s %-10s %9zu %12.3e %9.0e %8.2f  %s\n", r.name.c_str(),
                  r.group.c_str(), r.result.elements, r.result.max_rel_error, r.tolerance,
                  r.seconds, r.pass() ? "PASS" : "FAIL");
    out += line;
    if (!r.pass()) {
      std::snprintf(line, sizeof line, "    worst %s[%zu]: analytic %.6e numeric %.6e\n",
                    r.result.worst_input.c_str(), r.result.worst_index, r.result.worst_analytic,
                    r.result.worst_numeric);
      out += line;
    }
  }
  return out;
}

}  // namespace sama
