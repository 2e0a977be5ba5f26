#include "sama/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace sama {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError(key + ": cannot parse '" + v + "' as a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');)
    out.push_back(parse_number<std::size_t>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

std::string fmt(bool v) { return v ? "true" : "false"; }
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(std::uint64_t v, int) { return std::to_string(v); }

std::string fmt(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SAMA_SIZE(KEY, FIELD)                                                                    \
  Key {                                                                                          \
    KEY, [](RunConfig& c, const std::string& v) { c.FIELD = parse_number<std::size_t>(KEY, v); }, \
        [](const RunConfig& c) { return fmt(c.FIELD); }                                          \
  }
#define SAMA_U64(KEY, FIELD)                                                                       \
  Key {                                                                                            \
    KEY, [](RunConfig& c, const std::string& v) { c.FIELD = parse_number<std::uint64_t>(KEY, v); }, \
        [](const RunConfig& c) { return fmt(c.FIELD, 0); }                                         \
  }
#define SAMA_REAL(KEY, FIELD)                                                               \
  Key {                                                                                     \
    KEY, [](RunConfig& c, const std::string& v) { c.FIELD = parse_number<double>(KEY, v); }, \
        [](const RunConfig& c) { return fmt(c.FIELD); }                                     \
  }
#define SAMA_BOOL(KEY, FIELD)                                                         \
  Key {                                                                               \
    KEY, [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(KEY, v); },     \
        [](const RunConfig& c) { return fmt(c.FIELD); }                               \
  }
#define SAMA_LIST(KEY, FIELD)                                                         \
  Key {                                                                               \
    KEY, [](RunConfig& c, const std::string& v) { c.FIELD = parse_list(KEY, v); },     \
        [](const RunConfig& c) { return fmt(c.FIELD); }                               \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      SAMA_U64("seed", seed),
      SAMA_SIZE("model.in_channels", model.in_channels),
      SAMA_SIZE("model.num_classes", model.num_classes),
      SAMA_SIZE("model.base_channels", model.base_channels),
      SAMA_LIST("model.stage_depths", model.stage_depths),
      SAMA_LIST("model.channel_multipliers", model.channel_multipliers),
      SAMA_SIZE("model.expansion", model.expansion),
      SAMA_SIZE("model.ffn_ratio", model.ffn_ratio),
      SAMA_SIZE("model.heads", model.attn.heads),
      SAMA_SIZE("model.local_window", model.attn.local_window),
      SAMA_SIZE("model.global_pool", model.attn.global_pool),
      SAMA_REAL("model.lambda_init", model.attn.lambda_init),
      SAMA_BOOL("model.positional_encoding", model.attn.positional_encoding),
      SAMA_BOOL("model.post_norm", model.attn.post_norm),
      SAMA_SIZE("model.ssm_state", model.ssm_state),
      SAMA_BOOL("model.ssm_static", model.ssm_static),
      SAMA_BOOL("model.deep_supervision", model.deep_supervision),
      SAMA_BOOL("model.crmsm_on_bottleneck", model.crmsm_on_bottleneck),
      SAMA_BOOL("ablation.use_mamba_macro", model.use_mamba_macro),
      SAMA_BOOL("ablation.use_differential", model.use_differential),
      SAMA_BOOL("ablation.use_crmsm", model.use_crmsm),
      SAMA_BOOL("ablation.multi_view", model.crmsm.multi_view),
      SAMA_BOOL("ablation.use_ssm", model.crmsm.use_ssm),
      SAMA_BOOL("ablation.causal_fusion", model.crmsm.causal_fusion),
      Key{"ablation.flip",
          [](RunConfig& c, const std::string& v) {
            if (v == "reverse")
              c.model.crmsm.flip = FlipMode::kReverse;
            else if (v == "mirror")
              c.model.crmsm.flip = FlipMode::kMirror;
            else
              throw ConfigError("ablation.flip: expected reverse or mirror, got '" + v + "'");
          },
          [](const RunConfig& c) {
            return std::string(c.model.crmsm.flip == FlipMode::kMirror ? "mirror" : "reverse");
          }},
      SAMA_SIZE("train.epochs", train.epochs),
      SAMA_SIZE("train.iters_per_epoch", train.iters_per_epoch),
      SAMA_SIZE("train.batch_size", train.batch_size),
      SAMA_REAL("train.lr", train.adam.lr),
      SAMA_REAL("train.weight_decay", train.adam.weight_decay),
      SAMA_REAL("train.beta1", train.adam.beta1),
      SAMA_REAL("train.beta2", train.adam.beta2),
      SAMA_REAL("train.eps", train.adam.eps),
      SAMA_REAL("train.dice_smooth", train.dice_smooth),
      SAMA_BOOL("train.batch_dice", train.batch_dice),
      SAMA_SIZE("data.count", data.count),
      SAMA_SIZE("data.height", data.height),
      SAMA_SIZE("data.width", data.width),
      SAMA_SIZE("data.num_classes", data.num_classes),
      SAMA_SIZE("data.min_shapes", data.min_shapes),
      SAMA_SIZE("data.max_shapes", data.max_shapes),
      SAMA_REAL("data.noise", data.noise),
  };
  return table;
}

#undef SAMA_SIZE
#undef SAMA_U64
#undef SAMA_REAL
#undef SAMA_BOOL
#undef SAMA_LIST

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.model.stage_depths = {1, 1, 1, 1};
  return c;
}

void RunConfig::apply_seed() {
  train.seed = seed;
  data.seed = seed;
}

void RunConfig::validate() const {
  model.validate();
  if (train.epochs == 0 || train.iters_per_epoch == 0 || train.batch_size == 0)
    throw ConfigError("train: epochs, iters_per_epoch and batch_size must be positive");
  if (train.adam.lr < 0.0) throw ConfigError("train.lr must be >= 0");
  if (data.num_classes > model.num_classes)
    throw ConfigError("data.num_classes (" + std::to_string(data.num_classes) +
                      ") exceeds model.num_classes (" + std::to_string(model.num_classes) + ")");
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : keys())
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  throw ConfigError("unknown key '" + key + "'");
}

void parse_config(const std::string& text, RunConfig& cfg, const std::string& origin) {
  std::istringstream in(text);
  std::string section;
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    try {
      set_config_value(cfg, key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

void load_config(const std::filesystem::path& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  parse_config(ss.str(), cfg, path.string());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.push_back(k.name);
  return out;
}

std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace sama
