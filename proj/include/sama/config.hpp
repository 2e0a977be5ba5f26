#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "sama/data.hpp"
#include "sama/model.hpp"
#include "sama/train.hpp"

namespace sama {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Everything a run needs. `seed` drives model init, batch order and the
/// synthetic generator; it overrides the per-part seeds when applied.
struct RunConfig {
  ModelConfig model;
  TrainOptions train;
  SyntheticSpec data;
  std::uint64_t seed = 0;

  /// Desk-scale defaults: toy network (depths 1,1,1,1) on 64x64 images.
  static RunConfig defaults();
  void apply_seed();
  void validate() const;
};

/// Plain text, one `key = value` per line. Keys are dotted (`model.heads`);
/// a `[model]` line prefixes the keys that follow it. `#` starts a comment.
/// Unknown keys and malformed values throw ConfigError naming the line.
void parse_config(const std::string& text, RunConfig& cfg, const std::string& origin = "config");
void load_config(const std::filesystem::path& path, RunConfig& cfg);

/// Sets one dotted key; the same table the parser uses.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Every recognized key, in the order dump_config writes them.
std::vector<std::string> config_keys();

/// Serializes every key; parse_config of the result reproduces `cfg`.
std::string dump_config(const RunConfig& cfg);

}  // namespace sama
