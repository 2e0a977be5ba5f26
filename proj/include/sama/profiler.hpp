#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sama/model.hpp"

namespace sama {

/// One layer's analytic cost for a single image. `name` is the parameter
/// prefix of the layer, so the row's params equal the scalars stored under it.
struct LayerRow {
  std::string name;
  std::string kind;  // conv, linear, norm, param, attention, scan
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct FlopsReport {
  std::size_t height = 0, width = 0;
  std::size_t padded_height = 0, padded_width = 0;
  std::vector<LayerRow> rows;

  std::uint64_t total_params() const;
  std::uint64_t total_macs() const;
  std::uint64_t macs_of(const std::string& kind) const;
  /// Rows whose name equals `prefix` or starts with `prefix` followed by '.'.
  std::uint64_t params_under(const std::string& prefix) const;
  std::uint64_t macs_under(const std::string& prefix) const;

  std::string table() const;
  std::string csv() const;
};

/// Counts follow the forward pass of SamaUNet on one [1,in,H,W] image:
///   linear      in*out per token (bias free of MACs)
///   conv        out*(in/groups)*kh*kw per output pixel
///   transposed  in*out*k*k per input pixel
///   attention   q.k plus a.v per head: local sums the valid window taps,
///               global uses P*P pooled keys
///   scan        L*C*N per view
/// Norms, activations and elementwise ops are not counted.
FlopsReport profile(const ModelConfig& cfg, std::size_t height, std::size_t width);

/// Scalars stored in a checkpoint directory, read from the tensor files listed
/// in its manifest.
std::uint64_t checkpoint_scalars(const std::filesystem::path& dir);

}  // namespace sama
