#pragma once

#include <string>
#include <vector>

#include "sama/gradcheck.hpp"

namespace sama {

struct GradSuiteRow {
  std::string name;
  std::string group;  // op, composite, model
  double tolerance = 0.0;
  GradCheckResult result;
  double seconds = 0.0;

  bool pass() const { return result.max_rel_error < tolerance; }
};

enum class GradLevel { kMicro, kFull };

/// Finite-difference checks at 64 bits of every differentiable op, each
/// composite module and the micro network. Ops and composites must stay under
/// 1e-4 relative error, the network under 1e-3. kFull uses larger extents.
std::vector<GradSuiteRow> run_grad_suite(GradLevel level);

std::string format_grad_suite(const std::vector<GradSuiteRow>& rows);

}  // namespace sama
