#pragma once

#include <cstdint>

namespace sama {

/// Per-thread multiply-accumulate counters bumped by the attention and scan
/// kernels as they execute. Used to measure cost scaling empirically.
struct OpCounters {
  std::uint64_t attention_macs = 0;
  std::uint64_t scan_macs = 0;

  static OpCounters& local() {
    thread_local OpCounters counters;
    return counters;
  }
  static void reset() { local() = OpCounters{}; }
};

}  // namespace sama
