#pragma once

// Wall-clock comparison of the sequential and parallel selective-scan kernels.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace textmamba {

struct ScanBenchRow {
  std::size_t length = 0;
  double sequential_ns = 0.0;  // best total over the repetitions
  double parallel_ns = 0.0;
  double max_relative_deviation = 0.0;  // parallel vs sequential, f32
};

/// f32 scans (no cache) on seeded inputs; deviation is max|par - seq| / max|seq|.
std::vector<ScanBenchRow> bench_scan(const std::vector<std::size_t>& lengths,
                                     std::size_t state_dim, std::size_t channels,
                                     std::size_t reps, std::uint64_t seed = 7);

}  // namespace textmamba
