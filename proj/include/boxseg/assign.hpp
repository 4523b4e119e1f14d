#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace boxseg {

using Vec3 = std::array<double, 3>;

// Greedy farthest point sampling. First pick is `start`; every later pick
// maximizes the minimum squared Euclidean distance to the selected prefix,
// ties broken by smallest index.
std::vector<std::size_t> farthest_point_sampling(const std::vector<Vec3>& coords, std::size_t n,
                                                 std::size_t start);

// Matching costs between K instances (rows) and N_Q queries (columns).
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> entries;  // row-major

  double at(std::size_t r, std::size_t c) const { return entries[r * cols + c]; }
  double& at(std::size_t r, std::size_t c) { return entries[r * cols + c]; }

  static CostMatrix zeros(std::size_t rows, std::size_t cols) {
    return CostMatrix{rows, cols, std::vector<double>(rows * cols, 0.0)};
  }
};

struct Assignment {
  std::vector<std::size_t> query_for_instance;  // injective, one entry per row
  double total_cost = 0.0;
};

// Exact minimum-cost bipartite matching (potentials + shortest augmenting
// path). Requires rows <= cols and finite entries.
Assignment hungarian(const CostMatrix& cost);

}  // namespace boxseg
