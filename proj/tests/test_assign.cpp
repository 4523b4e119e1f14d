#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "boxseg/assign.hpp"
#include "boxseg/common.hpp"
#include "doctest.h"

using namespace boxseg;

namespace {

double dist_sq(const Vec3& a, const Vec3& b) {
  double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// Exhaustive minimum over all injective row -> column maps.
double brute_force_min_cost(const CostMatrix& cost) {
  std::vector<bool> used(cost.cols, false);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, double)> walk = [&](std::size_t row, double acc) {
    if (row == cost.rows) {
      best = std::min(best, acc);
      return;
    }
    for (std::size_t col = 0; col < cost.cols; ++col) {
      if (used[col]) continue;
      used[col] = true;
      walk(row + 1, acc + cost.at(row, col));
      used[col] = false;
    }
  };
  walk(0, 0.0);
  return best;
}

// Post-hoc check that each pick maximizes min-distance to the prefix,
// with ties resolved to the smallest index.
void verify_fps(const std::vector<Vec3>& coords, const std::vector<std::size_t>& picks) {
  std::vector<double> min_dist(coords.size(), std::numeric_limits<double>::infinity());
  std::vector<bool> selected(coords.size(), false);
  selected[picks[0]] = true;
  for (std::size_t t = 1; t < picks.size(); ++t) {
    for (std::size_t j = 0; j < coords.size(); ++j)
      min_dist[j] = std::min(min_dist[j], dist_sq(coords[j], coords[picks[t - 1]]));
    std::size_t best = coords.size();
    for (std::size_t j = 0; j < coords.size(); ++j) {
      if (selected[j]) continue;
      if (best == coords.size() || min_dist[j] > min_dist[best]) best = j;
    }
    REQUIRE(picks[t] == best);
    selected[picks[t]] = true;
  }
}

}  // namespace

TEST_CASE("fps on unit-square corners") {
  std::vector<Vec3> corners{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  auto picks = farthest_point_sampling(corners, 4, 0);
  CHECK(picks[0] == 0);
  CHECK(picks[1] == 3);  // the diagonal corner at distance sqrt(2)
  std::vector<std::size_t> sorted = picks;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3});
  verify_fps(corners, picks);
}

TEST_CASE("fps base cases and errors") {
  std::vector<Vec3> pts{{0, 0, 0}, {1, 2, 3}, {4, 5, 6}};
  CHECK(farthest_point_sampling(pts, 1, 2) == std::vector<std::size_t>{2});

  auto all = farthest_point_sampling(pts, 3, 0);
  std::sort(all.begin(), all.end());
  CHECK(all == std::vector<std::size_t>{0, 1, 2});

  CHECK_THROWS_AS(farthest_point_sampling(pts, 4, 0), std::invalid_argument);
  CHECK_THROWS_AS(farthest_point_sampling(pts, 2, 3), std::invalid_argument);
}

TEST_CASE("fps picks maximize min-distance on random point sets") {
  Rng rng(99);
  for (int trial = 0; trial < 30; ++trial) {
    std::size_t m = 20 + rng.uniform_index(200);
    std::vector<Vec3> coords(m);
    for (Vec3& p : coords)
      for (double& v : p) v = rng.uniform();
    std::size_t n = 1 + rng.uniform_index(std::min<std::size_t>(m, 32));
    verify_fps(coords, farthest_point_sampling(coords, n, 0));
  }
}

TEST_CASE("hungarian solves small hand cases") {
  CostMatrix zero_diag = CostMatrix::zeros(3, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) zero_diag.at(i, j) = i == j ? 0.0 : 1.0;
  Assignment a = hungarian(zero_diag);
  CHECK(a.total_cost == 0.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.query_for_instance[i] == i);

  // enumerating both permutations: 1+1=2 beats 2+2=4
  CostMatrix two{2, 2, {1.0, 2.0, 2.0, 1.0}};
  Assignment b = hungarian(two);
  CHECK(b.total_cost == 2.0);
  CHECK(b.query_for_instance == std::vector<std::size_t>{0, 1});
}

TEST_CASE("hungarian rejects bad inputs") {
  CHECK_THROWS_AS(hungarian(CostMatrix::zeros(3, 2)), std::invalid_argument);
  CostMatrix bad = CostMatrix::zeros(1, 2);
  bad.at(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(hungarian(bad), std::invalid_argument);
}

TEST_CASE("hungarian equals brute force on random rectangular costs") {
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    std::size_t k = 1 + rng.uniform_index(7);
    std::size_t m = k + rng.uniform_index(9 - k + 1);
    CostMatrix cost = CostMatrix::zeros(k, m);
    // grid-valued costs keep permutation sums exact in doubles
    for (double& v : cost.entries) v = static_cast<double>(rng.uniform_int(-64, 192)) / 16.0;
    Assignment a = hungarian(cost);
    CHECK(a.total_cost == brute_force_min_cost(cost));

    std::vector<bool> used(m, false);
    for (std::size_t q : a.query_for_instance) {
      CHECK(!used[q]);
      used[q] = true;
    }
  }
}
