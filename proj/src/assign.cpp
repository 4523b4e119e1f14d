#include "boxseg/assign.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace boxseg {

namespace {

double dist_sq(const Vec3& a, const Vec3& b) {
  double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

std::vector<std::size_t> farthest_point_sampling(const std::vector<Vec3>& coords, std::size_t n,
                                                 std::size_t start) {
  std::size_t m = coords.size();
  if (n < 1 || n > m)
    throw std::invalid_argument("farthest_point_sampling: need 1 <= n <= " + std::to_string(m) +
                                ", got n=" + std::to_string(n));
  if (start >= m) throw std::invalid_argument("farthest_point_sampling: start index out of range");
  for (const Vec3& p : coords)
    for (double v : p)
      if (!std::isfinite(v))
        throw std::invalid_argument("farthest_point_sampling: non-finite coordinate");

  std::vector<std::size_t> selected;
  selected.reserve(n);
  selected.push_back(start);

  std::vector<double> min_dist(m, std::numeric_limits<double>::infinity());
  for (std::size_t t = 1; t < n; ++t) {
    const Vec3& last = coords[selected.back()];
    std::size_t farthest = 0;
    double best = -1.0;
    for (std::size_t j = 0; j < m; ++j) {
      min_dist[j] = std::min(min_dist[j], dist_sq(coords[j], last));
      if (min_dist[j] > best) {
        best = min_dist[j];
        farthest = j;
      }
    }
    selected.push_back(farthest);
    min_dist[farthest] = -1.0;  // already selected; never the max again
  }
  return selected;
}

Assignment hungarian(const CostMatrix& cost) {
  std::size_t k = cost.rows, m = cost.cols;
  if (k == 0) throw std::invalid_argument("hungarian: empty cost matrix");
  if (k > m)
    throw std::invalid_argument("hungarian: need rows <= cols, got " + std::to_string(k) + " x " +
                                std::to_string(m));
  for (double v : cost.entries)
    if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost entry");

  const double inf = std::numeric_limits<double>::infinity();
  // 1-indexed potentials; p[j] = row matched to column j, 0 = free.
  std::vector<double> u(k + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);

  for (std::size_t i = 1; i <= k; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> min_slack(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        double slack = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (slack < min_slack[j]) {
          min_slack[j] = slack;
          way[j] = j0;
        }
        if (min_slack[j] < delta) {
          delta = min_slack[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          min_slack[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment out;
  out.query_for_instance.assign(k, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) out.query_for_instance[p[j] - 1] = j - 1;
  for (std::size_t i = 0; i < k; ++i) out.total_cost += cost.at(i, out.query_for_instance[i]);
  return out;
}

}  // namespace boxseg
