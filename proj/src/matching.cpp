#include "hdmap/matching.hpp"

#include <cmath>
#include <limits>

#include "hdmap/geometry.hpp"

namespace hdmap {

double assignment_cost(const CostMatrix& cost, const std::vector<std::size_t>& assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    total += cost.at(i, assignment[i]);
  }
  return total;
}

MatchResult solve_assignment(const CostMatrix& cost) {
  const std::size_t n = cost.rows;
  const std::size_t m = cost.cols;
  if (n > m) {
    throw MapError("hungarian_match: more ground truths (" + std::to_string(n) +
                   ") than predictions (" + std::to_string(m) + ")");
  }
  if (cost.values.size() != n * m) {
    throw MapError("hungarian_match: cost matrix size mismatch");
  }
  for (double v : cost.values) {
    if (!std::isfinite(v)) {
      throw MapError("hungarian_match: non-finite cost");
    }
  }
  MatchResult result;
  if (n == 0) {
    return result;
  }

  // 1-based potentials formulation; column 0 is a virtual sink.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  result.assignment.assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (owner[j] != 0) {
      result.assignment[owner[j] - 1] = j - 1;
    }
  }
  result.pair_costs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    result.pair_costs[i] = cost.at(i, result.assignment[i]);
  }
  result.total_cost = assignment_cost(cost, result.assignment);
  return result;
}

}  // namespace hdmap
