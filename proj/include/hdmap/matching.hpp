#pragma once

#include <cstddef>
#include <vector>

namespace hdmap {

/// Dense row-major cost matrix, rows = ground truths, cols = predictions.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct MatchResult {
  /// assignment[i] is the prediction matched to ground truth i.
  std::vector<std::size_t> assignment;
  /// Sum of pair costs in ground-truth order.
  double total_cost = 0.0;
  std::vector<double> pair_costs;
};

/// Minimum-cost injective assignment of every row to a distinct column
/// (Kuhn-Munkres with potentials, O(rows^2 * cols)). Requires rows <= cols.
MatchResult solve_assignment(const CostMatrix& cost);

/// Sum of cost.at(i, assignment[i]) in row order.
double assignment_cost(const CostMatrix& cost, const std::vector<std::size_t>& assignment);

}  // namespace hdmap
