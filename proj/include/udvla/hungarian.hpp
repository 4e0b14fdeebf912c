#pragma once

#include <vector>

namespace udvla {

struct AssignmentResult {
  std::vector<int> col_of_row;  // one column per row
  double total_cost = 0.0;
};

// Exact minimal-cost one-to-one assignment on a rectangular cost matrix with
// rows <= cols (O(rows^2 * cols) potentials method). Throws if rows > cols.
AssignmentResult hungarian(const std::vector<std::vector<double>>& cost);

// Exhaustive minimum over all row->col injections; oracle for small instances.
double brute_force_assignment_cost(const std::vector<std::vector<double>>& cost);

}  // namespace udvla
