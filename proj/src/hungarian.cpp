#include "udvla/hungarian.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace udvla {

AssignmentResult hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  const int m = static_cast<int>(cost[0].size());
  if (n > m)
    throw std::runtime_error("hungarian: more rows than columns (" +
                             std::to_string(n) + " > " + std::to_string(m) + ")");
  const double inf = std::numeric_limits<double>::infinity();

  // 1-indexed potentials formulation
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  AssignmentResult res;
  res.col_of_row.assign(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) res.col_of_row[p[j] - 1] = j - 1;
  for (int i = 0; i < n; ++i) res.total_cost += cost[i][res.col_of_row[i]];
  return res;
}

namespace {
void brute_rec(const std::vector<std::vector<double>>& cost, int row,
               std::vector<char>& used, double acc, double& best) {
  const int n = static_cast<int>(cost.size());
  if (row == n) {
    best = std::min(best, acc);
    return;
  }
  const int m = static_cast<int>(cost[0].size());
  for (int j = 0; j < m; ++j) {
    if (used[j]) continue;
    used[j] = 1;
    brute_rec(cost, row + 1, used, acc + cost[row][j], best);
    used[j] = 0;
  }
}
}  // namespace

double brute_force_assignment_cost(const std::vector<std::vector<double>>& cost) {
  if (cost.empty()) return 0.0;
  std::vector<char> used(cost[0].size(), 0);
  double best = std::numeric_limits<double>::infinity();
  brute_rec(cost, 0, used, 0.0, best);
  return best;
}

}  // namespace udvla
