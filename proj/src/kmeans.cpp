#include "udvla/kmeans.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "udvla/rng.hpp"

namespace udvla {

namespace {
double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double c = a[i] - b[i];
    d += c * c;
  }
  return d;
}
}  // namespace

KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k,
                    int iters, std::uint64_t seed) {
  const int n = static_cast<int>(points.size());
  if (n < k)
    throw std::runtime_error("kmeans: insufficient samples, n=" +
                             std::to_string(n) + " < k=" + std::to_string(k));
  if (iters < 1) throw std::runtime_error("kmeans: iters must be >= 1");
  const std::size_t dim = points[0].size();

  KMeansResult res;
  Rng rng(seed);
  for (int idx : rng.sample_without_replacement(n, k))
    res.centroids.push_back(points[idx]);
  res.assignment.assign(n, 0);

  for (int iter = 0; iter < iters; ++iter) {
    // assignment step
    double objective = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int best_c = 0;
      for (int c = 0; c < k; ++c) {
        const double d = sq_dist(points[i], res.centroids[c]);
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      res.assignment[i] = best_c;
      objective += best;
    }
    res.objective = objective;
    res.objective_per_iter.push_back(objective);

    // update step
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < dim; ++d) sums[res.assignment[i]][d] += points[i][d];
      ++counts[res.assignment[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // re-seed to the point farthest from its current centroid
        double worst = -1.0;
        int worst_i = 0;
        for (int i = 0; i < n; ++i) {
          const double d = sq_dist(points[i], res.centroids[res.assignment[i]]);
          if (d > worst) {
            worst = d;
            worst_i = i;
          }
        }
        res.centroids[c] = points[worst_i];
      } else {
        for (std::size_t d = 0; d < dim; ++d)
          res.centroids[c][d] = sums[c][d] / counts[c];
      }
    }
  }

  // final assignment against the updated centroids
  double objective = 0.0;
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_c = 0;
    for (int c = 0; c < k; ++c) {
      const double d = sq_dist(points[i], res.centroids[c]);
      if (d < best) {
        best = d;
        best_c = c;
      }
    }
    res.assignment[i] = best_c;
    objective += best;
  }
  res.objective = objective;
  res.objective_per_iter.push_back(objective);
  return res;
}

}  // namespace udvla
