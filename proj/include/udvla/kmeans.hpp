#pragma once

#include <cstdint>
#include <vector>

namespace udvla {

struct KMeansResult {
  std::vector<std::vector<double>> centroids;  // k x dim
  std::vector<int> assignment;                 // n
  double objective = 0.0;                      // sum of squared distances
  std::vector<double> objective_per_iter;
};

// Lloyd's algorithm. Initial centroids are a seeded uniform sample without
// replacement; empty clusters are re-seeded to the point farthest from its
// centroid. Throws if n < k.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k,
                    int iters, std::uint64_t seed);

}  // namespace udvla
