#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace hikfs::testing {

/// Minimum within-cluster sum of squares over every assignment of the
/// points to at most r clusters (exhaustive, r^n assignments).
inline double optimal_sse(const std::vector<std::vector<double>>& points, std::size_t r) {
  const std::size_t n = points.size();
  if (n <= r) return 0.0;
  const std::size_t d = points[0].size();
  std::vector<std::size_t> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<std::vector<double>> sum(r, std::vector<double>(d, 0.0));
    std::vector<double> count(r, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      count[label[i]] += 1.0;
      for (std::size_t k = 0; k < d; ++k) sum[label[i]][k] += points[i][k];
    }
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = points[i][k] - sum[label[i]][k] / count[label[i]];
        sse += diff * diff;
      }
    best = std::min(best, sse);
    std::size_t pos = 0;
    while (pos < n && ++label[pos] == r) label[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

}  // namespace hikfs::testing
