#pragma once

// Test-only oracles, kept independent of the implementation paths they
// check: brute-force balanced assignment by exhaustive enumeration, an
// O(n^3) Hungarian solver for mid-size instances, a one-sided Jacobi SVD
// (column orthogonalization, a different route than the Gram
// eigendecomposition used by the projector), and a count-based smoothed KL
// divergence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "clusterlm/linalg.hpp"

namespace clusterlm::testing {

// Minimum total distance over every assignment with the given cluster
// sizes, by enumerating all distinct permutations of the size multiset.
inline double brute_force_balanced_cost(const Matrix& points, const Matrix& centers,
                                        const std::vector<std::size_t>& sizes) {
  std::vector<std::uint32_t> labels;
  for (std::size_t j = 0; j < sizes.size(); ++j)
    labels.insert(labels.end(), sizes[j], static_cast<std::uint32_t>(j));
  std::sort(labels.begin(), labels.end());
  double best = 1e300;
  do {
    double cost = 0.0;
    for (std::size_t d = 0; d < points.rows; ++d)
      cost += euclidean_distance(points.row(d), centers.row(labels[d]));
    best = std::min(best, cost);
  } while (std::next_permutation(labels.begin(), labels.end()));
  return best;
}

// All ways to hand the D mod K extra documents to distinct clusters.
inline std::vector<std::vector<std::size_t>> balanced_size_splits(std::size_t n,
                                                                  std::size_t k) {
  std::vector<std::vector<std::size_t>> splits;
  std::vector<char> take_extra(k, 0);
  std::fill(take_extra.begin(), take_extra.begin() + static_cast<std::ptrdiff_t>(n % k), 1);
  std::sort(take_extra.begin(), take_extra.end());
  do {
    std::vector<std::size_t> sizes(k, n / k);
    for (std::size_t j = 0; j < k; ++j) sizes[j] += take_extra[j];
    splits.push_back(std::move(sizes));
  } while (std::next_permutation(take_extra.begin(), take_extra.end()));
  return splits;
}

// Optimum over every size split whose range is at most 1.
inline double brute_force_optimal_balanced_cost(const Matrix& points,
                                                const Matrix& centers) {
  double best = 1e300;
  for (const auto& sizes : balanced_size_splits(points.rows, centers.rows))
    best = std::min(best, brute_force_balanced_cost(points, centers, sizes));
  return best;
}

// Classic Hungarian algorithm with potentials; minimizes over a square
// cost matrix and returns row -> column.
inline std::vector<int> hungarian_min(const std::vector<std::vector<double>>& cost) {
  int n = static_cast<int>(cost.size());
  const double kInf = 1e300;
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
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
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Optimal balanced cost via Hungarian on the slot-expanded matrix, taking
// the best over all floor/ceil size splits.
inline double hungarian_balanced_cost(const Matrix& points, const Matrix& centers,
                                      const std::vector<std::size_t>& sizes) {
  std::size_t n = points.rows;
  std::vector<std::uint32_t> slot_cluster;
  for (std::size_t j = 0; j < sizes.size(); ++j)
    slot_cluster.insert(slot_cluster.end(), sizes[j], static_cast<std::uint32_t>(j));
  std::vector<std::vector<double>> cost(n, std::vector<double>(n));
  for (std::size_t d = 0; d < n; ++d)
    for (std::size_t s = 0; s < n; ++s)
      cost[d][s] = euclidean_distance(points.row(d), centers.row(slot_cluster[s]));
  std::vector<int> match = hungarian_min(cost);
  double total = 0.0;
  for (std::size_t d = 0; d < n; ++d) total += cost[d][static_cast<std::size_t>(match[d])];
  return total;
}

inline double hungarian_optimal_balanced_cost(const Matrix& points,
                                              const Matrix& centers) {
  double best = 1e300;
  for (const auto& sizes : balanced_size_splits(points.rows, centers.rows))
    best = std::min(best, hungarian_balanced_cost(points, centers, sizes));
  return best;
}

// One-sided Jacobi SVD: rotates column pairs until orthogonal; singular
// values are the final column norms, descending.
inline std::vector<double> singular_values_one_sided(Matrix a) {
  const std::size_t m = a.rows, n = a.cols;
  bool changed = true;
  for (int sweep = 0; sweep < 128 && changed; ++sweep) {
    changed = false;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          double x = a.at(i, p), y = a.at(i, q);
          app += x * x;
          aqq += y * y;
          apq += x * y;
        }
        if (std::fabs(apq) <= 1e-14 * std::sqrt(app * aqq) || apq == 0.0) continue;
        changed = true;
        double tau = (aqq - app) / (2.0 * apq);
        double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        double c = 1.0 / std::sqrt(1.0 + t * t), s = t * c;
        for (std::size_t i = 0; i < m; ++i) {
          double x = a.at(i, p), y = a.at(i, q);
          a.at(i, p) = c * x - s * y;
          a.at(i, q) = s * x + c * y;
        }
      }
    }
  }
  std::vector<double> sv(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) sum += a.at(i, j) * a.at(i, j);
    sv[j] = std::sqrt(sum);
  }
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  return sv;
}

// Add-one smoothed KL divergence between two empirical unigram
// distributions given as token -> count maps.
inline double smoothed_kl(const std::map<std::string, std::size_t>& p_counts,
                          const std::map<std::string, std::size_t>& q_counts) {
  std::map<std::string, std::size_t> support;
  for (const auto& [tok, c] : p_counts) support[tok] = 0;
  for (const auto& [tok, c] : q_counts) support[tok] = 0;
  double p_total = 0.0, q_total = 0.0;
  for (const auto& [tok, zero] : support) {
    p_total += static_cast<double>(p_counts.count(tok) ? p_counts.at(tok) : 0) + 1.0;
    q_total += static_cast<double>(q_counts.count(tok) ? q_counts.at(tok) : 0) + 1.0;
  }
  double kl = 0.0;
  for (const auto& [tok, zero] : support) {
    double p = (static_cast<double>(p_counts.count(tok) ? p_counts.at(tok) : 0) + 1.0) / p_total;
    double q = (static_cast<double>(q_counts.count(tok) ? q_counts.at(tok) : 0) + 1.0) / q_total;
    kl += p * std::log(p / q);
  }
  return kl;
}

}  // namespace clusterlm::testing
