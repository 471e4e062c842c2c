#pragma once

// Balanced k-means with an auction-based E-step, greedy prediction, the
// unbalanced and random ablations, and clustering-quality analyses.
//
// The assignment objective maximizes sum_d -dist(center[a_d], w_d) subject
// to near-equal cluster sizes (floor/ceil of D/K). Distance is plain
// Euclidean by default; squared mode sits behind a config flag. The M-step
// is the cluster mean in both modes.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clusterlm/auction.hpp"
#include "clusterlm/common.hpp"
#include "clusterlm/linalg.hpp"
#include "clusterlm/sha256.hpp"

namespace clusterlm::cluster {

enum class DistanceMode { euclidean, squared_euclidean };

inline double point_distance(std::span<const double> a, std::span<const double> b,
                             DistanceMode mode) {
  double sq = squared_distance(a, b);
  return mode == DistanceMode::euclidean ? std::sqrt(sq) : sq;
}

struct Assignment {
  std::vector<std::uint32_t> cluster_of;
  std::uint32_t k = 0;
  std::optional<double> cost;  // total distance objective, when known

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> out(k, 0);
    for (std::uint32_t c : cluster_of) ++out[c];
    return out;
  }
};

struct ClusterModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  Matrix centers;  // k x dim
  struct FitInfo {
    std::size_t iterations = 0;
    double final_shift = 0.0;
    bool balanced = true;
    std::uint64_t seed = 0;
    std::vector<double> objective;  // per-iteration E-step cost
  } fit;
};

struct AssignConfig {
  DistanceMode mode = DistanceMode::euclidean;
  double grid = 0.0;  // auction rounding grid; 0 = auto
};

inline void check_finite(const Matrix& m, const char* what) {
  for (double v : m.data)
    if (!std::isfinite(v)) fail_validation(std::string(what) + ": non-finite values");
}

inline double assignment_cost(const Matrix& points, const Matrix& centers,
                              const std::vector<std::uint32_t>& cluster_of,
                              DistanceMode mode) {
  double total = 0.0;
  for (std::size_t d = 0; d < points.rows; ++d)
    total += point_distance(points.row(d), centers.row(cluster_of[d]), mode);
  return total;
}

// Balanced E-step: cluster sizes are floor(D/K) or ceil(D/K), and which
// clusters take the extra document is part of the optimization. When D is
// not divisible by K the problem is padded into a plain assignment: every
// cluster contributes a floor-capacity core group plus one flex slot, and
// K - (D mod K) dummy bidders (flex-only, benefit 0) soak up the flex
// slots of the clusters that stay at floor size. A swap argument shows a
// core-slot penalty of 2x the benefit spread keeps dummies out of cores at
// any epsilon-optimum.
inline Assignment balanced_assign(const Matrix& points, const Matrix& centers,
                                  const AssignConfig& config = {}) {
  const std::size_t n = points.rows;
  const std::size_t k = centers.rows;
  if (k == 0 || n < k) fail_validation("balanced_assign: need D >= K >= 1");
  if (points.cols != centers.cols)
    fail_validation("balanced_assign: dimension mismatch");
  check_finite(points, "balanced_assign");
  check_finite(centers, "balanced_assign");

  std::vector<double> distances(n * k);
  double min_benefit = 0.0, max_benefit = 0.0;
  for (std::size_t d = 0; d < n; ++d)
    for (std::size_t j = 0; j < k; ++j) {
      double b = -point_distance(points.row(d), centers.row(j), config.mode);
      distances[d * k + j] = b;
      min_benefit = std::min(min_benefit, b);
      max_benefit = std::max(max_benefit, b);
    }

  AuctionOptions opts;
  opts.grid = config.grid;

  Assignment assignment;
  assignment.k = static_cast<std::uint32_t>(k);

  const std::size_t extra = n % k;
  if (extra == 0) {
    std::vector<std::size_t> capacities(k, n / k);
    AuctionResult result = solve_balanced_auction(distances, n, k, capacities, opts);
    assignment.cluster_of = std::move(result.cluster_of);
    assignment.cost = -result.benefit;
    return assignment;
  }

  const std::size_t dummies = k - extra;
  const std::size_t bidders = n + dummies;
  const std::size_t groups = 2 * k;  // core_0..core_{k-1}, flex_0..flex_{k-1}
  const double core_penalty = 2.0 * (max_benefit - min_benefit) + 1.0;
  std::vector<std::size_t> capacities(groups, 1);
  for (std::size_t j = 0; j < k; ++j) capacities[j] = n / k;
  std::vector<double> benefits(bidders * groups);
  for (std::size_t d = 0; d < n; ++d)
    for (std::size_t j = 0; j < k; ++j) {
      benefits[d * groups + j] = distances[d * k + j];
      benefits[d * groups + k + j] = distances[d * k + j];
    }
  for (std::size_t d = n; d < bidders; ++d)
    for (std::size_t j = 0; j < k; ++j) {
      benefits[d * groups + j] = min_benefit - core_penalty;
      benefits[d * groups + k + j] = 0.0;
    }

  AuctionResult result = solve_balanced_auction(benefits, bidders, groups, capacities, opts);
  assignment.cluster_of.resize(n);
  double cost = 0.0;
  for (std::size_t d = 0; d < n; ++d) {
    std::uint32_t group = result.cluster_of[d];
    std::uint32_t cluster = group < k ? group : group - static_cast<std::uint32_t>(k);
    assignment.cluster_of[d] = cluster;
    cost += -distances[d * k + cluster];
  }
  assignment.cost = cost;
  for (std::size_t size : assignment.sizes())
    if (size != n / k && size != n / k + 1)
      fail_runtime("balanced_assign: cluster size escaped the floor/ceil band");
  return assignment;
}

// Nearest center by Euclidean distance; ties go to the lowest index.
inline Assignment greedy_assign(const Matrix& points, const Matrix& centers,
                                DistanceMode mode = DistanceMode::euclidean) {
  const std::size_t n = points.rows;
  const std::size_t k = centers.rows;
  if (k == 0) fail_validation("greedy_assign: no centers");
  if (points.cols != centers.cols) fail_validation("greedy_assign: dimension mismatch");
  Assignment assignment;
  assignment.cluster_of.resize(n);
  assignment.k = static_cast<std::uint32_t>(k);
  double total = 0.0;
  for (std::size_t d = 0; d < n; ++d) {
    std::size_t best = 0;
    double best_sq = squared_distance(points.row(d), centers.row(0));
    for (std::size_t j = 1; j < k; ++j) {
      double sq = squared_distance(points.row(d), centers.row(j));
      if (sq < best_sq) {
        best_sq = sq;
        best = j;
      }
    }
    assignment.cluster_of[d] = static_cast<std::uint32_t>(best);
    total += mode == DistanceMode::euclidean ? std::sqrt(best_sq) : best_sq;
  }
  assignment.cost = total;
  return assignment;
}

inline Assignment random_assign(std::size_t n_docs, std::size_t k, std::uint64_t seed) {
  if (n_docs == 0) fail_validation("random_assign: need at least one document");
  if (k == 0) fail_validation("random_assign: need at least one cluster");
  Rng rng(seed);
  Assignment assignment;
  assignment.k = static_cast<std::uint32_t>(k);
  assignment.cluster_of.resize(n_docs);
  for (std::size_t d = 0; d < n_docs; ++d)
    assignment.cluster_of[d] = static_cast<std::uint32_t>(rng.next_below(k));
  return assignment;
}

struct KMeansConfig {
  std::size_t max_iter = 100;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  DistanceMode mode = DistanceMode::euclidean;
  double grid = 0.0;
};

namespace detail {

// Seeded farthest-point init: first center drawn by seed, the rest maximize
// the distance to the nearest chosen center (ties -> lowest index).
inline Matrix farthest_point_init(const Matrix& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows;
  std::vector<std::size_t> chosen;
  chosen.push_back(rng.next_below(n));
  std::vector<double> nearest_sq(n);
  for (std::size_t d = 0; d < n; ++d)
    nearest_sq[d] = squared_distance(points.row(d), points.row(chosen[0]));
  while (chosen.size() < k) {
    std::size_t best = 0;
    for (std::size_t d = 1; d < n; ++d)
      if (nearest_sq[d] > nearest_sq[best]) best = d;
    chosen.push_back(best);
    for (std::size_t d = 0; d < n; ++d)
      nearest_sq[d] =
          std::min(nearest_sq[d], squared_distance(points.row(d), points.row(best)));
  }
  Matrix centers(k, points.cols);
  for (std::size_t j = 0; j < k; ++j) {
    auto src = points.row(chosen[j]);
    std::copy(src.begin(), src.end(), centers.row(j).begin());
  }
  return centers;
}

inline Matrix mean_update(const Matrix& points,
                          const std::vector<std::uint32_t>& cluster_of,
                          std::size_t k, const Matrix& fallback_centers) {
  Matrix centers(k, points.cols);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t d = 0; d < points.rows; ++d) {
    std::uint32_t j = cluster_of[d];
    ++counts[j];
    auto row = points.row(d);
    for (std::size_t i = 0; i < points.cols; ++i) centers.at(j, i) += row[i];
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (counts[j] == 0) {
      auto src = fallback_centers.row(j);
      std::copy(src.begin(), src.end(), centers.row(j).begin());
      continue;
    }
    for (std::size_t i = 0; i < points.cols; ++i)
      centers.at(j, i) /= static_cast<double>(counts[j]);
  }
  return centers;
}

// Reseed each empty cluster from the point farthest from its assigned
// center (ties -> lowest index). Mutates the assignment.
inline void repair_empty_clusters(const Matrix& points, const Matrix& centers,
                                  Assignment& assignment, DistanceMode mode) {
  std::vector<std::size_t> sizes = assignment.sizes();
  std::vector<bool> stolen(points.rows, false);
  for (std::size_t j = 0; j < sizes.size(); ++j) {
    if (sizes[j] != 0) continue;
    std::size_t farthest = points.rows;
    double farthest_dist = -1.0;
    for (std::size_t d = 0; d < points.rows; ++d) {
      if (stolen[d]) continue;
      if (sizes[assignment.cluster_of[d]] <= 1) continue;
      double dist = point_distance(points.row(d),
                                   centers.row(assignment.cluster_of[d]), mode);
      if (dist > farthest_dist) {
        farthest_dist = dist;
        farthest = d;
      }
    }
    if (farthest == points.rows) fail_runtime("empty-cluster repair failed");
    --sizes[assignment.cluster_of[farthest]];
    assignment.cluster_of[farthest] = static_cast<std::uint32_t>(j);
    sizes[j] = 1;
    stolen[farthest] = true;
  }
}

template <typename EStep>
std::pair<ClusterModel, Assignment> fit_kmeans_loop(const Matrix& points,
                                                    std::size_t k,
                                                    const KMeansConfig& config,
                                                    bool balanced, EStep e_step) {
  if (k == 0 || points.rows < k) fail_validation("fit_kmeans: need D >= K >= 1");
  check_finite(points, "fit_kmeans");
  Rng rng(config.seed);
  Matrix centers = farthest_point_init(points, k, rng);

  ClusterModel model;
  model.k = k;
  model.dim = points.cols;
  model.fit.balanced = balanced;
  model.fit.seed = config.seed;

  Assignment assignment;
  double last_shift = 0.0;
  for (std::size_t it = 0;; ++it) {
    assignment = e_step(points, centers);
    model.fit.objective.push_back(
        assignment_cost(points, centers, assignment.cluster_of, config.mode));
    model.fit.iterations = it + 1;
    if (it + 1 >= config.max_iter) {
      model.fit.final_shift = last_shift;
      break;
    }
    Matrix updated = mean_update(points, assignment.cluster_of, k, centers);
    double shift = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      shift = std::max(shift, euclidean_distance(updated.row(j), centers.row(j)));
    if (shift < config.tol) {
      model.fit.final_shift = shift;
      break;
    }
    centers = std::move(updated);
    last_shift = shift;
  }
  assignment.cost =
      assignment_cost(points, centers, assignment.cluster_of, config.mode);
  model.centers = std::move(centers);
  return {std::move(model), std::move(assignment)};
}

}  // namespace detail

inline std::pair<ClusterModel, Assignment> fit_balanced_kmeans(
    const Matrix& points, std::size_t k, const KMeansConfig& config = {}) {
  AssignConfig assign_config{config.mode, config.grid};
  return detail::fit_kmeans_loop(
      points, k, config, true,
      [&](const Matrix& pts, const Matrix& centers) {
        return balanced_assign(pts, centers, assign_config);
      });
}

inline std::pair<ClusterModel, Assignment> fit_unbalanced_kmeans(
    const Matrix& points, std::size_t k, const KMeansConfig& config = {}) {
  return detail::fit_kmeans_loop(
      points, k, config, false,
      [&](const Matrix& pts, const Matrix& centers) {
        Assignment assignment = greedy_assign(pts, centers, config.mode);
        detail::repair_empty_clusters(pts, centers, assignment, config.mode);
        return assignment;
      });
}

// ---------------------------------------------------------------------------
// Analyses
// ---------------------------------------------------------------------------

struct OverlapMatrix {
  std::vector<std::string> labels;  // row order (sorted)
  std::uint32_t k = 0;
  std::vector<double> percent;  // labels x k, rows sum to 100

  double at(std::size_t row, std::size_t col) const { return percent[row * k + col]; }
};

inline OverlapMatrix overlap_matrix(const Assignment& assignment,
                                    const std::vector<std::string>& labels) {
  if (labels.size() != assignment.cluster_of.size())
    fail_validation("overlap_matrix: one label per document required");
  std::map<std::string, std::vector<std::size_t>> counts;
  for (std::size_t d = 0; d < labels.size(); ++d) {
    auto& row = counts[labels[d]];
    if (row.empty()) row.assign(assignment.k, 0);
    ++row[assignment.cluster_of[d]];
  }
  OverlapMatrix out;
  out.k = assignment.k;
  out.percent.reserve(counts.size() * assignment.k);
  for (const auto& [label, row] : counts) {
    out.labels.push_back(label);
    double total = static_cast<double>(std::accumulate(row.begin(), row.end(), std::size_t(0)));
    for (std::size_t c = 0; c < assignment.k; ++c)
      out.percent.push_back(100.0 * static_cast<double>(row[c]) / total);
  }
  return out;
}

struct SizeStats {
  std::size_t min = 0;
  std::size_t max = 0;
  double median = 0.0;
  std::size_t range = 0;
  std::vector<std::size_t> sizes;
};

inline SizeStats cluster_size_stats(const Assignment& assignment) {
  if (assignment.cluster_of.empty())
    fail_validation("cluster_size_stats: empty assignment");
  SizeStats stats;
  stats.sizes = assignment.sizes();
  std::vector<std::size_t> sorted = stats.sizes;
  std::sort(sorted.begin(), sorted.end());
  stats.min = sorted.front();
  stats.max = sorted.back();
  stats.range = stats.max - stats.min;
  std::size_t n = sorted.size();
  stats.median = n % 2 == 1 ? static_cast<double>(sorted[n / 2])
                            : (static_cast<double>(sorted[n / 2 - 1]) +
                               static_cast<double>(sorted[n / 2])) /
                                  2.0;
  return stats;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json cluster_model_to_json(const ClusterModel& model) {
  nlohmann::json j;
  j["version"] = 1;
  j["kind"] = "cluster_model";
  j["k"] = model.k;
  j["dim"] = model.dim;
  j["centers"] = model.centers.data;
  j["fit"]["iterations"] = model.fit.iterations;
  j["fit"]["final_shift"] = model.fit.final_shift;
  j["fit"]["balanced"] = model.fit.balanced;
  j["fit"]["seed"] = model.fit.seed;
  j["fit"]["objective"] = model.fit.objective;
  return j;
}

inline void save_cluster_model(const ClusterModel& model,
                               const std::filesystem::path& path) {
  write_file_atomic(path, cluster_model_to_json(model).dump() + "\n");
}

inline std::string cluster_model_digest(const ClusterModel& model) {
  return sha256_hex(cluster_model_to_json(model).dump());
}

inline ClusterModel load_cluster_model(const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("kind", "") != "cluster_model" ||
      j.value("version", 0) != 1)
    fail_integrity("corrupt cluster model file: " + path.string());
  ClusterModel model;
  try {
    model.k = j.at("k").get<std::size_t>();
    model.dim = j.at("dim").get<std::size_t>();
    model.centers = Matrix(model.k, model.dim);
    model.centers.data = j.at("centers").get<std::vector<double>>();
    model.fit.iterations = j.at("fit").at("iterations").get<std::size_t>();
    model.fit.final_shift = j.at("fit").at("final_shift").get<double>();
    model.fit.balanced = j.at("fit").at("balanced").get<bool>();
    model.fit.seed = j.at("fit").at("seed").get<std::uint64_t>();
    model.fit.objective = j.at("fit").at("objective").get<std::vector<double>>();
  } catch (const nlohmann::json::exception&) {
    fail_integrity("corrupt cluster model file: " + path.string());
  }
  if (model.centers.data.size() != model.k * model.dim)
    fail_integrity("cluster model has inconsistent shapes: " + path.string());
  return model;
}

}  // namespace clusterlm::cluster
