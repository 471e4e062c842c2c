#pragma once

// Training-cost accounting: the transformer FLOP formula with its
// cluster-count parallelism identity, log-space cost interpolation between
// empirical (performance, cost) observations, the speedup factor, and the
// max seconds-per-update report.
//
//   F_ELM(T, k) = (96 l h^2 T / k) (1 + s / 6h + V / 16lh)
//   k * F_ELM(T, k) = F_ELM(T, 1)
//   c(t) = exp(log c_lo + r (log c_hi - log c_lo)),  r = (t-t_lo)/(t_hi-t_lo)

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "clusterlm/common.hpp"

namespace clusterlm::budget {

struct FlopSpec {
  std::uint64_t layers = 0;        // l
  std::uint64_t hidden = 0;        // h
  std::uint64_t seq_len = 0;       // s
  std::uint64_t vocab = 0;         // V
  std::uint64_t train_tokens = 0;  // T (tokens, not temperature)
  std::uint64_t clusters = 1;      // k

  void validate() const {
    if (layers == 0 || hidden == 0 || seq_len == 0 || vocab == 0 ||
        train_tokens == 0 || clusters == 0)
      fail_validation("flop spec: all fields must be positive integers");
  }
};

// FLOPs to train a single expert. Expanded to the algebraically identical
// integer polynomial (96lh^2 + 16lhs + 6hV) T / k so integer specs evaluate
// without rounding.
inline double elm_flops(const FlopSpec& spec) {
  spec.validate();
  double l = static_cast<double>(spec.layers);
  double h = static_cast<double>(spec.hidden);
  double s = static_cast<double>(spec.seq_len);
  double v = static_cast<double>(spec.vocab);
  double t = static_cast<double>(spec.train_tokens);
  double k = static_cast<double>(spec.clusters);
  return (96.0 * l * h * h + 16.0 * l * h * s + 6.0 * h * v) * t / k;
}

// Total cost of training k experts; equals the dense cost by the identity.
inline double total_flops(const FlopSpec& spec) {
  return static_cast<double>(spec.clusters) * elm_flops(spec);
}

// ---------------------------------------------------------------------------
// Cost interpolation
// ---------------------------------------------------------------------------

struct CostObservation {
  double performance = 0.0;  // t, e.g. perplexity
  double cost = 0.0;         // c, FLOPs
};

inline std::vector<CostObservation> sorted_observations(
    std::vector<CostObservation> observations) {
  if (observations.size() < 2)
    fail_validation("cost interpolation: need at least 2 observations");
  std::sort(observations.begin(), observations.end(),
            [](const CostObservation& a, const CostObservation& b) {
              return a.performance < b.performance;
            });
  for (std::size_t i = 0; i < observations.size(); ++i) {
    if (!(observations[i].cost > 0.0))
      fail_validation("cost interpolation: costs must be positive");
    if (i > 0 && observations[i].performance == observations[i - 1].performance)
      fail_validation("cost interpolation: performance values must be distinct");
  }
  return observations;
}

// Bracket the target between its nearest observations and interpolate in
// log-cost space. Extrapolation is refused, not extended.
inline double interpolate_cost(const std::vector<CostObservation>& observations,
                               double target) {
  std::vector<CostObservation> sorted = sorted_observations(observations);
  if (target < sorted.front().performance || target > sorted.back().performance)
    fail_validation("interpolate_cost: target outside observed range; extrapolation refused");
  for (const CostObservation& obs : sorted)
    if (obs.performance == target) return obs.cost;
  std::size_t hi = 1;
  while (sorted[hi].performance < target) ++hi;
  const CostObservation& lo_obs = sorted[hi - 1];
  const CostObservation& hi_obs = sorted[hi];
  if (lo_obs.cost == hi_obs.cost) return lo_obs.cost;
  double r = (target - lo_obs.performance) / (hi_obs.performance - lo_obs.performance);
  return std::exp(std::log(lo_obs.cost) + r * (std::log(hi_obs.cost) - std::log(lo_obs.cost)));
}

// c_dense(t) / c_sparse(t).
inline double speedup(const std::vector<CostObservation>& dense,
                      const std::vector<CostObservation>& sparse, double target) {
  return interpolate_cost(dense, target) / interpolate_cost(sparse, target);
}

// ---------------------------------------------------------------------------
// Update-time report
// ---------------------------------------------------------------------------

struct UpdateRow {
  std::string config;
  std::size_t workers = 0;
  double max_seconds_per_update = 0.0;
  double modeled_with_penalty = 0.0;  // + user-supplied all-to-all cost
};

struct UpdateInput {
  std::string config;
  std::size_t workers = 0;
  std::vector<double> per_expert_max;  // max s/update per expert
};

// One row per configuration: the measured max seconds-per-update across
// experts, plus a modeled column with a per-update communication penalty
// standing in for an all-to-all MoE-style baseline.
inline std::vector<UpdateRow> update_report(const std::vector<UpdateInput>& inputs,
                                            double penalty = 0.0) {
  if (inputs.empty()) fail_validation("update_report: no inputs");
  std::vector<UpdateRow> rows;
  for (const UpdateInput& input : inputs) {
    if (input.per_expert_max.empty())
      fail_validation("update_report: empty timing record for " + input.config);
    double mx = 0.0;
    for (double t : input.per_expert_max) mx = std::max(mx, t);
    rows.push_back({input.config, input.workers, mx, mx + penalty});
  }
  return rows;
}

}  // namespace clusterlm::budget
