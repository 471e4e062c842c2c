#pragma once

// Epsilon-scaling auction solver for the balanced assignment problem:
// maximize sum_d benefit[d][cluster(d)] subject to fixed per-cluster
// capacities. Documents are the bidders; each cluster contributes
// `capacity` identical slots (item prices are tracked per slot).
//
// Real-valued benefits are rounded to an integer grid of resolution
// `grid`. Epsilon starts at 1.0 benefit units and halves per round down to
// one grid unit, so the final assignment is within slots * grid of the
// optimum of the rounded problem; with the default grid of
// 1e-7 / (slots + 1) the total suboptimality stays below 1e-6.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <set>
#include <vector>

#include "clusterlm/common.hpp"

namespace clusterlm {

struct AuctionOptions {
  double grid = 0.0;  // 0 = auto (1e-7 / (slots + 1))
};

struct AuctionResult {
  std::vector<std::uint32_t> cluster_of;  // per bidder
  double benefit = 0.0;                   // total real-valued benefit
};

// benefits: row-major bidders x clusters. capacities: per-cluster slot
// counts, summing to the bidder count.
inline AuctionResult solve_balanced_auction(const std::vector<double>& benefits,
                                            std::size_t n_bidders,
                                            std::size_t n_clusters,
                                            const std::vector<std::size_t>& capacities,
                                            const AuctionOptions& options = {}) {
  if (capacities.size() != n_clusters)
    fail_validation("auction: capacity count != cluster count");
  std::size_t total_slots = 0;
  for (std::size_t c : capacities) total_slots += c;
  if (total_slots != n_bidders)
    fail_validation("auction: capacities must sum to bidder count");
  for (double b : benefits)
    if (!std::isfinite(b)) fail_validation("auction: non-finite benefit");

  double grid = options.grid;
  if (grid <= 0.0) grid = 1e-7 / static_cast<double>(total_slots + 1);
  double max_abs = 0.0;
  for (double b : benefits) max_abs = std::max(max_abs, std::fabs(b));
  // Keep rounded benefits comfortably inside int64 (price headroom included).
  if (max_abs / grid > 1e15) grid = max_abs / 1e15;

  std::vector<std::int64_t> benefit_grid(benefits.size());
  for (std::size_t i = 0; i < benefits.size(); ++i)
    benefit_grid[i] = static_cast<std::int64_t>(std::llround(benefits[i] / grid));
  // Uniform shift keeps every bidder's value differences intact and bounds
  // the integer range from below by zero.
  std::int64_t min_grid = *std::min_element(benefit_grid.begin(), benefit_grid.end());
  for (std::int64_t& b : benefit_grid) b -= min_grid;

  // Slot layout: cluster j owns slots [slot_begin[j], slot_begin[j+1]).
  std::vector<std::size_t> slot_begin(n_clusters + 1, 0);
  for (std::size_t j = 0; j < n_clusters; ++j)
    slot_begin[j + 1] = slot_begin[j] + capacities[j];
  std::vector<std::uint32_t> slot_cluster(total_slots);
  for (std::size_t j = 0; j < n_clusters; ++j)
    for (std::size_t s = slot_begin[j]; s < slot_begin[j + 1]; ++s)
      slot_cluster[s] = static_cast<std::uint32_t>(j);

  std::vector<std::int64_t> price(total_slots, 0);
  std::vector<std::int32_t> slot_owner(total_slots, -1);
  std::vector<std::int32_t> bidder_slot(n_bidders, -1);
  // Per-cluster slots ordered by (price, slot); begin() is the cheapest.
  std::vector<std::set<std::pair<std::int64_t, std::size_t>>> cheap(n_clusters);

  std::int64_t epsilon0 = static_cast<std::int64_t>(std::llround(1.0 / grid));
  if (epsilon0 < 1) epsilon0 = 1;

  constexpr std::int64_t kNegInf = std::numeric_limits<std::int64_t>::min() / 4;

  for (std::int64_t epsilon = epsilon0;; epsilon = epsilon / 2) {
    if (epsilon < 1) epsilon = 1;

    // Each scaling round restarts the assignment but keeps prices.
    std::fill(slot_owner.begin(), slot_owner.end(), -1);
    std::fill(bidder_slot.begin(), bidder_slot.end(), -1);
    for (std::size_t j = 0; j < n_clusters; ++j) {
      cheap[j].clear();
      for (std::size_t s = slot_begin[j]; s < slot_begin[j + 1]; ++s)
        cheap[j].insert({price[s], s});
    }
    std::vector<std::uint32_t> unassigned(n_bidders);
    for (std::size_t d = 0; d < n_bidders; ++d)
      unassigned[d] = static_cast<std::uint32_t>(n_bidders - 1 - d);

    while (!unassigned.empty()) {
      std::uint32_t d = unassigned.back();
      unassigned.pop_back();
      const std::int64_t* row = benefit_grid.data() + std::size_t(d) * n_clusters;

      std::int64_t v1 = kNegInf, v2 = kNegInf;
      std::size_t best_cluster = 0;
      for (std::size_t j = 0; j < n_clusters; ++j) {
        if (cheap[j].empty()) continue;
        std::int64_t value = row[j] - cheap[j].begin()->first;
        if (value > v1) {
          v2 = v1;
          v1 = value;
          best_cluster = j;
        } else if (value > v2) {
          v2 = value;
        }
      }
      // The runner-up may be the second-cheapest slot of the best cluster.
      if (cheap[best_cluster].size() >= 2) {
        auto second = std::next(cheap[best_cluster].begin());
        std::int64_t value = row[best_cluster] - second->first;
        if (value > v2) v2 = value;
      }
      if (v2 == kNegInf) v2 = v1;  // single slot in total

      auto cheapest = *cheap[best_cluster].begin();
      std::size_t slot = cheapest.second;
      std::int64_t new_price = row[best_cluster] - v2 + epsilon;
      if (new_price > std::int64_t(4) * 100000000000000000ll)
        fail_runtime("auction: price overflow; benefit range too large for grid");

      std::int32_t previous = slot_owner[slot];
      if (previous >= 0) {
        bidder_slot[previous] = -1;
        unassigned.push_back(static_cast<std::uint32_t>(previous));
      }
      cheap[best_cluster].erase(cheapest);
      price[slot] = new_price;
      cheap[best_cluster].insert({new_price, slot});
      slot_owner[slot] = static_cast<std::int32_t>(d);
      bidder_slot[d] = static_cast<std::int32_t>(slot);
    }

    if (epsilon == 1) break;
  }

  AuctionResult result;
  result.cluster_of.resize(n_bidders);
  for (std::size_t d = 0; d < n_bidders; ++d) {
    std::uint32_t j = slot_cluster[static_cast<std::size_t>(bidder_slot[d])];
    result.cluster_of[d] = j;
    result.benefit += benefits[d * n_clusters + j];
  }
  return result;
}

}  // namespace clusterlm
