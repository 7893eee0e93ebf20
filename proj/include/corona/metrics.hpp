#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "corona/common.hpp"

namespace corona {

struct RankedList {
  UserId target = 0;
  std::vector<std::pair<ItemId, double>> entries;  // best first
  std::string source_subgraph;                     // subgraph fingerprint
  bool empty_flagged = false;                      // nothing left to rank after exclusions

  std::size_t size() const { return entries.size(); }
};

namespace detail {

inline void check_ground_truth(std::size_t gt_size, std::size_t k) {
  if (gt_size == 0) throw ValidationError("metric: empty ground truth");
  if (k == 0) throw ValidationError("metric: K must be positive");
}

}  // namespace detail

// Ground-truth items absent from `ranked` count as misses.
inline double recall_at_k(const RankedList& ranked, const std::vector<ItemId>& ground_truth, std::size_t k) {
  detail::check_ground_truth(ground_truth.size(), k);
  const std::unordered_set<ItemId> gt(ground_truth.begin(), ground_truth.end());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked.entries.size() && i < k; ++i) hits += gt.count(ranked.entries[i].first);
  return static_cast<double>(hits) / static_cast<double>(gt.size());
}

inline double ndcg_at_k(const RankedList& ranked, const std::vector<ItemId>& ground_truth, std::size_t k) {
  detail::check_ground_truth(ground_truth.size(), k);
  const std::unordered_set<ItemId> gt(ground_truth.begin(), ground_truth.end());
  double dcg = 0.0;
  for (std::size_t i = 0; i < ranked.entries.size() && i < k; ++i)
    if (gt.count(ranked.entries[i].first)) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(gt.size(), k); ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

}  // namespace corona
