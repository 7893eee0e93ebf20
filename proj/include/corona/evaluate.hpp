#pragma once

#include <algorithm>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "corona/common.hpp"
#include "corona/features.hpp"
#include "corona/gnn.hpp"
#include "corona/graph.hpp"
#include "corona/metrics.hpp"

namespace corona {

// Subgraph rule used to bound the candidate set.
enum class Mode { Corona, FullGraph, Fixed1Hop, Fixed2Hop };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::Corona:
      return "Corona";
    case Mode::FullGraph:
      return "FullGraph";
    case Mode::Fixed1Hop:
      return "Fixed1Hop";
    case Mode::Fixed2Hop:
      return "Fixed2Hop";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  for (Mode m : {Mode::Corona, Mode::FullGraph, Mode::Fixed1Hop, Mode::Fixed2Hop}) {
    std::string a = to_string(m), b = s;
    std::transform(a.begin(), a.end(), a.begin(), ::tolower);
    std::transform(b.begin(), b.end(), b.begin(), ::tolower);
    if (a == b) return m;
  }
  throw ValidationError("unknown ablation mode '" + s + "'");
}

inline const std::vector<Mode>& all_modes() {
  static const std::vector<Mode> m{Mode::Corona, Mode::FullGraph, Mode::Fixed1Hop, Mode::Fixed2Hop};
  return m;
}

struct EvalConfig {
  std::vector<std::size_t> cutoffs{10, 20, 50};
  std::size_t runs = 5;
  std::size_t cold_start_threshold = 2;
  std::vector<Mode> modes{Mode::Corona, Mode::FullGraph, Mode::Fixed1Hop, Mode::Fixed2Hop};
  std::size_t workers = 1;

  void validate() const {
    if (cutoffs.empty()) throw ValidationError("eval: no cutoffs");
    for (std::size_t i = 0; i < cutoffs.size(); ++i)
      if (cutoffs[i] == 0 || (i && cutoffs[i] <= cutoffs[i - 1])) throw ValidationError("eval: cutoffs must be positive and ascending");
    if (runs == 0) throw ValidationError("eval: runs must be at least 1");
    if (modes.empty()) throw ValidationError("eval: no ablation modes");
    if (workers == 0) throw ValidationError("eval: workers must be at least 1");
  }
};

inline Subgraph full_graph_subgraph(const InteractionGraph& g) {
  std::vector<UserId> users(g.num_users());
  std::iota(users.begin(), users.end(), 0);
  return induce_subgraph(g, users, Stage::Intent);
}

// {target} plus every user whose hop bucket is at most `max_bucket`.
inline Subgraph fixed_hop_subgraph(const InteractionGraph& g, UserId target, int max_bucket) {
  const HopBuckets hb = hop_distance(g, target);
  std::vector<UserId> users;
  for (UserId u = 0; u < g.num_users(); ++u)
    if (hb[u] <= max_bucket) users.push_back(u);
  return induce_subgraph(g, users, Stage::Intent);
}

struct TestCase {
  UserId target;
  std::vector<ItemId> ground_truth;
};

// Masked edges grouped by user; users without any are absent.
inline std::vector<TestCase> test_cases_from_mask(const InteractionGraph& g) {
  std::vector<TestCase> out;
  for (const auto& [u, v] : g.masked_edges()) {
    if (out.empty() || out.back().target != u) out.push_back({u, {}});
    out.back().ground_truth.push_back(v);
  }
  return out;
}

// Items whose total interaction count (observed + masked) is at most `threshold`.
inline std::vector<ItemId> cold_start_slice(const InteractionGraph& g, std::size_t threshold) {
  std::vector<ItemId> out;
  for (ItemId v = 0; v < g.num_items(); ++v)
    if (g.interaction_count(v) <= threshold) out.push_back(v);
  return out;
}

// Keeps only ground-truth items inside `slice` (sorted); cases left empty are dropped.
inline std::vector<TestCase> restrict_cases(const std::vector<TestCase>& cases, const std::vector<ItemId>& slice) {
  std::vector<TestCase> out;
  for (const auto& c : cases) {
    TestCase r{c.target, {}};
    for (ItemId v : c.ground_truth)
      if (std::binary_search(slice.begin(), slice.end(), v)) r.ground_truth.push_back(v);
    if (!r.ground_truth.empty()) out.push_back(std::move(r));
  }
  return out;
}

using SubgraphRule = std::function<Subgraph(UserId)>;
using Ranker = std::function<RankedList(UserId, const Subgraph&)>;

// GCN encoding of the target over the subgraph, excluding its observed items.
inline Ranker make_gcn_ranker(const InteractionGraph& g, const FeatureStore& features, const GnnParams& params) {
  return [&g, &features, &params](UserId target, const Subgraph& s) {
    const SubgraphAdjacency adj(s);
    const Vector h = gcn_forward_trace(adj, features, params, target).h;
    return rank_items(s, h, features, g.items_of(target), target);
  };
}

struct RunMetrics {
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
  std::size_t users = 0;
  double candidate_items_mean = 0.0;
  std::size_t ground_truth_outside_candidates = 0;
};

// Per-user metrics averaged over `cases`. Ground truth outside the ranked
// candidates counts as a miss. Subgraphs are built serially (they may call the
// LLM gateway); ranking fans out over `workers` threads.
inline RunMetrics evaluate_run(const InteractionGraph& g, const std::vector<TestCase>& cases, const SubgraphRule& rule,
                               const Ranker& ranker, const std::vector<std::size_t>& cutoffs, std::size_t workers = 1) {
  for (const auto& c : cases) {
    if (c.ground_truth.empty()) throw ValidationError("evaluate: test case with empty ground truth");
    for (ItemId v : c.ground_truth)
      if (!g.is_masked(c.target, v))
        throw ValidationError("evaluate: test edge (" + g.users().name(c.target) + ", " + g.items().name(v) +
                              ") is not masked from the adjacency");
  }
  std::vector<Subgraph> subgraphs;
  subgraphs.reserve(cases.size());
  for (const auto& c : cases) subgraphs.push_back(rule(c.target));

  std::vector<RankedList> ranked(cases.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < cases.size(); i += step) ranked[i] = ranker(cases[i].target, subgraphs[i]);
  };
  const std::size_t n_threads = std::min(std::max<std::size_t>(workers, 1), std::max<std::size_t>(cases.size(), 1));
  if (n_threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work, t, n_threads);
  }

  RunMetrics m;
  for (std::size_t k : cutoffs) m.recall[k] = m.ndcg[k] = 0.0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    for (std::size_t k : cutoffs) {
      m.recall[k] += recall_at_k(ranked[i], cases[i].ground_truth, k);
      m.ndcg[k] += ndcg_at_k(ranked[i], cases[i].ground_truth, k);
    }
    m.candidate_items_mean += static_cast<double>(ranked[i].size());
    for (ItemId v : cases[i].ground_truth)
      if (!subgraphs[i].contains_item(v)) ++m.ground_truth_outside_candidates;
  }
  m.users = cases.size();
  if (m.users) {
    const double n = static_cast<double>(m.users);
    for (std::size_t k : cutoffs) {
      m.recall[k] /= n;
      m.ndcg[k] /= n;
    }
    m.candidate_items_mean /= n;
  }
  return m;
}

struct ModeResult {
  Mode mode;
  std::vector<RunMetrics> runs;
};

struct MetricsReport {
  nlohmann::json config = nlohmann::json::object();
  std::string dataset_fingerprint;
  std::string slice = "all";
  std::vector<std::size_t> cutoffs;
  std::vector<ModeResult> modes;

  const ModeResult& result(Mode m) const {
    for (const auto& r : modes)
      if (r.mode == m) return r;
    throw LookupError(std::string("report has no mode ") + to_string(m));
  }

  static double mean_of(const ModeResult& r, std::size_t k, bool recall) {
    if (r.runs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& run : r.runs) s += (recall ? run.recall : run.ndcg).at(k);
    return s / static_cast<double>(r.runs.size());
  }
  double recall_mean(Mode m, std::size_t k) const { return mean_of(result(m), k, true); }
  double ndcg_mean(Mode m, std::size_t k) const { return mean_of(result(m), k, false); }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"config", config}, {"slice", slice}, {"fingerprints", {{"dataset", dataset_fingerprint}}}};
    j["ranking_scope"] = "retrieval-bounded: items outside the mode's candidate set count as misses";
    j["modes"] = nlohmann::json::array();
    for (const auto& r : modes) {
      double cand = 0.0;
      for (const auto& run : r.runs) cand += run.candidate_items_mean;
      if (!r.runs.empty()) cand /= static_cast<double>(r.runs.size());
      for (std::size_t k : cutoffs) {
        nlohmann::json runs = nlohmann::json::array();
        for (const auto& run : r.runs)
          runs.push_back({{"recall", run.recall.at(k)},
                          {"ndcg", run.ndcg.at(k)},
                          {"users", run.users},
                          {"candidate_items_mean", run.candidate_items_mean},
                          {"ground_truth_outside_candidates", run.ground_truth_outside_candidates}});
        j["modes"].push_back({{"mode", to_string(r.mode)},
                              {"K", k},
                              {"recall_mean", mean_of(r, k, true)},
                              {"ndcg_mean", mean_of(r, k, false)},
                              {"candidate_items_mean", cand},
                              {"runs", runs}});
      }
    }
    return j;
  }

  std::string to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(11) << "mode";
    for (std::size_t k : cutoffs) os << std::right << std::setw(10) << ("R@" + std::to_string(k)) << std::setw(10) << ("N@" + std::to_string(k));
    os << std::setw(12) << "cand" << '\n';
    for (const auto& r : modes) {
      double cand = 0.0;
      for (const auto& run : r.runs) cand += run.candidate_items_mean;
      if (!r.runs.empty()) cand /= static_cast<double>(r.runs.size());
      os << std::left << std::setw(11) << to_string(r.mode) << std::right << std::fixed << std::setprecision(4);
      for (std::size_t k : cutoffs) os << std::setw(10) << mean_of(r, k, true) << std::setw(10) << mean_of(r, k, false);
      os << std::setw(12) << std::setprecision(1) << cand << '\n';
    }
    return os.str();
  }
};

// Runs `runner(mode, run_index)` for every mode and run and collects the results.
inline MetricsReport run_ablation(const std::vector<Mode>& modes, const EvalConfig& cfg,
                                  const std::function<RunMetrics(Mode, std::size_t)>& runner) {
  if (modes.empty()) throw ValidationError("run_ablation: no modes given");
  cfg.validate();
  MetricsReport report;
  report.cutoffs = cfg.cutoffs;
  for (Mode m : modes) {
    ModeResult r{m, {}};
    for (std::size_t run = 0; run < cfg.runs; ++run) r.runs.push_back(runner(m, run));
    report.modes.push_back(std::move(r));
  }
  return report;
}

}  // namespace corona
