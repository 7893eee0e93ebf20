#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <unordered_map>
#include <vector>

#include "corona/common.hpp"
#include "corona/features.hpp"
#include "corona/graph.hpp"
#include "corona/metrics.hpp"
#include "corona/optim.hpp"

namespace corona {

struct GnnParams {
  Matrix w1;  // d x h
  Matrix w2;  // h x d_out
  Matrix b1;  // 1 x h
  Matrix b2;  // 1 x d_out
  bool use_bias = false;

  std::size_t input_dim() const { return static_cast<std::size_t>(w1.rows()); }
  std::size_t hidden() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(w2.cols()); }

  static GnnParams glorot(std::size_t d, std::size_t h, std::size_t d_out, bool use_bias, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto init = [&](std::size_t fan_in, std::size_t fan_out) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> u(-limit, limit);
      Matrix m(static_cast<Eigen::Index>(fan_in), static_cast<Eigen::Index>(fan_out));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
      return m;
    };
    GnnParams p;
    p.w1 = init(d, h);
    p.w2 = init(h, d_out);
    p.b1 = Matrix::Zero(1, static_cast<Eigen::Index>(h));
    p.b2 = Matrix::Zero(1, static_cast<Eigen::Index>(d_out));
    p.use_bias = use_bias;
    return p;
  }

  static GnnParams zeros_like(const GnnParams& o) {
    return {Matrix::Zero(o.w1.rows(), o.w1.cols()), Matrix::Zero(o.w2.rows(), o.w2.cols()), Matrix::Zero(1, o.b1.cols()),
            Matrix::Zero(1, o.b2.cols()), o.use_bias};
  }

  // Biases are always carried; without use_bias their gradient is zero and
  // they stay at zero.
  std::vector<Matrix*> tensors() { return {&w1, &w2, &b1, &b2}; }
  std::vector<const Matrix*> tensors() const { return {&w1, &w2, &b1, &b2}; }

  void validate(std::size_t feature_dim) const {
    if (w1.rows() != static_cast<Eigen::Index>(feature_dim)) throw ValidationError("GNN input dimension does not match features");
    if (w2.rows() != w1.cols() || b1.cols() != w1.cols() || b2.cols() != w2.cols() || b1.rows() != 1 || b2.rows() != 1)
      throw ValidationError("GNN parameter shapes are inconsistent");
    if (!w1.allFinite() || !w2.allFinite() || !b1.allFinite() || !b2.allFinite())
      throw ValidationError("GNN parameters contain non-finite values");
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.metadata = {{"kind", "gnn"}, {"use_bias", use_bias}, {"hidden", hidden()}, {"output_dim", output_dim()}};
    c.tensors = {{"w1", w1}, {"w2", w2}, {"b1", b1}, {"b2", b2}};
    return c;
  }

  static GnnParams from_checkpoint(const Checkpoint& c) {
    if (c.metadata.value("kind", "") != "gnn") throw ValidationError("checkpoint is not a GNN checkpoint");
    GnnParams p{c.tensor("w1"), c.tensor("w2"), c.tensor("b1"), c.tensor("b2"), c.metadata.value("use_bias", false)};
    p.validate(p.input_dim());
    return p;
  }
};

// Symmetric normalized adjacency with self-loops over a subgraph. Local node
// indices put the subgraph's users first, then its items.
class SubgraphAdjacency {
 public:
  struct Neighbor {
    std::uint32_t node;
    double weight;
  };

  explicit SubgraphAdjacency(const Subgraph& s) : users_(s.users), items_(s.items) {
    const std::size_t n = users_.size() + items_.size();
    neighbors_.assign(n, {});
    std::vector<std::uint32_t> degree(n, 1);
    std::vector<std::pair<std::uint32_t, std::uint32_t>> local_edges;
    local_edges.reserve(s.edges.size());
    for (const auto& [u, v] : s.edges) {
      const auto a = local_user(u);
      const auto b = local_item(v);
      if (!a || !b) throw ValidationError("subgraph edge references a node outside the subgraph");
      local_edges.emplace_back(*a, *b);
      ++degree[*a];
      ++degree[*b];
    }
    for (std::uint32_t k = 0; k < n; ++k) neighbors_[k].push_back({k, 1.0 / degree[k]});
    for (const auto& [a, b] : local_edges) {
      const double w = 1.0 / std::sqrt(static_cast<double>(degree[a]) * degree[b]);
      neighbors_[a].push_back({b, w});
      neighbors_[b].push_back({a, w});
    }
  }

  std::size_t num_nodes() const { return neighbors_.size(); }
  std::size_t num_users() const { return users_.size(); }
  bool is_item(std::uint32_t node) const { return node >= users_.size(); }
  std::uint32_t global_id(std::uint32_t node) const { return is_item(node) ? items_[node - users_.size()] : users_[node]; }
  const std::vector<Neighbor>& neighbors(std::uint32_t node) const { return neighbors_.at(node); }

  std::optional<std::uint32_t> local_user(UserId u) const {
    auto it = std::lower_bound(users_.begin(), users_.end(), u);
    if (it == users_.end() || *it != u) return std::nullopt;
    return static_cast<std::uint32_t>(it - users_.begin());
  }
  std::optional<std::uint32_t> local_item(ItemId v) const {
    auto it = std::lower_bound(items_.begin(), items_.end(), v);
    if (it == items_.end() || *it != v) return std::nullopt;
    return static_cast<std::uint32_t>(users_.size() + (it - items_.begin()));
  }

 private:
  std::vector<UserId> users_;
  std::vector<ItemId> items_;
  std::vector<std::vector<Neighbor>> neighbors_;
};

// Intermediate values of the target row's forward pass, kept for backprop.
struct GcnTrace {
  std::vector<std::uint32_t> hop1;  // target's neighbours in Â, self included
  Vector hop1_weight;               // Â[target, j]
  Matrix agg;                       // row j: sum_k Â[j,k] X_k
  Matrix z1;                        // agg W1 + b1
  Vector m;                         // sum_j Â[target,j] ReLU(z1_j)
  Vector h;                         // H_u
};

// Only the target's output row is needed, so layer 1 runs on its closed
// neighbourhood instead of the whole subgraph. Gathering depends on the
// subgraph and features only and can be reused across parameter updates.
inline GcnTrace gcn_gather(const SubgraphAdjacency& adj, const FeatureStore& features, UserId target) {
  const auto t = adj.local_user(target);
  if (!t) throw ValidationError("gcn_forward: target user " + std::to_string(target) + " is not in the subgraph");
  const Eigen::Index d = features.user_features.cols();
  auto input = [&](std::uint32_t node) {
    return adj.is_item(node) ? features.item_features.row(adj.global_id(node)) : features.user_features.row(adj.global_id(node));
  };
  GcnTrace tr;
  const auto& nbrs = adj.neighbors(*t);
  tr.hop1.reserve(nbrs.size());
  tr.hop1_weight.resize(static_cast<Eigen::Index>(nbrs.size()));
  tr.agg = Matrix::Zero(static_cast<Eigen::Index>(nbrs.size()), d);
  for (std::size_t r = 0; r < nbrs.size(); ++r) {
    tr.hop1.push_back(nbrs[r].node);
    tr.hop1_weight(static_cast<Eigen::Index>(r)) = nbrs[r].weight;
    for (const auto& nb : adj.neighbors(nbrs[r].node)) tr.agg.row(static_cast<Eigen::Index>(r)) += nb.weight * input(nb.node);
  }
  return tr;
}

// Fills z1, m and h of a gathered trace.
inline void gcn_apply(GcnTrace& tr, const GnnParams& params) {
  if (tr.agg.cols() != static_cast<Eigen::Index>(params.input_dim())) throw ValidationError("gcn_forward: feature dimension mismatch");
  tr.z1.noalias() = tr.agg * params.w1;
  if (params.use_bias) tr.z1.rowwise() += params.b1.row(0);
  tr.m.noalias() = tr.z1.cwiseMax(0.0).transpose() * tr.hop1_weight;
  tr.h.noalias() = params.w2.transpose() * tr.m;
  if (params.use_bias) tr.h += params.b2.row(0).transpose();
}

inline GcnTrace gcn_forward_trace(const SubgraphAdjacency& adj, const FeatureStore& features, const GnnParams& params,
                                  UserId target) {
  GcnTrace tr = gcn_gather(adj, features, target);
  gcn_apply(tr, params);
  return tr;
}

inline Vector gcn_forward(const Subgraph& subgraph, const FeatureStore& features, const GnnParams& params, UserId target) {
  return gcn_forward_trace(SubgraphAdjacency(subgraph), features, params, target).h;
}

// Accumulates dL/dparams given dL/dH_u.
inline void gcn_backward(const GcnTrace& tr, const GnnParams& params, const Vector& grad_h, GnnParams& grad) {
  grad.w2.noalias() += tr.m * grad_h.transpose();
  if (params.use_bias) grad.b2.row(0) += grad_h.transpose();
  const Vector dm = params.w2 * grad_h;
  Matrix dz = tr.hop1_weight * dm.transpose();
  dz = dz.cwiseProduct((tr.z1.array() > 0.0).cast<double>().matrix());
  grad.w1.noalias() += tr.agg.transpose() * dz;
  if (params.use_bias) grad.b1.row(0) += dz.colwise().sum();
}

// Narrow seam for alternative target encoders over a subgraph.
class UserEncoder {
 public:
  virtual ~UserEncoder() = default;
  virtual Vector encode(const SubgraphAdjacency& adj, const FeatureStore& features, UserId target) const = 0;
};

class GcnEncoder final : public UserEncoder {
 public:
  explicit GcnEncoder(const GnnParams& params) : params_(params) {}
  Vector encode(const SubgraphAdjacency& adj, const FeatureStore& features, UserId target) const override {
    return gcn_forward_trace(adj, features, params_, target).h;
  }

 private:
  const GnnParams& params_;
};

inline double score(const Vector& h, const Eigen::Ref<const Vector>& m) {
  if (h.size() != m.size()) throw ValidationError("score: dimension mismatch");
  return h.dot(m);
}

struct NegativeSample {
  std::vector<ItemId> items;
  bool short_pool = false;  // fewer than n candidates were available
};

// Uniform without replacement from pool \ positives. `pool` and `positives`
// must be sorted.
inline NegativeSample sample_negatives(std::span<const ItemId> pool, std::span<const ItemId> positives, std::size_t n,
                                       std::mt19937_64& rng) {
  std::vector<ItemId> eligible;
  std::set_difference(pool.begin(), pool.end(), positives.begin(), positives.end(), std::back_inserter(eligible));
  if (eligible.empty()) throw ValidationError("sample_negatives: no negative candidates left in the pool");
  NegativeSample out;
  out.short_pool = eligible.size() < n;
  std::sample(eligible.begin(), eligible.end(), std::back_inserter(out.items), n, rng);
  return out;
}

// sum_{v'} softplus(s_neg - s_pos), i.e. -sum log sigmoid(s_pos - s_neg).
inline double bpr_loss(double pos_score, std::span<const double> neg_scores) {
  if (neg_scores.empty()) throw ValidationError("bpr_loss: no negative scores");
  double loss = 0.0;
  for (double s : neg_scores) loss += softplus(s - pos_score);
  if (!std::isfinite(loss)) throw TrainingError("bpr_loss: non-finite scores");
  return loss;
}

struct BprSampleResult {
  double loss = 0.0;
  Vector grad_h;
};

// Loss of one (target, positive, negatives) triple and its gradient wrt H_u.
inline BprSampleResult bpr_sample(const Vector& h, const Matrix& item_features, ItemId positive, std::span<const ItemId> negatives) {
  BprSampleResult r;
  const auto mp = item_features.row(positive).transpose();
  const double sp = h.dot(mp);
  std::vector<double> neg_scores;
  r.grad_h = Vector::Zero(h.size());
  for (ItemId n : negatives) {
    const auto mn = item_features.row(n).transpose();
    const double sn = h.dot(mn);
    neg_scores.push_back(sn);
    r.grad_h += sigmoid(sn - sp) * (mn - mp);
  }
  r.loss = bpr_loss(sp, neg_scores);
  return r;
}

// Scores every subgraph item not in `exclude` (sorted), best first, ties by
// ascending item id.
inline RankedList rank_items(const Subgraph& subgraph, const Vector& h, const FeatureStore& features,
                             std::span<const ItemId> exclude, UserId target = 0) {
  RankedList out;
  out.target = target;
  out.source_subgraph = subgraph.fingerprint();
  for (ItemId v : subgraph.items) {
    if (std::binary_search(exclude.begin(), exclude.end(), v)) continue;
    out.entries.emplace_back(v, score(h, features.item_features.row(v).transpose()));
  }
  std::sort(out.entries.begin(), out.entries.end(),
            [](const auto& a, const auto& b) { return a.second > b.second || (a.second == b.second && a.first < b.first); });
  out.empty_flagged = out.entries.empty();
  return out;
}

struct GnnSample {
  UserId target;
  ItemId positive;
};

struct ValidationCase {
  UserId target;
  std::vector<ItemId> ground_truth;
};

struct GnnTrainConfig {
  AdamConfig adam{};
  std::size_t negatives = 10;
  std::size_t patience = 10;
  std::size_t max_epochs = 20;
  std::size_t eval_every = 0;  // steps between validations; 0 means once per epoch
  std::size_t max_evaluations = 0;
  std::size_t validation_k = 20;
  std::uint64_t seed = 0;
};

struct GnnTrainResult {
  GnnParams params;
  double initial_validation = 0.0;
  double best_validation = 0.0;
  std::size_t steps = 0;
  std::size_t skipped_samples = 0;  // no negatives available in the candidate pool
  std::size_t short_pools = 0;
  std::vector<double> validation_curve;
  bool early_stopped = false;
};

class GnnTrainer {
 public:
  // Subgraph used for a target user; computed once by a frozen retriever.
  using SubgraphLookup = std::function<const Subgraph&(UserId)>;

  GnnTrainer(const InteractionGraph& graph, const FeatureStore& features, SubgraphLookup subgraphs, GnnTrainConfig cfg)
      : graph_(graph), features_(features), subgraphs_(std::move(subgraphs)), cfg_(cfg) {}

  // Gathered neighbourhood of a target, reused across steps.
  GcnTrace& gathered(UserId u) {
    auto it = gather_cache_.find(u);
    if (it == gather_cache_.end()) it = gather_cache_.emplace(u, gcn_gather(SubgraphAdjacency(subgraphs_(u)), features_, u)).first;
    return it->second;
  }

  double validation_recall(const GnnParams& p, std::span<const ValidationCase> cases) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& c : cases) {
      if (c.ground_truth.empty()) continue;
      GcnTrace& tr = gathered(c.target);
      gcn_apply(tr, p);
      const Vector& h = tr.h;
      const auto& hist = graph_.items_of(c.target);
      const RankedList ranked = rank_items(subgraphs_(c.target), h, features_, hist, c.target);
      total += recall_at_k(ranked, c.ground_truth, cfg_.validation_k);
      ++n;
    }
    return n ? total / static_cast<double>(n) : 0.0;
  }

  // L2 summed over `samples`, with negatives drawn from `rng`.
  double sample_loss(const GnnParams& p, std::span<const GnnSample> samples, std::mt19937_64& rng, GnnParams* grad = nullptr) {
    double total = 0.0;
    for (const auto& s : samples) total += step_sample(p, s, rng, grad).value_or(0.0);
    return total;
  }

  GnnTrainResult train(GnnParams params, const std::vector<GnnSample>& samples, const std::vector<ValidationCase>& validation) {
    params.validate(features_.dim());
    GnnTrainResult result;
    Adam adam(cfg_.adam);
    EarlyStopping stopper(cfg_.patience, /*higher_is_better=*/true);
    const std::size_t eval_every = cfg_.eval_every ? cfg_.eval_every : std::max<std::size_t>(samples.size(), 1);

    result.initial_validation = validation_recall(params, validation);
    stopper.observe(result.initial_validation);
    result.validation_curve.push_back(result.initial_validation);
    GnnParams best = params;

    std::mt19937_64 rng(cfg_.seed);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    GnnParams grad = GnnParams::zeros_like(params);
    std::size_t since_eval = 0;
    for (std::size_t epoch = 0; epoch < cfg_.max_epochs && !result.early_stopped; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t idx : order) {
        for (Matrix* g : grad.tensors()) g->setZero();
        const auto loss = step_sample(params, samples[idx], rng, &grad, &result);
        if (loss) {
          if (!std::isfinite(*loss))
            throw TrainingError("GNN loss diverged at step " + std::to_string(result.steps) + " (target " +
                                std::to_string(samples[idx].target) + ", item " + std::to_string(samples[idx].positive) + ")");
          adam.step(params.tensors(), grad.tensors());
          ++result.steps;
        }
        if (++since_eval < eval_every) continue;
        since_eval = 0;
        const double val = validation_recall(params, validation);
        result.validation_curve.push_back(val);
        if (stopper.observe(val)) best = params;
        if (stopper.should_stop() || (cfg_.max_evaluations && stopper.evaluations() >= cfg_.max_evaluations)) {
          result.early_stopped = stopper.should_stop();
          break;
        }
      }
    }
    result.best_validation = stopper.best();
    result.params = std::move(best);
    return result;
  }

 private:
  std::optional<double> step_sample(const GnnParams& p, const GnnSample& s, std::mt19937_64& rng, GnnParams* grad,
                                    GnnTrainResult* stats = nullptr) {
    const Subgraph& sub = subgraphs_(s.target);
    const auto positives = graph_.items_of(s.target);
    NegativeSample neg;
    try {
      neg = sample_negatives(sub.items, positives, cfg_.negatives, rng);
    } catch (const ValidationError&) {
      if (stats) ++stats->skipped_samples;
      return std::nullopt;
    }
    if (stats && neg.short_pool) ++stats->short_pools;
    GcnTrace& tr = gathered(s.target);
    gcn_apply(tr, p);
    const BprSampleResult r = bpr_sample(tr.h, features_.item_features, s.positive, neg.items);
    if (grad) gcn_backward(tr, p, r.grad_h, *grad);
    return r.loss;
  }

  const InteractionGraph& graph_;
  const FeatureStore& features_;
  SubgraphLookup subgraphs_;
  GnnTrainConfig cfg_;
  std::unordered_map<UserId, GcnTrace> gather_cache_;
};

}  // namespace corona
