#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "corona/common.hpp"
#include "corona/features.hpp"
#include "corona/graph.hpp"
#include "corona/llm.hpp"
#include "corona/optim.hpp"
#include "corona/prompts.hpp"

namespace corona {

inline constexpr std::size_t kNumDistanceBuckets = 3;

// Distance encodings e1..e3 (one row each) and the fusion layer that maps
// concat(F_u, e_bucket) to the query space.
struct RetrieverParams {
  Matrix fusion_weight;      // (d + dim_e) x d
  Matrix fusion_bias;        // 1 x d
  Matrix distance_encoding;  // 3 x dim_e

  std::size_t dim() const { return static_cast<std::size_t>(fusion_weight.cols()); }
  std::size_t dim_e() const { return static_cast<std::size_t>(distance_encoding.cols()); }

  // Feature block starts as the identity so an untrained retriever ranks by
  // plain feature cosine; encodings are seeded N(0, 1) so their block can learn.
  static RetrieverParams identity_init(std::size_t d, std::size_t dim_e, std::uint64_t seed) {
    RetrieverParams p;
    p.fusion_weight = Matrix::Zero(static_cast<Eigen::Index>(d + dim_e), static_cast<Eigen::Index>(d));
    p.fusion_weight.topRows(static_cast<Eigen::Index>(d)).setIdentity();
    p.fusion_bias = Matrix::Zero(1, static_cast<Eigen::Index>(d));
    p.distance_encoding.resize(kNumDistanceBuckets, static_cast<Eigen::Index>(dim_e));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < p.distance_encoding.size(); ++i) p.distance_encoding.data()[i] = normal(rng);
    return p;
  }

  static RetrieverParams zeros_like(const RetrieverParams& o) {
    return {Matrix::Zero(o.fusion_weight.rows(), o.fusion_weight.cols()), Matrix::Zero(1, o.fusion_bias.cols()),
            Matrix::Zero(o.distance_encoding.rows(), o.distance_encoding.cols())};
  }

  std::vector<Matrix*> tensors() { return {&fusion_weight, &fusion_bias, &distance_encoding}; }
  std::vector<const Matrix*> tensors() const { return {&fusion_weight, &fusion_bias, &distance_encoding}; }

  void validate() const {
    if (distance_encoding.rows() != static_cast<Eigen::Index>(kNumDistanceBuckets))
      throw ValidationError("retriever needs exactly 3 distance encodings");
    if (fusion_weight.rows() != fusion_weight.cols() + distance_encoding.cols() || fusion_bias.rows() != 1 ||
        fusion_bias.cols() != fusion_weight.cols())
      throw ValidationError("retriever parameter shapes are inconsistent");
    if (!fusion_weight.allFinite() || !fusion_bias.allFinite() || !distance_encoding.allFinite())
      throw ValidationError("retriever parameters contain non-finite values");
  }

  Checkpoint to_checkpoint(std::uint64_t projection_seed) const {
    Checkpoint c;
    c.metadata = {{"kind", "retriever"}, {"projection_seed", projection_seed}, {"dim", dim()}, {"dim_e", dim_e()}};
    c.tensors = {{"fusion_weight", fusion_weight}, {"fusion_bias", fusion_bias}, {"distance_encoding", distance_encoding}};
    return c;
  }

  static RetrieverParams from_checkpoint(const Checkpoint& c) {
    if (c.metadata.value("kind", "") != "retriever") throw ValidationError("checkpoint is not a retriever checkpoint");
    RetrieverParams p{c.tensor("fusion_weight"), c.tensor("fusion_bias"), c.tensor("distance_encoding")};
    p.validate();
    return p;
  }
};

struct RetrievalConfig {
  std::size_t k = 3000;

  std::size_t stage2_k() const { return k / 2; }
  void validate() const {
    if (k < 2) throw ValidationError("retrieval k must be at least 2");
  }
};

// Encoding row used for a bucket; the target (bucket 0) uses e3.
inline Eigen::Index encoding_row(std::uint8_t bucket) { return bucket == 1 ? 0 : bucket == 2 ? 1 : 2; }

// Rows concat(F_u, e_bucket(u)) for every user.
inline Matrix fusion_inputs(const Matrix& user_features, const HopBuckets& buckets, const RetrieverParams& params) {
  const auto d = user_features.cols();
  const auto de = params.distance_encoding.cols();
  if (static_cast<std::size_t>(d) != params.dim()) throw ValidationError("feature dimension does not match retriever");
  if (buckets.size() != static_cast<std::size_t>(user_features.rows())) throw ValidationError("hop buckets do not cover all users");
  Matrix z(user_features.rows(), d + de);
  z.leftCols(d) = user_features;
  for (Eigen::Index u = 0; u < z.rows(); ++u)
    z.row(u).tail(de) = params.distance_encoding.row(encoding_row(buckets[static_cast<UserId>(u)]));
  return z;
}

// X_u = W^T concat(F_u, e_bucket(u)) + b for all users, target row included.
inline Matrix encode_users(const Matrix& user_features, const HopBuckets& buckets, const RetrieverParams& params) {
  Matrix x = fusion_inputs(user_features, buckets, params) * params.fusion_weight;
  x.rowwise() += params.fusion_bias.row(0);
  return x;
}

struct ScoredUser {
  UserId user;
  double score;
};

// Top-k candidates by cosine to `query`, best first; ties by ascending id,
// zero-norm rows last.
inline std::vector<ScoredUser> rank_candidates(const Vector& query, const Matrix& x, std::span<const UserId> candidates,
                                               std::size_t k) {
  const double qn = query.norm();
  if (!(qn > 0)) throw ValidationError("top_k_users: zero-norm query");
  if (query.size() != x.cols()) throw ValidationError("top_k_users: query and embedding dimensions differ");
  std::vector<ScoredUser> scored;
  scored.reserve(candidates.size());
  for (UserId u : candidates) {
    if (u >= static_cast<std::size_t>(x.rows())) throw LookupError("candidate user " + std::to_string(u) + " has no embedding");
    const double rn = x.row(u).norm();
    const double s = rn > 0 ? x.row(u).dot(query) / (rn * qn) : -std::numeric_limits<double>::infinity();
    scored.push_back({u, s});
  }
  const auto better = [](const ScoredUser& a, const ScoredUser& b) { return a.score > b.score || (a.score == b.score && a.user < b.user); };
  const std::size_t take = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), better);
  scored.resize(take);
  return scored;
}

// The k best candidates plus the target, as a sorted id set.
inline std::vector<UserId> top_k_users(const Vector& query, const Matrix& x, std::span<const UserId> candidates, std::size_t k,
                                       UserId target) {
  if (k == 0) throw ValidationError("top_k_users: k must be positive");
  if (std::find(candidates.begin(), candidates.end(), target) != candidates.end())
    throw ValidationError("top_k_users: target must not be a candidate");
  std::vector<UserId> out{target};
  for (const auto& s : rank_candidates(query, x, candidates, k)) out.push_back(s.user);
  std::sort(out.begin(), out.end());
  return out;
}

struct RetrievalContext {
  const InteractionGraph& graph;
  const FeatureStore& features;
  const TextStore& texts;
  const RetrieverParams& params;
  RetrievalConfig config;
  LlmGateway& gateway;
};

struct Stage1Result {
  Subgraph subgraph;
  CandidateSummary summary;
  QueryEmbedding query;
  std::string prompt;
  std::string response;
  HopBuckets buckets;
  Matrix user_embeddings;  // X for every user under this target's buckets
};

struct Stage2Result {
  Subgraph subgraph;
  QueryEmbedding query;
  std::string prompt;
  std::string response;
  bool empty_history = false;
};

inline Stage1Result stage1_retrieve(const RetrievalContext& ctx, UserId target) {
  ctx.config.validate();
  Stage1Result r;
  r.buckets = hop_distance(ctx.graph, target);
  r.prompt = preference_prompt(ctx.texts.profile(target));
  r.response = ctx.gateway.complete(r.prompt);
  r.query = ctx.gateway.encode_text(r.response, Stage::Preference);
  r.user_embeddings = encode_users(ctx.features.user_features, r.buckets, ctx.params);
  std::vector<UserId> pool;
  pool.reserve(ctx.graph.num_users());
  for (UserId u = 0; u < ctx.graph.num_users(); ++u)
    if (u != target) pool.push_back(u);
  const auto users = top_k_users(r.query.vector, r.user_embeddings, pool, ctx.config.k, target);
  r.subgraph = induce_subgraph(ctx.graph, users, Stage::Preference);
  r.summary = summarize(ctx.texts.item_text(r.subgraph.items));
  return r;
}

inline std::vector<ItemRecord> history_records(const InteractionGraph& g, const TextStore& texts, UserId u) {
  std::vector<ItemRecord> out;
  for (const auto& h : g.observed_history(u)) out.push_back(texts.item(h.item));
  return out;
}

inline Stage2Result stage2_retrieve(const RetrievalContext& ctx, const Stage1Result& stage1, UserId target,
                                    const std::vector<ItemRecord>& history) {
  if (!stage1.subgraph.contains_user(target)) throw ValidationError("stage 2: target missing from stage-1 subgraph");
  Stage2Result r;
  r.empty_history = history.empty();
  r.prompt = intent_prompt(stage1.summary, history, /*allow_empty_history=*/true);
  r.response = ctx.gateway.complete(r.prompt);
  r.query = ctx.gateway.encode_text(r.response, Stage::Intent);
  std::vector<UserId> pool;
  for (UserId u : stage1.subgraph.users)
    if (u != target) pool.push_back(u);
  const auto users = top_k_users(r.query.vector, stage1.user_embeddings, pool, ctx.config.stage2_k(), target);
  r.subgraph = induce_subgraph(ctx.graph, users, Stage::Intent);
  return r;
}

inline Stage2Result stage2_retrieve(const RetrievalContext& ctx, const Stage1Result& stage1, UserId target) {
  return stage2_retrieve(ctx, stage1, target, history_records(ctx.graph, ctx.texts, target));
}

enum class RetrieverLossKind { Probability, LogProbability };

namespace detail {

inline Vector softmax(const Vector& logits) {
  Vector p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

// dL/dlogits for one softmax term of the retriever loss.
inline Vector softmax_term_grad(const Vector& p, std::span<const UserId> true_users, RetrieverLossKind kind, double& loss) {
  Vector g(p.size());
  if (kind == RetrieverLossKind::Probability) {
    // L = -sum_t p_t  =>  dL/ds_j = p_j * (S - [j in N]),  S = sum_t p_t
    double s = 0.0;
    for (UserId t : true_users) s += p(t);
    loss -= s;
    g = p * s;
    for (UserId t : true_users) g(t) -= p(t);
  } else {
    // L = -sum_t log p_t  =>  dL/ds_j = |N| p_j - [j in N]
    for (UserId t : true_users) loss -= std::log(p(t));
    g = p * static_cast<double>(true_users.size());
    for (UserId t : true_users) g(t) -= 1.0;
  }
  return g;
}

inline void check_true_users(std::span<const UserId> true_users, Eigen::Index n) {
  if (n == 0) throw ValidationError("retriever_loss: empty user universe");
  for (UserId t : true_users)
    if (t >= static_cast<std::size_t>(n)) throw LookupError("retriever_loss: true user " + std::to_string(t) + " out of range");
}

}  // namespace detail

// L1 = -sum_{u in N_v} [softmax_u(X q1) + softmax_u(X q2)], softmax over all rows of X.
// When `grad_x` is given it receives dL1/dX.
inline double retriever_loss(const Vector& q1, const Vector& q2, const Matrix& x, std::span<const UserId> true_users,
                             RetrieverLossKind kind = RetrieverLossKind::Probability, Matrix* grad_x = nullptr) {
  detail::check_true_users(true_users, x.rows());
  double loss = 0.0;
  const Vector g1 = detail::softmax_term_grad(detail::softmax(x * q1), true_users, kind, loss);
  const Vector g2 = detail::softmax_term_grad(detail::softmax(x * q2), true_users, kind, loss);
  if (grad_x) *grad_x = g1 * q1.transpose() + g2 * q2.transpose();
  return loss;
}

struct RetrieverLossGrad {
  double loss = 0.0;
  RetrieverParams grad;
};

// Loss and parameter gradient without materialising X. With W split into a
// feature block W_f and an encoding block W_e, logit_j = F_j.(W_f q) +
// e_b(j).(W_e q) + b.q, so every gradient is a rank-2 update in q1, q2.
inline RetrieverLossGrad retriever_loss_and_grad(const Matrix& user_features, const HopBuckets& buckets,
                                                 const RetrieverParams& params, const Vector& q1, const Vector& q2,
                                                 std::span<const UserId> true_users,
                                                 RetrieverLossKind kind = RetrieverLossKind::Probability) {
  detail::check_true_users(true_users, user_features.rows());
  const auto d = user_features.cols();
  const auto de = params.distance_encoding.cols();
  if (static_cast<std::size_t>(d) != params.dim()) throw ValidationError("feature dimension does not match retriever");
  if (buckets.size() != static_cast<std::size_t>(user_features.rows())) throw ValidationError("hop buckets do not cover all users");
  const auto wf = params.fusion_weight.topRows(d);
  const auto we = params.fusion_weight.bottomRows(de);
  const Vector b = params.fusion_bias.row(0).transpose();

  auto logits = [&](const Vector& q, Vector& we_q) {
    we_q = we * q;
    const Vector enc = params.distance_encoding * we_q;  // one value per bucket row
    Vector s = user_features * (wf * q);
    const double bq = b.dot(q);
    for (Eigen::Index j = 0; j < s.size(); ++j) s(j) += enc(encoding_row(buckets[static_cast<UserId>(j)])) + bq;
    return s;
  };
  Vector we_q1, we_q2;
  RetrieverLossGrad out;
  const Vector g1 = detail::softmax_term_grad(detail::softmax(logits(q1, we_q1)), true_users, kind, out.loss);
  const Vector g2 = detail::softmax_term_grad(detail::softmax(logits(q2, we_q2)), true_users, kind, out.loss);

  // Per-bucket sums of the logit gradients.
  Vector s1 = Vector::Zero(kNumDistanceBuckets), s2 = Vector::Zero(kNumDistanceBuckets);
  for (Eigen::Index j = 0; j < g1.size(); ++j) {
    const auto r = encoding_row(buckets[static_cast<UserId>(j)]);
    s1(r) += g1(j);
    s2(r) += g2(j);
  }
  out.grad = RetrieverParams::zeros_like(params);
  out.grad.fusion_weight.topRows(d) = (user_features.transpose() * g1) * q1.transpose() + (user_features.transpose() * g2) * q2.transpose();
  out.grad.fusion_weight.bottomRows(de) = (params.distance_encoding.transpose() * s1) * q1.transpose() +
                                          (params.distance_encoding.transpose() * s2) * q2.transpose();
  out.grad.fusion_bias.row(0) = (g1.sum() * q1 + g2.sum() * q2).transpose();
  out.grad.distance_encoding = s1 * we_q1.transpose() + s2 * we_q2.transpose();
  return out;
}

struct RetrieverSample {
  UserId target;
  ItemId item;
};

// Query embeddings from one reasoning pass per user, reused across epochs.
struct UserQueries {
  Vector preference;
  Vector intent;
};

struct RetrieverTrainConfig {
  AdamConfig adam{};
  std::size_t patience = 10;
  std::size_t max_epochs = 20;
  std::size_t eval_every = 0;  // steps between validations; 0 means once per epoch
  std::size_t max_evaluations = 0;  // 0: unbounded
  std::uint64_t seed = 0;
  RetrieverLossKind loss_kind = RetrieverLossKind::Probability;
};

struct RetrieverTrainResult {
  RetrieverParams params;
  double initial_validation = 0.0;
  double best_validation = 0.0;
  std::size_t steps = 0;
  std::vector<double> validation_curve;
  bool early_stopped = false;
};

// True users of a sample: everyone else who interacted with the item.
inline std::vector<UserId> true_users_for(const InteractionGraph& g, const RetrieverSample& s) {
  std::vector<UserId> out;
  for (UserId u : g.users_of(s.item))
    if (u != s.target) out.push_back(u);
  return out;
}

class RetrieverTrainer {
 public:
  using QueryLookup = std::function<const UserQueries&(UserId)>;

  RetrieverTrainer(const InteractionGraph& graph, const Matrix& user_features, QueryLookup queries, RetrieverTrainConfig cfg)
      : graph_(graph), features_(user_features), queries_(std::move(queries)), cfg_(cfg) {}

  const HopBuckets& buckets(UserId u) {
    auto it = bucket_cache_.find(u);
    if (it == bucket_cache_.end()) it = bucket_cache_.emplace(u, hop_distance(graph_, u)).first;
    return it->second;
  }

  // Mean L1 over samples with at least one true user; 0 when none qualify.
  double mean_loss(const RetrieverParams& p, std::span<const RetrieverSample> samples) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& s : samples) {
      const auto truth = true_users_for(graph_, s);
      if (truth.empty()) continue;
      const auto& q = queries_(s.target);
      total += retriever_loss_and_grad(features_, buckets(s.target), p, q.preference, q.intent, truth, cfg_.loss_kind).loss;
      ++n;
    }
    return n ? total / static_cast<double>(n) : 0.0;
  }

  RetrieverTrainResult train(RetrieverParams params, const std::vector<RetrieverSample>& train_samples,
                             const std::vector<RetrieverSample>& validation) {
    params.validate();
    RetrieverTrainResult result;
    Adam adam(cfg_.adam);
    EarlyStopping stopper(cfg_.patience, /*higher_is_better=*/false);
    const std::size_t eval_every = cfg_.eval_every ? cfg_.eval_every : std::max<std::size_t>(train_samples.size(), 1);

    result.initial_validation = mean_loss(params, validation);
    stopper.observe(result.initial_validation);
    result.validation_curve.push_back(result.initial_validation);
    RetrieverParams best = params;

    std::mt19937_64 rng(cfg_.seed);
    std::vector<std::size_t> order(train_samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t since_eval = 0;
    for (std::size_t epoch = 0; epoch < cfg_.max_epochs && !result.early_stopped; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t idx : order) {
        const auto& s = train_samples[idx];
        const auto truth = true_users_for(graph_, s);
        if (!truth.empty()) {
          const auto& q = queries_(s.target);
          auto lg = retriever_loss_and_grad(features_, buckets(s.target), params, q.preference, q.intent, truth, cfg_.loss_kind);
          if (!std::isfinite(lg.loss))
            throw TrainingError("retriever loss diverged at step " + std::to_string(result.steps) + " (target " +
                                std::to_string(s.target) + ", item " + std::to_string(s.item) + ")");
          adam.step(params.tensors(), lg.grad.tensors());
          ++result.steps;
        }
        if (++since_eval < eval_every) continue;
        since_eval = 0;
        const double val = mean_loss(params, validation);
        if (!std::isfinite(val)) throw TrainingError("retriever validation loss is non-finite after step " + std::to_string(result.steps));
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
  const InteractionGraph& graph_;
  const Matrix& features_;
  QueryLookup queries_;
  RetrieverTrainConfig cfg_;
  std::unordered_map<UserId, HopBuckets> bucket_cache_;
};

}  // namespace corona
