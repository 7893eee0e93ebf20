#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "corona/common.hpp"
#include "corona/evaluate.hpp"
#include "corona/features.hpp"
#include "corona/gnn.hpp"
#include "corona/graph.hpp"
#include "corona/llm.hpp"
#include "corona/retrieval.hpp"
#include "corona/synthetic.hpp"

namespace corona {

namespace fs = std::filesystem;

struct TrainingConfig {
  double lr = 1e-6;
  std::size_t patience = 10;
  std::size_t negatives = 10;
  std::size_t dim = 128;
  std::size_t dim_e = 2;
  std::size_t hidden = 128;
  std::size_t max_epochs = 20;
  std::size_t eval_every = 0;
  std::size_t max_evaluations = 0;
  bool gnn_bias = false;
  RetrieverLossKind retriever_loss = RetrieverLossKind::Probability;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("training.lr must be a finite non-negative number");
    if (patience == 0 || negatives == 0 || dim == 0 || dim_e == 0 || hidden == 0 || max_epochs == 0)
      throw ValidationError("training hyperparameters must be positive");
  }
};

struct PathsConfig {
  fs::path interactions, mask, users, items, user_features, item_features;
  fs::path workspace = "corona-workspace";
  fs::path cache_dir;  // defaults to <workspace>/llm-cache

  fs::path bundle_dir() const { return workspace / "bundle"; }
  fs::path checkpoint_dir() const { return workspace / "checkpoints"; }
  fs::path effective_cache_dir() const { return cache_dir.empty() ? workspace / "llm-cache" : cache_dir; }
};

struct PipelineConfig {
  PathsConfig paths;
  RetrievalConfig retrieval;
  LlmConfig llm;
  EvalConfig eval;
  TrainingConfig training;
  SynthConfig synth;
  std::uint64_t seed = 0;

  void validate() const {
    retrieval.validate();
    llm.validate();
    eval.validate();
    training.validate();
    if (llm.dim != training.dim) throw ValidationError("llm.dim must equal training.dim");
  }

  nlohmann::json to_json() const;
  // Relative paths are resolved against `base`.
  static PipelineConfig from_json(nlohmann::json j, const fs::path& base = {});
  static PipelineConfig load(const fs::path& path);
};

// Replaces ${NAME} in every string value with the environment variable NAME.
inline void interpolate_env(nlohmann::json& j) {
  if (j.is_string()) {
    static const std::regex var(R"(\$\{([A-Za-z_][A-Za-z0-9_]*)\})");
    const std::string s = j.get<std::string>();
    std::string out;
    auto begin = std::sregex_iterator(s.begin(), s.end(), var);
    std::size_t last = 0;
    for (auto it = begin; it != std::sregex_iterator(); ++it) {
      const auto& m = *it;
      const char* value = std::getenv(m[1].str().c_str());
      if (!value) throw ValidationError("config references unset environment variable " + m[1].str());
      out += s.substr(last, static_cast<std::size_t>(m.position(0)) - last) + value;
      last = static_cast<std::size_t>(m.position(0) + m.length(0));
    }
    out += s.substr(last);
    j = out;
  } else if (j.is_object() || j.is_array()) {
    for (auto& child : j) interpolate_env(child);
  }
}

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ValidationError("config: '" + section + "' must be an object");
  for (const auto& [key, _] : obj.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ValidationError("config: unknown key '" + (section.empty() ? key : section + "." + key) + "'");
}

inline BackendSpec backend_from_json(const nlohmann::json& j, const std::string& section) {
  check_keys(j, section, {"backend", "seed", "endpoint", "model", "api_key_env"});
  const std::string kind = j.value("backend", "mock");
  if (kind == "mock") return MockBackend{j.value("seed", std::uint64_t{0})};
  if (kind == "openai") {
    OpenAiCompatibleBackend b;
    b.endpoint = j.value("endpoint", std::string("https://api.openai.com/v1"));
    b.model = j.value("model", std::string());
    b.api_key_env = j.value("api_key_env", b.api_key_env);
    if (b.model.empty()) throw ValidationError("config: " + section + ".model is required for the openai backend");
    return b;
  }
  throw ValidationError("config: " + section + ".backend must be 'mock' or 'openai'");
}

inline nlohmann::json backend_to_json(const BackendSpec& spec) {
  if (const auto* m = std::get_if<MockBackend>(&spec)) return {{"backend", "mock"}, {"seed", m->seed}};
  const auto& o = std::get<OpenAiCompatibleBackend>(spec);
  return {{"backend", "openai"}, {"endpoint", o.endpoint}, {"model", o.model}, {"api_key_env", o.api_key_env}};
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline PipelineConfig PipelineConfig::from_json(nlohmann::json j, const fs::path& base) {
  using detail::read_opt;
  interpolate_env(j);
  detail::check_keys(j, "", {"seed", "paths", "retrieval", "llm", "eval", "training", "synth"});
  PipelineConfig c;
  read_opt(j, "seed", c.seed);
  auto path_of = [&](const nlohmann::json& p, const char* key, fs::path& out) {
    if (!p.contains(key)) return;
    fs::path v = p.at(key).get<std::string>();
    out = v.is_absolute() || base.empty() ? v : base / v;
  };
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    detail::check_keys(p, "paths", {"interactions", "mask", "users", "items", "user_features", "item_features", "workspace", "cache_dir"});
    path_of(p, "interactions", c.paths.interactions);
    path_of(p, "mask", c.paths.mask);
    path_of(p, "users", c.paths.users);
    path_of(p, "items", c.paths.items);
    path_of(p, "user_features", c.paths.user_features);
    path_of(p, "item_features", c.paths.item_features);
    path_of(p, "workspace", c.paths.workspace);
    path_of(p, "cache_dir", c.paths.cache_dir);
  } else if (!base.empty()) {
    c.paths.workspace = base / c.paths.workspace;
  }
  if (j.contains("retrieval")) {
    detail::check_keys(j["retrieval"], "retrieval", {"k"});
    read_opt(j["retrieval"], "k", c.retrieval.k);
  }
  if (j.contains("training")) {
    const auto& t = j["training"];
    detail::check_keys(t, "training", {"lr", "patience", "negatives", "dim", "dim_e", "hidden", "max_epochs", "eval_every",
                                       "max_evaluations", "gnn_bias", "retriever_loss"});
    read_opt(t, "lr", c.training.lr);
    read_opt(t, "patience", c.training.patience);
    read_opt(t, "negatives", c.training.negatives);
    read_opt(t, "dim", c.training.dim);
    read_opt(t, "dim_e", c.training.dim_e);
    read_opt(t, "hidden", c.training.hidden);
    read_opt(t, "max_epochs", c.training.max_epochs);
    read_opt(t, "eval_every", c.training.eval_every);
    read_opt(t, "max_evaluations", c.training.max_evaluations);
    read_opt(t, "gnn_bias", c.training.gnn_bias);
    const std::string loss = t.value("retriever_loss", std::string("probability"));
    if (loss == "probability") c.training.retriever_loss = RetrieverLossKind::Probability;
    else if (loss == "log") c.training.retriever_loss = RetrieverLossKind::LogProbability;
    else throw ValidationError("config: training.retriever_loss must be 'probability' or 'log'");
  }
  c.llm.dim = c.training.dim;
  if (j.contains("llm")) {
    const auto& l = j["llm"];
    detail::check_keys(l, "llm", {"chat", "embedding", "temperature", "embed_dim_native", "projection_seed", "max_in_flight",
                                  "max_attempts", "initial_backoff_ms"});
    if (l.contains("chat")) c.llm.chat = detail::backend_from_json(l["chat"], "llm.chat");
    if (l.contains("embedding")) c.llm.embedding = detail::backend_from_json(l["embedding"], "llm.embedding");
    read_opt(l, "temperature", c.llm.temperature);
    read_opt(l, "embed_dim_native", c.llm.embed_dim_native);
    read_opt(l, "projection_seed", c.llm.projection_seed);
    read_opt(l, "max_in_flight", c.llm.max_in_flight);
    read_opt(l, "max_attempts", c.llm.max_attempts);
    if (l.contains("initial_backoff_ms")) c.llm.initial_backoff = std::chrono::milliseconds(l["initial_backoff_ms"].get<std::int64_t>());
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::check_keys(e, "eval", {"cutoffs", "runs", "cold_start_threshold", "modes", "workers"});
    read_opt(e, "cutoffs", c.eval.cutoffs);
    read_opt(e, "runs", c.eval.runs);
    read_opt(e, "cold_start_threshold", c.eval.cold_start_threshold);
    read_opt(e, "workers", c.eval.workers);
    if (e.contains("modes")) {
      c.eval.modes.clear();
      for (const auto& m : e["modes"]) c.eval.modes.push_back(mode_from_string(m.get<std::string>()));
    }
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    detail::check_keys(s, "synth", {"users", "items", "clusters", "p_in", "seed", "min_interactions", "max_interactions",
                                    "zipf_exponent", "user_noise", "item_noise", "genres_per_cluster", "p_genre"});
    read_opt(s, "users", c.synth.users);
    read_opt(s, "items", c.synth.items);
    read_opt(s, "clusters", c.synth.clusters);
    read_opt(s, "p_in", c.synth.p_in);
    read_opt(s, "seed", c.synth.seed);
    read_opt(s, "min_interactions", c.synth.min_interactions);
    read_opt(s, "max_interactions", c.synth.max_interactions);
    read_opt(s, "zipf_exponent", c.synth.zipf_exponent);
    read_opt(s, "user_noise", c.synth.user_noise);
    read_opt(s, "item_noise", c.synth.item_noise);
    read_opt(s, "genres_per_cluster", c.synth.genres_per_cluster);
    read_opt(s, "p_genre", c.synth.p_genre);
    c.synth.validate();
  }
  c.llm.cache_dir = c.paths.effective_cache_dir();
  c.validate();
  return c;
}

inline PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return from_json(std::move(j), path.parent_path());
}

inline nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json modes = nlohmann::json::array();
  for (Mode m : eval.modes) modes.push_back(to_string(m));
  return {
      {"seed", seed},
      {"paths",
       {{"interactions", paths.interactions.string()},
        {"mask", paths.mask.string()},
        {"users", paths.users.string()},
        {"items", paths.items.string()},
        {"user_features", paths.user_features.string()},
        {"item_features", paths.item_features.string()},
        {"workspace", paths.workspace.string()},
        {"cache_dir", paths.cache_dir.string()}}},
      {"retrieval", {{"k", retrieval.k}}},
      {"llm",
       {{"chat", detail::backend_to_json(llm.chat)},
        {"embedding", detail::backend_to_json(llm.embedding)},
        {"temperature", llm.temperature},
        {"embed_dim_native", llm.embed_dim_native},
        {"projection_seed", llm.projection_seed},
        {"max_in_flight", llm.max_in_flight},
        {"max_attempts", llm.max_attempts},
        {"initial_backoff_ms", llm.initial_backoff.count()}}},
      {"eval",
       {{"cutoffs", eval.cutoffs},
        {"runs", eval.runs},
        {"cold_start_threshold", eval.cold_start_threshold},
        {"modes", modes},
        {"workers", eval.workers}}},
      {"training",
       {{"lr", training.lr},
        {"patience", training.patience},
        {"negatives", training.negatives},
        {"dim", training.dim},
        {"dim_e", training.dim_e},
        {"hidden", training.hidden},
        {"max_epochs", training.max_epochs},
        {"eval_every", training.eval_every},
        {"max_evaluations", training.max_evaluations},
        {"gnn_bias", training.gnn_bias},
        {"retriever_loss", training.retriever_loss == RetrieverLossKind::Probability ? "probability" : "log"}}},
      {"synth",
       {{"users", synth.users},
        {"items", synth.items},
        {"clusters", synth.clusters},
        {"p_in", synth.p_in},
        {"seed", synth.seed},
        {"min_interactions", synth.min_interactions},
        {"max_interactions", synth.max_interactions},
        {"zipf_exponent", synth.zipf_exponent},
        {"user_noise", synth.user_noise},
        {"item_noise", synth.item_noise},
        {"genres_per_cluster", synth.genres_per_cluster},
        {"p_genre", synth.p_genre}}}};
}

// Validated graph, features and text, as stored in a workspace.
struct DatasetBundle {
  InteractionGraph graph;
  FeatureStore features;
  TextStore texts;

  std::string fingerprint() const {
    std::ostringstream os;
    os << graph.fingerprint();
    write_crnf(os, features.user_features);
    write_crnf(os, features.item_features);
    texts.write_users(os, graph);
    texts.write_items(os, graph);
    return sha256_hex(os.str());
  }

  static DatasetBundle from_dataset(const Dataset& ds) { return {ds.graph, ds.features, ds.texts}; }

  // Reads raw files. A missing mask file is reported through `warn` and
  // treated as an empty mask.
  static DatasetBundle ingest(const PathsConfig& p, std::size_t dim, const std::function<void(const std::string&)>& warn) {
    auto open = [](const fs::path& path, const char* what) {
      if (path.empty()) throw ValidationError(std::string("config: paths.") + what + " is not set");
      std::ifstream in(path);
      if (!in) throw MissingArtifactError(std::string("cannot open ") + what + " file " + path.string());
      return in;
    };
    DatasetBundle b;
    auto inter_in = open(p.interactions, "interactions");
    const auto interactions = read_interactions(inter_in, p.interactions.string());
    std::vector<MaskPair> mask;
    if (p.mask.empty() || !fs::exists(p.mask)) {
      if (warn) warn("mask file " + (p.mask.empty() ? std::string("(unset)") : p.mask.string()) + " not found; proceeding with an empty mask");
    } else {
      std::ifstream mask_in(p.mask);
      mask = read_mask_pairs(mask_in, p.mask.string());
    }
    b.graph = InteractionGraph::build(interactions, mask);
    b.features = {load_features(p.user_features, b.graph.num_users(), dim), load_features(p.item_features, b.graph.num_items(), dim)};
    b.features.validate(b.graph);
    auto users_in = open(p.users, "users");
    auto items_in = open(p.items, "items");
    b.texts = TextStore::load(users_in, items_in, b.graph);
    return b;
  }

  void save(const fs::path& dir) const {
    fs::create_directories(dir);
    {
      std::ofstream out(dir / "graph.json");
      out << graph.to_json().dump();
    }
    save_features(dir / "user_features.crnf", features.user_features);
    save_features(dir / "item_features.crnf", features.item_features);
    {
      std::ofstream out(dir / "users.jsonl");
      texts.write_users(out, graph);
    }
    {
      std::ofstream out(dir / "items.jsonl");
      texts.write_items(out, graph);
    }
    std::ofstream out(dir / "manifest.json");
    out << nlohmann::json{{"fingerprint", fingerprint()},
                          {"users", graph.num_users()},
                          {"items", graph.num_items()},
                          {"edges", graph.num_edges()},
                          {"masked", graph.masked_edges().size()},
                          {"dim", features.dim()}}
               .dump(2);
  }

  static std::optional<std::string> stored_fingerprint(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) return std::nullopt;
    try {
      return nlohmann::json::parse(in).at("fingerprint").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;
    }
  }

  static DatasetBundle load(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json")) throw MissingArtifactError("no dataset bundle in " + dir.string() + " (run ingest first)");
    std::ifstream manifest_in(dir / "manifest.json");
    const auto manifest = nlohmann::json::parse(manifest_in);
    std::ifstream graph_in(dir / "graph.json");
    DatasetBundle b;
    b.graph = InteractionGraph::from_json(nlohmann::json::parse(graph_in));
    const auto dim = manifest.at("dim").get<std::size_t>();
    b.features = {load_features(dir / "user_features.crnf", b.graph.num_users(), dim),
                  load_features(dir / "item_features.crnf", b.graph.num_items(), dim)};
    std::ifstream users_in(dir / "users.jsonl"), items_in(dir / "items.jsonl");
    b.texts = TextStore::load(users_in, items_in, b.graph);
    return b;
  }
};

// Versioned files <stem>-v0001.ckpt, <stem>-v0002.ckpt, ...; never overwritten.
inline std::optional<fs::path> latest_checkpoint(const fs::path& dir, const std::string& stem) {
  if (!fs::exists(dir)) return std::nullopt;
  std::optional<fs::path> best;
  const std::regex pattern(stem + R"(-v(\d{4,})\.ckpt)");
  int best_version = -1;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, pattern) && std::stoi(m[1]) > best_version) {
      best_version = std::stoi(m[1]);
      best = e.path();
    }
  }
  return best;
}

inline fs::path next_checkpoint_path(const fs::path& dir, const std::string& stem) {
  fs::create_directories(dir);
  int version = 1;
  if (auto latest = latest_checkpoint(dir, stem)) {
    const std::string name = latest->filename().string();
    version = std::stoi(name.substr(stem.size() + 2, name.size() - stem.size() - 7)) + 1;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "-v%04d.ckpt", version);
  return dir / (stem + buf);
}

inline std::string gnn_checkpoint_stem(Mode m) {
  std::string s = std::string("gnn-") + to_string(m);
  std::transform(s.begin(), s.end(), s.begin(), ::tolower);
  return s;
}

inline Checkpoint require_checkpoint(const fs::path& dir, const std::string& stem) {
  auto path = latest_checkpoint(dir, stem);
  if (!path) throw MissingArtifactError("no " + stem + " checkpoint in " + dir.string() + " (train first)");
  return read_checkpoint(*path);
}

// Observed latest item of each user with at least 3 observed interactions,
// held out for validation; both training stages fit on the remaining graph.
struct ValidationSplit {
  InteractionGraph fit;
  std::vector<std::pair<UserId, ItemId>> pairs;
};

inline ValidationSplit make_validation_split(const InteractionGraph& g) {
  ValidationSplit s;
  for (UserId u = 0; u < g.num_users(); ++u) {
    const auto hist = g.observed_history(u);
    if (hist.size() >= 3) s.pairs.emplace_back(u, hist.back().item);
  }
  s.fit = g.with_extra_mask(s.pairs);
  return s;
}

// Drives retrieval, training and evaluation over one dataset.
class Pipeline {
 public:
  Pipeline(const DatasetBundle& data, PipelineConfig cfg, LlmGateway& gateway)
      : data_(data), cfg_(std::move(cfg)), gateway_(gateway), split_(make_validation_split(data.graph)) {
    data_.features.validate(data_.graph);
    if (data_.features.dim() != cfg_.training.dim)
      throw ValidationError("feature dimension " + std::to_string(data_.features.dim()) + " differs from training.dim " +
                            std::to_string(cfg_.training.dim));
  }

  const ValidationSplit& split() const { return split_; }
  const PipelineConfig& config() const { return cfg_; }

  struct CoronaTrace {
    Stage1Result stage1;
    Stage2Result stage2;
  };

  CoronaTrace corona_retrieve(const InteractionGraph& g, const RetrieverParams& params, UserId target) {
    const RetrievalContext ctx{g, data_.features, data_.texts, params, cfg_.retrieval, gateway_};
    CoronaTrace t{stage1_retrieve(ctx, target), {}};
    t.stage2 = stage2_retrieve(ctx, t.stage1, target);
    return t;
  }

  // Subgraph rule of `mode` over `g`; Corona needs retriever params.
  SubgraphRule rule(Mode mode, const InteractionGraph& g, const RetrieverParams* params) {
    switch (mode) {
      case Mode::Corona:
        if (!params) throw ValidationError("Corona mode needs retriever parameters");
        return [this, &g, params](UserId u) { return corona_retrieve(g, *params, u).stage2.subgraph; };
      case Mode::FullGraph: {
        auto full = std::make_shared<Subgraph>(full_graph_subgraph(g));
        return [full](UserId) { return *full; };
      }
      case Mode::Fixed1Hop:
        return [&g](UserId u) { return fixed_hop_subgraph(g, u, 1); };
      case Mode::Fixed2Hop:
        return [&g](UserId u) { return fixed_hop_subgraph(g, u, 2); };
    }
    throw ValidationError("unknown mode");
  }

  RetrieverTrainResult train_retriever(std::uint64_t seed) {
    const auto& t = cfg_.training;
    RetrieverParams init = RetrieverParams::identity_init(t.dim, t.dim_e, mix64(seed ^ 0x7265747269657665ULL));
    // One reasoning pass per user with the initial retriever; reused across epochs.
    std::vector<UserQueries> queries(split_.fit.num_users());
    for (UserId u = 0; u < split_.fit.num_users(); ++u) {
      const auto tr = corona_retrieve(split_.fit, init, u);
      queries[u] = {tr.stage1.query.vector, tr.stage2.query.vector};
    }
    std::vector<RetrieverSample> train, val;
    for (UserId u = 0; u < split_.fit.num_users(); ++u)
      for (ItemId v : split_.fit.items_of(u)) train.push_back({u, v});
    for (const auto& [u, v] : split_.pairs) val.push_back({u, v});
    RetrieverTrainConfig rc;
    rc.adam.lr = t.lr;
    rc.patience = t.patience;
    rc.max_epochs = t.max_epochs;
    rc.eval_every = t.eval_every;
    rc.max_evaluations = t.max_evaluations;
    rc.seed = seed;
    rc.loss_kind = t.retriever_loss;
    RetrieverTrainer trainer(split_.fit, data_.features.user_features, [&queries](UserId u) -> const UserQueries& { return queries[u]; }, rc);
    return trainer.train(std::move(init), train, val);
  }

  GnnTrainResult train_gnn(Mode mode, const RetrieverParams* retriever, std::uint64_t seed) {
    const auto& t = cfg_.training;
    const auto& fit = split_.fit;
    auto r = rule(mode, fit, retriever);
    std::unordered_map<UserId, Subgraph> cache;
    auto lookup = [&](UserId u) -> const Subgraph& {
      auto it = cache.find(u);
      if (it == cache.end()) it = cache.emplace(u, r(u)).first;
      return it->second;
    };
    std::vector<GnnSample> samples;
    for (UserId u = 0; u < fit.num_users(); ++u)
      for (ItemId v : fit.items_of(u)) samples.push_back({u, v});
    std::vector<ValidationCase> val;
    for (const auto& [u, v] : split_.pairs) val.push_back({u, {v}});
    GnnTrainConfig gc;
    gc.adam.lr = t.lr;
    gc.negatives = t.negatives;
    gc.patience = t.patience;
    gc.max_epochs = t.max_epochs;
    gc.eval_every = t.eval_every;
    gc.max_evaluations = t.max_evaluations;
    gc.seed = seed;
    GnnTrainer trainer(fit, data_.features, lookup, gc);
    return trainer.train(GnnParams::glorot(t.dim, t.hidden, t.dim, t.gnn_bias, mix64(seed ^ 0x676e6eULL)), samples, val);
  }

  RunMetrics evaluate(Mode mode, const RetrieverParams* retriever, const GnnParams& gnn, const std::vector<TestCase>& cases) {
    return evaluate_run(data_.graph, cases, rule(mode, data_.graph, retriever), make_gcn_ranker(data_.graph, data_.features, gnn),
                        cfg_.eval.cutoffs, cfg_.eval.workers);
  }

  std::vector<TestCase> test_cases() const { return test_cases_from_mask(data_.graph); }
  std::vector<TestCase> cold_start_cases() const {
    return restrict_cases(test_cases(), cold_start_slice(data_.graph, cfg_.eval.cold_start_threshold));
  }

  std::uint64_t run_seed(std::size_t run) const { return mix64(cfg_.seed + 0x9e37ULL * (run + 1)); }

  struct AblationOutput {
    MetricsReport all;
    MetricsReport cold_start;
  };

  // Trains and evaluates every mode for cfg.eval.runs seeds. `log` receives
  // one line per finished (mode, run).
  AblationOutput ablate(const std::vector<Mode>& modes, const std::function<void(const std::string&)>& log = {}) {
    std::map<std::size_t, RetrieverParams> retrievers;
    std::map<std::pair<Mode, std::size_t>, RunMetrics> cold;
    const auto cases = test_cases();
    const auto cold_cases = cold_start_cases();
    auto runner = [&](Mode mode, std::size_t run) {
      const auto start = std::chrono::steady_clock::now();
      const std::uint64_t seed = run_seed(run);
      const RetrieverParams* rp = nullptr;
      if (mode == Mode::Corona) {
        auto it = retrievers.find(run);
        if (it == retrievers.end()) it = retrievers.emplace(run, train_retriever(seed).params).first;
        rp = &it->second;
      }
      const GnnTrainResult gnn = train_gnn(mode, rp, seed);
      RunMetrics m = evaluate(mode, rp, gnn.params, cases);
      if (!cold_cases.empty()) cold[{mode, run}] = evaluate(mode, rp, gnn.params, cold_cases);
      if (log) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::ostringstream os;
        os << to_string(mode) << " run " << run << " seed " << seed << ": R@20 " << (m.recall.count(20) ? m.recall.at(20) : 0.0)
           << ", gnn steps " << gnn.steps << ", " << std::fixed << std::setprecision(1) << secs << "s";
        log(os.str());
      }
      return m;
    };
    AblationOutput out{run_ablation(modes, cfg_.eval, runner), {}};
    out.cold_start.cutoffs = cfg_.eval.cutoffs;
    out.cold_start.slice = "cold-start";
    for (Mode m : modes) {
      ModeResult r{m, {}};
      for (std::size_t run = 0; run < cfg_.eval.runs; ++run)
        if (auto it = cold.find({m, run}); it != cold.end()) r.runs.push_back(it->second);
      out.cold_start.modes.push_back(std::move(r));
    }
    const std::string fp = data_.fingerprint();
    for (MetricsReport* rep : {&out.all, &out.cold_start}) {
      rep->dataset_fingerprint = fp;
      rep->config = cfg_.to_json();
    }
    return out;
  }

 private:
  const DatasetBundle& data_;
  PipelineConfig cfg_;
  LlmGateway& gateway_;
  ValidationSplit split_;
};

}  // namespace corona
