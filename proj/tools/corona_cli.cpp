#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "corona/pipeline.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace corona;

namespace {

void log(const std::string& msg) { std::cerr << "[corona] " << msg << '\n'; }

struct GlobalOptions {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> workspace, cache_dir;
  std::optional<std::size_t> k, workers, runs, max_epochs;
  std::optional<double> lr;
};

// "a.b.c=value"; value is parsed as JSON when possible, otherwise kept as a string.
void apply_set(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ValidationError("--set: malformed key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (!node->is_object() && !node->is_null()) throw ValidationError("--set: '" + key + "' descends into a non-object");
    start = dot + 1;
  }
}

nlohmann::json read_config_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

PipelineConfig resolve_config(const GlobalOptions& o) {
  nlohmann::json j = nlohmann::json::object();
  fs::path base = fs::current_path();
  if (!o.config.empty()) {
    j = read_config_json(o.config);
    base = fs::absolute(o.config).parent_path();
  }
  for (const auto& s : o.sets) apply_set(j, s);
  // Flag paths are relative to the working directory, not the config file.
  if (o.workspace) j["paths"]["workspace"] = fs::absolute(*o.workspace).string();
  if (o.cache_dir) j["paths"]["cache_dir"] = fs::absolute(*o.cache_dir).string();
  if (o.seed) j["seed"] = *o.seed;
  if (o.k) j["retrieval"]["k"] = *o.k;
  if (o.workers) j["eval"]["workers"] = *o.workers;
  if (o.runs) j["eval"]["runs"] = *o.runs;
  if (o.max_epochs) j["training"]["max_epochs"] = *o.max_epochs;
  if (o.lr) j["training"]["lr"] = *o.lr;
  return PipelineConfig::from_json(std::move(j), base);
}

void print_llm_stats(const LlmGateway& gw) {
  const auto s = gw.stats();
  std::ostringstream os;
  os << "llm: " << s.chat_calls << " chat calls, " << s.embedding_calls << " embedding calls, " << s.cache_hits
     << " cache hits, ~" << s.estimated_tokens << " tokens";
  log(os.str());
}

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void log_done(const std::string& what, const PipelineConfig& cfg, const Timer& t) {
  std::ostringstream os;
  os << what << " done (seed " << cfg.seed << ", " << std::fixed << std::setprecision(2) << t.seconds() << "s)";
  log(os.str());
}

// Checkpoints carry the dataset fingerprint; a stale one must be retrained.
void check_dataset(const Checkpoint& c, const std::string& fingerprint, const std::string& what) {
  if (c.metadata.value("dataset", std::string()) != fingerprint)
    throw ValidationError(what + " checkpoint was trained on a different dataset bundle; retrain it");
}

RetrieverParams load_retriever(const PipelineConfig& cfg, const std::string& fingerprint) {
  const Checkpoint c = require_checkpoint(cfg.paths.checkpoint_dir(), "retriever");
  check_dataset(c, fingerprint, "retriever");
  return RetrieverParams::from_checkpoint(c);
}

GnnParams load_gnn(const PipelineConfig& cfg, Mode mode, const std::string& fingerprint) {
  const Checkpoint c = require_checkpoint(cfg.paths.checkpoint_dir(), gnn_checkpoint_stem(mode));
  check_dataset(c, fingerprint, gnn_checkpoint_stem(mode));
  return GnnParams::from_checkpoint(c);
}

fs::path save_checkpoint(const PipelineConfig& cfg, const std::string& stem, Checkpoint c, const std::string& fingerprint) {
  c.metadata["dataset"] = fingerprint;
  c.metadata["seed"] = cfg.seed;
  const fs::path path = next_checkpoint_path(cfg.paths.checkpoint_dir(), stem);
  write_checkpoint(path, c);
  return path;
}

int cmd_synth(const PipelineConfig& cfg, const fs::path& out) {
  const Timer t;
  const Dataset ds = generate_synthetic(cfg.synth, cfg.llm);
  write_raw_dataset(ds, out);
  const auto raw = RawDatasetPaths::in(fs::path("."));
  nlohmann::json j = cfg.to_json();
  j["paths"] = {{"interactions", raw.interactions.filename().string()},
                {"mask", raw.mask.filename().string()},
                {"users", raw.users.filename().string()},
                {"items", raw.items.filename().string()},
                {"user_features", raw.user_features.filename().string()},
                {"item_features", raw.item_features.filename().string()},
                {"workspace", "workspace"}};
  std::ofstream(out / "corona.json") << j.dump(2) << '\n';
  std::cout << "wrote " << ds.graph.num_users() << " users, " << ds.graph.num_items() << " items, " << ds.graph.num_edges()
            << " observed and " << ds.mask.size() << " masked interactions to " << out.string() << '\n';
  log_done("synth", cfg, t);
  return 0;
}

int cmd_ingest(const PipelineConfig& cfg) {
  const Timer t;
  const DatasetBundle b = DatasetBundle::ingest(cfg.paths, cfg.training.dim, [](const std::string& w) { log("warning: " + w); });
  const std::string fp = b.fingerprint();
  const auto dir = cfg.paths.bundle_dir();
  if (DatasetBundle::stored_fingerprint(dir) == fp) {
    std::cout << "bundle unchanged " << fp << '\n';
  } else {
    b.save(dir);
    std::cout << "bundle " << fp << " (" << b.graph.num_users() << " users, " << b.graph.num_items() << " items, "
              << b.graph.num_edges() << " edges, " << b.graph.masked_edges().size() << " masked)\n";
  }
  log_done("ingest", cfg, t);
  return 0;
}

void train_retriever_step(Pipeline& p, const PipelineConfig& cfg, const std::string& fp) {
  const auto r = p.train_retriever(cfg.seed);
  Checkpoint c = r.params.to_checkpoint(cfg.llm.projection_seed);
  c.metadata["steps"] = r.steps;
  c.metadata["best_validation_loss"] = r.best_validation;
  const auto path = save_checkpoint(cfg, "retriever", std::move(c), fp);
  std::cout << "retriever: " << r.steps << " steps, validation loss " << r.initial_validation << " -> " << r.best_validation
            << (r.early_stopped ? " (early stop)" : "") << ", saved " << path.string() << '\n';
}

void train_gnn_step(Pipeline& p, const PipelineConfig& cfg, Mode mode, const std::string& fp) {
  std::optional<RetrieverParams> rp;
  if (mode == Mode::Corona) rp = load_retriever(cfg, fp);
  const auto r = p.train_gnn(mode, rp ? &*rp : nullptr, cfg.seed);
  Checkpoint c = r.params.to_checkpoint();
  c.metadata["mode"] = to_string(mode);
  c.metadata["steps"] = r.steps;
  c.metadata["best_validation_recall"] = r.best_validation;
  const auto path = save_checkpoint(cfg, gnn_checkpoint_stem(mode), std::move(c), fp);
  std::cout << "gnn (" << to_string(mode) << "): " << r.steps << " steps, validation recall " << r.initial_validation << " -> "
            << r.best_validation << (r.early_stopped ? " (early stop)" : "") << ", saved " << path.string() << '\n';
}

struct Session {
  PipelineConfig cfg;
  DatasetBundle data;
  std::string fingerprint;
  LlmGateway gateway;
  Pipeline pipeline;

  explicit Session(PipelineConfig c)
      : cfg(std::move(c)),
        data(DatasetBundle::load(cfg.paths.bundle_dir())),
        fingerprint(data.fingerprint()),
        gateway(cfg.llm),
        pipeline(data, cfg, gateway) {}
  ~Session() { print_llm_stats(gateway); }
};

int cmd_train(const PipelineConfig& cfg, bool retriever, std::optional<Mode> gnn_mode) {
  const Timer t;
  Session s(cfg);
  if (retriever) train_retriever_step(s.pipeline, cfg, s.fingerprint);
  if (gnn_mode) train_gnn_step(s.pipeline, cfg, *gnn_mode, s.fingerprint);
  log_done("training", cfg, t);
  return 0;
}

nlohmann::json trace_json(const InteractionGraph& g, const Pipeline::CoronaTrace& tr) {
  auto names = [&](const Subgraph& s) {
    nlohmann::json a = nlohmann::json::array();
    for (UserId u : s.users) a.push_back(g.users().name(u));
    return a;
  };
  return {{"stage1",
           {{"prompt", tr.stage1.prompt},
            {"response", tr.stage1.response},
            {"users", tr.stage1.subgraph.users.size()},
            {"items", tr.stage1.subgraph.items.size()},
            {"retrieved_users", names(tr.stage1.subgraph)}}},
          {"summary", tr.stage1.summary.rendered_text},
          {"stage2",
           {{"prompt", tr.stage2.prompt},
            {"response", tr.stage2.response},
            {"empty_history", tr.stage2.empty_history},
            {"users", tr.stage2.subgraph.users.size()},
            {"items", tr.stage2.subgraph.items.size()},
            {"retrieved_users", names(tr.stage2.subgraph)}}}};
}

int cmd_recommend(const PipelineConfig& cfg, const std::string& user, std::size_t n, bool trace, bool json) {
  if (n == 0) throw ValidationError("recommend: -n must be positive");
  const Timer t;
  Session s(cfg);
  const auto& g = s.data.graph;
  const UserId target = g.user_id(user);
  const RetrieverParams rp = load_retriever(cfg, s.fingerprint);
  const GnnParams gp = load_gnn(cfg, Mode::Corona, s.fingerprint);
  const auto tr = s.pipeline.corona_retrieve(g, rp, target);
  const Vector h = gcn_forward(tr.stage2.subgraph, s.data.features, gp, target);
  RankedList ranked = rank_items(tr.stage2.subgraph, h, s.data.features, g.items_of(target), target);
  if (ranked.entries.size() > n) ranked.entries.resize(n);

  if (json || trace) {
    nlohmann::json out = {{"user", user}, {"empty", ranked.empty_flagged}, {"items", nlohmann::json::array()}};
    for (const auto& [v, sc] : ranked.entries) out["items"].push_back({{"item", g.items().name(v)}, {"score", sc}});
    if (trace) out["trace"] = trace_json(g, tr);
    std::cout << out.dump(2) << '\n';
  } else {
    if (ranked.empty_flagged) std::cout << "no candidate items left for " << user << '\n';
    std::size_t rank = 1;
    for (const auto& [v, sc] : ranked.entries)
      std::cout << rank++ << '\t' << g.items().name(v) << '\t' << std::setprecision(6) << sc << '\n';
  }
  log_done("recommend", cfg, t);
  return 0;
}

void write_report(const fs::path& out, const nlohmann::json& j) {
  if (out.empty()) return;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream(out) << j.dump(2) << '\n';
  log("report written to " + out.string());
}

int cmd_evaluate(const PipelineConfig& cfg, Mode mode, const fs::path& out) {
  const Timer t;
  Session s(cfg);
  std::optional<RetrieverParams> rp;
  if (mode == Mode::Corona) rp = load_retriever(cfg, s.fingerprint);
  const GnnParams gp = load_gnn(cfg, mode, s.fingerprint);
  const auto cases = s.pipeline.test_cases();
  if (cases.empty()) throw ValidationError("evaluate: the dataset has no masked test interactions");
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [slice, slice_cases] : {std::pair{"all", cases}, std::pair{"cold-start", s.pipeline.cold_start_cases()}}) {
    MetricsReport rep;
    rep.slice = slice;
    rep.cutoffs = cfg.eval.cutoffs;
    rep.dataset_fingerprint = s.fingerprint;
    rep.config = cfg.to_json();
    ModeResult r{mode, {}};
    if (!slice_cases.empty()) r.runs.push_back(s.pipeline.evaluate(mode, rp ? &*rp : nullptr, gp, slice_cases));
    rep.modes.push_back(std::move(r));
    std::cout << "slice " << slice << " (" << slice_cases.size() << " users)\n" << rep.to_table();
    j[slice] = rep.to_json();
  }
  write_report(out, j);
  log_done("evaluate", cfg, t);
  return 0;
}

int cmd_ablate(const PipelineConfig& cfg, const std::vector<std::string>& mode_names, const fs::path& out) {
  const Timer t;
  std::vector<Mode> modes;
  for (const auto& m : mode_names) modes.push_back(mode_from_string(m));
  if (modes.empty()) modes = cfg.eval.modes;
  Session s(cfg);
  if (s.pipeline.test_cases().empty()) throw ValidationError("ablate: the dataset has no masked test interactions");
  const auto res = s.pipeline.ablate(modes, log);
  std::cout << "slice all\n" << res.all.to_table() << "slice cold-start\n" << res.cold_start.to_table();
  write_report(out, {{"all", res.all.to_json()}, {"cold-start", res.cold_start.to_json()}});
  log_done("ablate", cfg, t);
  return 0;
}

int cmd_cache(const PipelineConfig& cfg, bool clear) {
  ResponseCache cache(cfg.paths.effective_cache_dir());
  if (clear) {
    const auto n = cache.entries_on_disk();
    cache.clear();
    std::cout << "removed " << n << " cached responses from " << cache.dir().string() << '\n';
  } else {
    std::cout << cache.dir().string() << ": " << cache.entries_on_disk() << " cached responses\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage LLM-guided subgraph retrieval with a GCN ranker"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("-c,--config", g.config, "JSON config file");
  app.add_option("--set", g.sets, "Override a config key, e.g. --set training.lr=1e-4")->take_all();
  app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--workspace", g.workspace, "Workspace directory");
  app.add_option("--cache-dir", g.cache_dir, "LLM response cache directory");
  app.add_option("-k,--k", g.k, "Stage-1 retrieval size");
  app.add_option("--workers", g.workers, "Evaluation worker threads");
  app.add_option("--runs", g.runs, "Evaluation runs (seeds)");
  app.add_option("--max-epochs", g.max_epochs, "Training epoch cap");
  app.add_option("--lr", g.lr, "Learning rate");

  std::string synth_out = "synthetic";
  std::optional<std::size_t> s_users, s_items, s_clusters;
  std::optional<double> s_pin;
  std::optional<std::uint64_t> s_seed;
  auto* synth = app.add_subcommand("synth", "Generate the planted-cluster dataset and a config for it");
  synth->add_option("-o,--out", synth_out, "Output directory")->capture_default_str();
  synth->add_option("--users", s_users);
  synth->add_option("--items", s_items);
  synth->add_option("--clusters", s_clusters);
  synth->add_option("--p-in", s_pin, "In-cluster purchase probability");
  synth->add_option("--synth-seed", s_seed, "Generator seed");

  auto* ingest = app.add_subcommand("ingest", "Validate raw files into a workspace bundle");

  auto* train = app.add_subcommand("train", "Train the retriever, then the Corona-mode GNN");
  auto* train_r = app.add_subcommand("train-retriever", "Train the two-stage retriever");
  std::string gnn_mode = "corona";
  auto* train_g = app.add_subcommand("train-gnn", "Train the GCN ranker for one subgraph mode");
  train_g->add_option("--mode", gnn_mode, "corona, fullgraph, fixed1hop or fixed2hop")->capture_default_str();

  std::string user;
  std::size_t top_n = 10;
  bool trace = false, as_json = false;
  auto* rec = app.add_subcommand("recommend", "Rank items for one user");
  rec->add_option("-u,--user", user, "User id as it appears in the interactions file")->required();
  rec->add_option("-n", top_n, "Number of items")->capture_default_str();
  rec->add_flag("--trace", trace, "Emit prompts, summary and subgraph sizes as JSON");
  rec->add_flag("--json", as_json, "JSON output");

  std::string eval_mode = "corona", report_out;
  auto* eval = app.add_subcommand("evaluate", "Recall/NDCG over the masked test interactions");
  eval->add_option("--mode", eval_mode)->capture_default_str();
  eval->add_option("-o,--out", report_out, "Write the JSON report here");

  std::vector<std::string> ablate_modes;
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate several subgraph modes over several seeds");
  ablate->add_option("--modes", ablate_modes, "Subset of modes (default: eval.modes)")->delimiter(',');
  ablate->add_option("-o,--out", report_out, "Write the JSON report here");

  auto* cache = app.add_subcommand("cache", "Inspect or clear the LLM response cache");
  cache->require_subcommand(1);
  auto* cache_inspect = cache->add_subcommand("inspect", "Count cached responses");
  cache->add_subcommand("clear", "Delete cached responses");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      if (s_users) g.sets.push_back("synth.users=" + std::to_string(*s_users));
      if (s_items) g.sets.push_back("synth.items=" + std::to_string(*s_items));
      if (s_clusters) g.sets.push_back("synth.clusters=" + std::to_string(*s_clusters));
      if (s_pin) g.sets.push_back("synth.p_in=" + std::to_string(*s_pin));
      if (s_seed) g.sets.push_back("synth.seed=" + std::to_string(*s_seed));
      // Acceptance-scale defaults unless the user set them.
      nlohmann::json probe = g.config.empty() ? nlohmann::json::object() : read_config_json(g.config);
      for (const auto& s : g.sets) apply_set(probe, s);
      if (!probe.contains("retrieval") && !g.k) g.sets.push_back("retrieval.k=40");
      if (!(probe.contains("training") && probe["training"].contains("max_epochs")) && !g.max_epochs) g.sets.push_back("training.max_epochs=5");
      if (!(probe.contains("training") && probe["training"].contains("eval_every"))) g.sets.push_back("training.eval_every=500");
      return cmd_synth(resolve_config(g), fs::absolute(synth_out));
    }
    const PipelineConfig cfg = resolve_config(g);
    if (ingest->parsed()) return cmd_ingest(cfg);
    if (train->parsed()) return cmd_train(cfg, true, Mode::Corona);
    if (train_r->parsed()) return cmd_train(cfg, true, std::nullopt);
    if (train_g->parsed()) return cmd_train(cfg, false, mode_from_string(gnn_mode));
    if (rec->parsed()) return cmd_recommend(cfg, user, top_n, trace, as_json);
    if (eval->parsed()) return cmd_evaluate(cfg, mode_from_string(eval_mode), report_out);
    if (ablate->parsed()) return cmd_ablate(cfg, ablate_modes, report_out);
    if (cache->parsed()) return cmd_cache(cfg, !cache_inspect->parsed());
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}
