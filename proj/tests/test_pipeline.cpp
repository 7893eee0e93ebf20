#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "corona/pipeline.hpp"
#include "test_support.hpp"

using namespace corona;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("corona-pipe-" + std::to_string(::getpid()) + "-" +
                                                 ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

// Runs the CLI binary named by CORONA_CLI inside `dir`.
CliResult run_cli(const fs::path& dir, const std::string& args) {
  const char* cli = std::getenv("CORONA_CLI");
  const std::string cmd = "cd '" + dir.string() + "' && '" + cli + "' " + args + " > out.txt 2> err.txt";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(dir / "out.txt"), slurp(dir / "err.txt")};
}

}  // namespace

TEST(Config, DefaultsAndOverrides) {
  const auto c = PipelineConfig::from_json(nlohmann::json::parse(R"({
    "seed": 4,
    "retrieval": {"k": 50},
    "training": {"lr": 0.001, "dim": 16, "hidden": 8},
    "eval": {"cutoffs": [5, 10], "modes": ["corona", "fixed2hop"]},
    "paths": {"interactions": "data/i.tsv", "workspace": "/abs/ws"}
  })"), "/base");
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.retrieval.k, 50u);
  EXPECT_EQ(c.retrieval.stage2_k(), 25u);
  EXPECT_EQ(c.training.lr, 0.001);
  EXPECT_EQ(c.llm.dim, 16u);
  EXPECT_EQ(c.training.patience, 10u);
  EXPECT_EQ(c.eval.modes, (std::vector<Mode>{Mode::Corona, Mode::Fixed2Hop}));
  EXPECT_EQ(c.paths.interactions, fs::path("/base/data/i.tsv"));
  EXPECT_EQ(c.paths.workspace, fs::path("/abs/ws"));
  EXPECT_EQ(c.llm.cache_dir, fs::path("/abs/ws/llm-cache"));

  const auto d = PipelineConfig::from_json(nlohmann::json::object());
  EXPECT_EQ(d.retrieval.k, 3000u);
  EXPECT_EQ(d.training.lr, 1e-6);
  EXPECT_EQ(d.eval.cutoffs, (std::vector<std::size_t>{10, 20, 50}));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"retreival": {}})")), ValidationError);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"training": {"learning_rate": 1}})")), ValidationError);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"retrieval": {"k": 1}})")), ValidationError);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"retrieval": {"k": "many"}})")), ValidationError);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"training": {"lr": -1}})")), ValidationError);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"eval": {"modes": ["sideways"]}})")), ValidationError);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"llm": {"chat": {"backend": "openai"}}})")), ValidationError);
  EXPECT_THROW(PipelineConfig::load("/nonexistent/corona.json"), MissingArtifactError);
}

TEST(Config, InterpolatesEnvironment) {
  ::setenv("CORONA_TEST_MODEL", "tiny-model", 1);
  const auto c = PipelineConfig::from_json(nlohmann::json::parse(
      R"({"llm": {"chat": {"backend": "openai", "model": "${CORONA_TEST_MODEL}", "endpoint": "http://h/${CORONA_TEST_MODEL}/v1"}}})"));
  const auto& chat = std::get<OpenAiCompatibleBackend>(c.llm.chat);
  EXPECT_EQ(chat.model, "tiny-model");
  EXPECT_EQ(chat.endpoint, "http://h/tiny-model/v1");
  ::unsetenv("CORONA_TEST_UNSET_VAR");
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"paths": {"workspace": "${CORONA_TEST_UNSET_VAR}"}})")), ValidationError);
}

TEST(Config, JsonRoundTrip) {
  PipelineConfig c = PipelineConfig::from_json(nlohmann::json::parse(R"({"seed": 9, "retrieval": {"k": 12}, "eval": {"runs": 2}})"));
  const auto back = PipelineConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(Checkpoints, VersionedNeverOverwritten) {
  TempDir dir;
  EXPECT_FALSE(latest_checkpoint(dir.path, "retriever"));
  EXPECT_THROW(require_checkpoint(dir.path, "retriever"), MissingArtifactError);
  const auto p1 = next_checkpoint_path(dir.path, "retriever");
  EXPECT_EQ(p1.filename(), "retriever-v0001.ckpt");
  write_checkpoint(p1, RetrieverParams::identity_init(4, 2, 1).to_checkpoint(3));
  const auto p2 = next_checkpoint_path(dir.path, "retriever");
  EXPECT_EQ(p2.filename(), "retriever-v0002.ckpt");
  write_checkpoint(p2, RetrieverParams::identity_init(4, 2, 2).to_checkpoint(3));
  EXPECT_EQ(next_checkpoint_path(dir.path, gnn_checkpoint_stem(Mode::Fixed1Hop)).filename(), "gnn-fixed1hop-v0001.ckpt");
  EXPECT_EQ(*latest_checkpoint(dir.path, "retriever"), p2);
  EXPECT_TRUE(fs::exists(p1));
  const auto latest = RetrieverParams::from_checkpoint(require_checkpoint(dir.path, "retriever"));
  EXPECT_TRUE(latest.distance_encoding.isApprox(RetrieverParams::identity_init(4, 2, 2).distance_encoding, 1e-6));
}

TEST(Bundle, SaveLoadKeepsFingerprint) {
  TempDir dir;
  SynthConfig sc;
  sc.users = 40;
  sc.items = 90;
  sc.clusters = 3;
  const auto ds = generate_synthetic(sc, test::mock_llm(16));
  const auto b = DatasetBundle::from_dataset(ds);
  b.save(dir.path / "bundle");
  EXPECT_EQ(DatasetBundle::stored_fingerprint(dir.path / "bundle"), b.fingerprint());
  const auto back = DatasetBundle::load(dir.path / "bundle");
  EXPECT_TRUE(back.graph == b.graph);
  EXPECT_EQ(back.fingerprint(), b.fingerprint());
  EXPECT_THROW(DatasetBundle::load(dir.path / "missing"), MissingArtifactError);
}

TEST(Bundle, IngestWarnsOnMissingMask) {
  TempDir dir;
  SynthConfig sc;
  sc.users = 30;
  sc.items = 60;
  sc.clusters = 2;
  const auto ds = generate_synthetic(sc, test::mock_llm(8));
  write_raw_dataset(ds, dir.path);
  fs::remove(dir.path / "mask.tsv");
  PathsConfig p;
  const auto raw = RawDatasetPaths::in(dir.path);
  p.interactions = raw.interactions;
  p.mask = raw.mask;
  p.users = raw.users;
  p.items = raw.items;
  p.user_features = raw.user_features;
  p.item_features = raw.item_features;
  std::vector<std::string> warnings;
  const auto b = DatasetBundle::ingest(p, 8, [&](const std::string& w) { warnings.push_back(w); });
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("empty mask"), std::string::npos);
  EXPECT_TRUE(b.graph.masked_edges().empty());
  EXPECT_THROW(DatasetBundle::ingest(p, 9, {}), FeatureFileError);
}

TEST(ValidationSplitRule, HoldsOutLatestObservedItem) {
  const auto g = InteractionGraph::build({{"u0", "a", 1}, {"u0", "b", 2}, {"u0", "c", 3}, {"u0", "d", 4}, {"u1", "a", 5}, {"u1", "b", 6},
                                          {"u1", "c", 7}, {"u2", "a", 8}, {"u2", "d", 9}},
                                         {{"u0", "d"}});
  const auto s = make_validation_split(g);
  ASSERT_EQ(s.pairs.size(), 2u);
  EXPECT_EQ(s.pairs[0], std::make_pair(g.user_id("u0"), g.item_id("c")));
  EXPECT_EQ(s.pairs[1], std::make_pair(g.user_id("u1"), g.item_id("c")));
  EXPECT_TRUE(s.fit.is_masked(g.user_id("u0"), g.item_id("c")));
  EXPECT_TRUE(s.fit.is_masked(g.user_id("u0"), g.item_id("d")));
  EXPECT_TRUE(s.fit.has_edge(g.user_id("u2"), g.item_id("d")));
}

TEST(PipelineRun, AblationProducesEveryModeAndRun) {
  SynthConfig sc;
  sc.users = 40;
  sc.items = 90;
  sc.clusters = 3;
  PipelineConfig cfg = PipelineConfig::from_json(nlohmann::json::parse(
      R"({"retrieval": {"k": 10}, "training": {"dim": 16, "hidden": 8, "max_epochs": 1, "lr": 0.001}, "eval": {"runs": 2}})"));
  cfg.llm.cache_dir.clear();
  const auto ds = generate_synthetic(sc, cfg.llm);
  const auto b = DatasetBundle::from_dataset(ds);
  LlmGateway gw(cfg.llm);
  Pipeline p(b, cfg, gw);
  const auto out = p.ablate(all_modes());
  ASSERT_EQ(out.all.modes.size(), 4u);
  for (const auto& m : out.all.modes) {
    ASSERT_EQ(m.runs.size(), 2u);
    EXPECT_EQ(m.runs[0].users, p.test_cases().size());
  }
  EXPECT_EQ(out.all.dataset_fingerprint, b.fingerprint());
  // The same seed gives the same numbers.
  LlmGateway gw2(cfg.llm);
  Pipeline p2(b, cfg, gw2);
  const auto again = p2.ablate({Mode::Fixed1Hop});
  EXPECT_EQ(again.all.modes[0].runs[1].recall, out.all.result(Mode::Fixed1Hop).runs[1].recall);

  PipelineConfig wrong = cfg;
  wrong.training.dim = 8;
  wrong.llm.dim = 8;
  EXPECT_THROW(Pipeline(b, wrong, gw), ValidationError);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    if (!std::getenv("CORONA_CLI")) GTEST_SKIP() << "CORONA_CLI not set";
  }
};

TEST_F(Cli, EndToEnd) {
  TempDir dir;
  auto r = run_cli(dir.path, "synth -o data --users 60 --items 120 --clusters 3 --set training.dim=32 --set training.hidden=16");
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path data = dir.path / "data";
  ASSERT_TRUE(fs::exists(data / "corona.json"));

  r = run_cli(data, "-c corona.json evaluate --mode fixed1hop");
  EXPECT_EQ(r.code, 4) << "evaluate before ingest must report a missing artifact";

  r = run_cli(data, "-c corona.json ingest");
  ASSERT_EQ(r.code, 0) << r.err;
  r = run_cli(data, "-c corona.json ingest");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("bundle unchanged"), std::string::npos);

  r = run_cli(data, "-c corona.json recommend -u u0001 -n 5");
  EXPECT_EQ(r.code, 4) << "recommend before training must report a missing checkpoint";

  r = run_cli(data, "-c corona.json --max-epochs 1 train");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("seed"), std::string::npos);

  r = run_cli(data, "-c corona.json recommend -u u0001 -n 5");
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string first = r.out;
  std::size_t lines = std::count(first.begin(), first.end(), '\n');
  EXPECT_EQ(lines, 5u);
  r = run_cli(data, "-c corona.json recommend -u u0001 -n 5");
  EXPECT_EQ(r.out, first);

  r = run_cli(data, "-c corona.json recommend -u u0001 -n 5 --trace");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto trace = nlohmann::json::parse(r.out);
  ASSERT_TRUE(trace.contains("trace"));
  for (const char* stage : {"stage1", "stage2"}) {
    const auto& st = trace["trace"][stage];
    EXPECT_FALSE(st.at("prompt").get<std::string>().empty());
    EXPECT_FALSE(st.at("response").get<std::string>().empty());
    EXPECT_EQ(st.at("retrieved_users").size(), st.at("users").get<std::size_t>());
  }
  EXPECT_LE(trace["trace"]["stage2"]["users"].get<std::size_t>(), trace["trace"]["stage1"]["users"].get<std::size_t>());
  EXPECT_EQ(trace["items"].size(), 5u);

  r = run_cli(data, "-c corona.json recommend -u nobody -n 5");
  EXPECT_EQ(r.code, 2);
  r = run_cli(data, "-c corona.json --set training.nonsense=1 recommend -u u0001");
  EXPECT_EQ(r.code, 2);
  r = run_cli(data, "-c missing.json ingest");
  EXPECT_EQ(r.code, 4);

  r = run_cli(data, "-c corona.json --max-epochs 1 train-gnn --mode fixed1hop");
  ASSERT_EQ(r.code, 0) << r.err;
  r = run_cli(data, "-c corona.json evaluate --mode fixed1hop -o report.json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(slurp(data / "report.json"));
  EXPECT_EQ(report.at("all").at("modes")[0].at("mode"), "Fixed1Hop");
  EXPECT_TRUE(report.contains("cold-start"));

  r = run_cli(data, "-c corona.json cache inspect");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("cached responses"), std::string::npos);
}

TEST_F(Cli, MissingMaskWarnsAndFeatureMismatchFails) {
  TempDir dir;
  ASSERT_EQ(run_cli(dir.path, "synth -o data --users 40 --items 90 --clusters 3 --set training.dim=16").code, 0);
  const fs::path data = dir.path / "data";
  fs::remove(data / "mask.tsv");
  auto r = run_cli(data, "-c corona.json ingest");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);

  std::mt19937_64 rng(1);
  save_features(data / "user_features.crnf", test::random_matrix(rng, 3, 16));
  r = run_cli(data, "-c corona.json ingest");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("align"), std::string::npos);
}
