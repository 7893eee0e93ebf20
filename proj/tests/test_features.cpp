#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "test_support.hpp"

using namespace corona;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("corona-test-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "-" +
                                                 ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

FeatureFileError::Reason reason_of(const std::string& bytes) {
  std::istringstream in(bytes);
  try {
    read_crnf(in);
  } catch (const FeatureFileError& e) {
    return e.reason();
  }
  ADD_FAILURE() << "expected a FeatureFileError";
  return FeatureFileError::Reason::Io;
}

}  // namespace

TEST(Crnf, RoundTripAtFloatPrecision) {
  std::mt19937_64 rng(1);
  const Matrix m = test::random_matrix(rng, 7, 5);
  std::stringstream buf;
  write_crnf(buf, m);
  EXPECT_EQ(buf.str().size(), 16u + 4u * 35u);
  const Matrix back = read_crnf(buf);
  ASSERT_EQ(back.rows(), 7);
  ASSERT_EQ(back.cols(), 5);
  for (Eigen::Index i = 0; i < m.size(); ++i) EXPECT_EQ(back.data()[i], static_cast<double>(static_cast<float>(m.data()[i])));
}

TEST(Crnf, RejectsBadHeadersAndPayloads) {
  Matrix m(1, 2);
  m << 1.0, 2.0;
  std::stringstream buf;
  write_crnf(buf, m);
  const std::string good = buf.str();

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(reason_of(bad_magic), FeatureFileError::Reason::BadMagic);

  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_EQ(reason_of(bad_version), FeatureFileError::Reason::UnsupportedVersion);

  EXPECT_EQ(reason_of(good.substr(0, good.size() - 2)), FeatureFileError::Reason::Truncated);
  EXPECT_EQ(reason_of(good.substr(0, 6)), FeatureFileError::Reason::Truncated);

  std::string nan_payload = good;
  const auto bits = std::bit_cast<std::uint32_t>(std::numeric_limits<float>::quiet_NaN());
  for (int i = 0; i < 4; ++i) nan_payload[16 + i] = static_cast<char>(bits >> (8 * i));
  EXPECT_EQ(reason_of(nan_payload), FeatureFileError::Reason::NonFinite);
}

TEST(Crnf, LoadChecksShapeAgainstGraph) {
  TempDir dir;
  std::mt19937_64 rng(2);
  save_features(dir.path / "f.crnf", test::random_matrix(rng, 4, 3));
  EXPECT_EQ(load_features(dir.path / "f.crnf", 4, 3).rows(), 4);
  try {
    load_features(dir.path / "f.crnf", 5, 3);
    FAIL();
  } catch (const FeatureFileError& e) {
    EXPECT_EQ(e.reason(), FeatureFileError::Reason::HeaderMismatch);
    EXPECT_NE(std::string(e.what()).find("align"), std::string::npos);
  }
  EXPECT_THROW(load_features(dir.path / "missing.crnf", 4, 3), MissingArtifactError);
  Matrix bad = Matrix::Zero(1, 1);
  bad(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(save_features(dir.path / "bad.crnf", bad), ValidationError);
}

TEST(Checkpoint, RoundTripKeepsMetadataAndTensorOrder) {
  TempDir dir;
  std::mt19937_64 rng(4);
  Checkpoint c;
  c.metadata = {{"kind", "test"}, {"steps", 12}};
  c.tensors = {{"b", test::random_matrix(rng, 2, 3)}, {"a", test::random_matrix(rng, 1, 4)}};
  write_checkpoint(dir.path / "x.ckpt", c);
  const auto back = read_checkpoint(dir.path / "x.ckpt");
  EXPECT_EQ(back.metadata, c.metadata);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.tensors[0].first, "b");
  EXPECT_TRUE(back.tensor("a").isApprox(c.tensor("a"), 1e-6));
  EXPECT_THROW(back.tensor("zzz"), FeatureFileError);
}

TEST(Checkpoint, ModelParamsRoundTrip) {
  TempDir dir;
  const auto r = RetrieverParams::identity_init(6, 2, 9);
  write_checkpoint(dir.path / "r.ckpt", r.to_checkpoint(77));
  const auto rc = read_checkpoint(dir.path / "r.ckpt");
  EXPECT_EQ(rc.metadata.at("projection_seed"), 77);
  const auto r2 = RetrieverParams::from_checkpoint(rc);
  EXPECT_TRUE(r2.distance_encoding.isApprox(r.distance_encoding, 1e-6));
  const auto gp = GnnParams::glorot(6, 4, 6, true, 3);
  write_checkpoint(dir.path / "g.ckpt", gp.to_checkpoint());
  const auto g2 = GnnParams::from_checkpoint(read_checkpoint(dir.path / "g.ckpt"));
  EXPECT_TRUE(g2.use_bias);
  EXPECT_TRUE(g2.w1.isApprox(gp.w1, 1e-6));
  EXPECT_THROW(GnnParams::from_checkpoint(rc), ValidationError);
}

TEST(FeatureStore, ValidateCatchesMisalignment) {
  const auto g = InteractionGraph::build({{"u0", "a", 1}, {"u1", "b", 1}}, {});
  FeatureStore ok{Matrix::Ones(2, 3), Matrix::Ones(2, 3)};
  EXPECT_NO_THROW(ok.validate(g));
  FeatureStore rows{Matrix::Ones(3, 3), Matrix::Ones(2, 3)};
  EXPECT_THROW(rows.validate(g), ValidationError);
  FeatureStore dims{Matrix::Ones(2, 3), Matrix::Ones(2, 4)};
  EXPECT_THROW(dims.validate(g), ValidationError);
}

TEST(TextStore, LoadsProfilesAndItems) {
  const auto g = InteractionGraph::build({{"u0", "a", 1}, {"u1", "b", 1}}, {});
  std::istringstream users(R"({"id":"u1","Age":34,"Country":"Peru"}
{"id":"u0","Gender":"f"}
)");
  std::istringstream items(R"({"id":"b","title":"B","year":"1994","genre":["drama","war"],"language":"en"}
{"id":"a","year":null}
)");
  const auto t = TextStore::load(users, items, g);
  EXPECT_EQ(t.profile(g.user_id("u1")).at("Age"), "34");
  EXPECT_EQ(t.profile(g.user_id("u0")).at("Gender"), "f");
  const auto& b = t.item(g.item_id("b"));
  EXPECT_EQ(b.title, "B");
  EXPECT_EQ(b.year, 1994);
  EXPECT_EQ(b.attributes.at("genre"), (std::vector<std::string>{"drama", "war"}));
  EXPECT_EQ(b.attributes.at("language"), std::vector<std::string>{"en"});
  EXPECT_FALSE(t.item(g.item_id("a")).year.has_value());
  EXPECT_THROW(t.item(9), LookupError);

  std::stringstream u_out, i_out;
  t.write_users(u_out, g);
  t.write_items(i_out, g);
  const auto back = TextStore::load(u_out, i_out, g);
  EXPECT_EQ(back.item(g.item_id("b")), b);
  EXPECT_EQ(back.profile(g.user_id("u1")), t.profile(g.user_id("u1")));
}

TEST(TextStore, RejectsUnknownIdsAndBadYears) {
  const auto g = InteractionGraph::build({{"u0", "a", 1}}, {});
  std::istringstream none;
  std::istringstream unknown_user(R"({"id":"ghost"})");
  EXPECT_THROW(TextStore::load(unknown_user, none, g), ValidationError);
  std::istringstream no_users;
  std::istringstream bad_year(R"({"id":"a","year":"94"})");
  try {
    TextStore::load(no_users, bad_year, g);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("items.jsonl:1"), std::string::npos);
  }
  std::istringstream u2, garbage("{not json}\n");
  EXPECT_THROW(TextStore::load(u2, garbage, g), ValidationError);
}

TEST(TextStore, ItemTextIsSortedAndUnique) {
  const auto g = InteractionGraph::build({{"u0", "a", 1}, {"u0", "b", 2}, {"u0", "c", 3}}, {});
  const auto t = test::simple_texts(g);
  const auto recs = t.item_text(std::vector<ItemId>{2, 0, 2});
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].id, 0u);
  EXPECT_EQ(recs[1].id, 2u);
}
