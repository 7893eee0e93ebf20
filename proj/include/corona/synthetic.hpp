#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "corona/common.hpp"
#include "corona/features.hpp"
#include "corona/graph.hpp"
#include "corona/llm.hpp"
#include "corona/prompts.hpp"

namespace corona {

// Planted-cluster dataset with two levels. Each cluster owns a country, a
// language and a few genres; each genre owns a block of items. A user belongs to
// one cluster and favours one of its genres (stated in the profile). A purchase
// stays in the home cluster with probability p_in and, when it does, in the
// favourite genre with probability p_genre. Items inside a block follow a Zipf
// popularity curve.
struct SynthConfig {
  std::size_t users = 300;
  std::size_t items = 500;
  std::size_t clusters = 5;
  double p_in = 0.9;
  std::uint64_t seed = 7;
  std::size_t genres_per_cluster = 3;
  double p_genre = 0.8;
  std::size_t min_interactions = 8;
  std::size_t max_interactions = 16;
  double zipf_exponent = 1.0;
  double user_noise = 0.02;  // per-dimension std of Gaussian noise on user features
  double item_noise = 0.02;  // same for item features

  void validate() const {
    if (users == 0 || items == 0 || clusters == 0 || genres_per_cluster == 0)
      throw ValidationError("synth: users, items, clusters and genres_per_cluster must be positive");
    if (clusters > users || clusters * genres_per_cluster > items) throw ValidationError("synth: too many clusters or genres for the item count");
    if (!(p_in >= 0.0 && p_in <= 1.0) || !(p_genre >= 0.0 && p_genre <= 1.0))
      throw ValidationError("synth: probabilities must lie in [0, 1]");
    if (min_interactions < 3 || max_interactions < min_interactions)
      throw ValidationError("synth: need 3 <= min_interactions <= max_interactions");
    if (max_interactions > items / clusters) throw ValidationError("synth: max_interactions exceeds items per cluster");
    if (user_noise < 0 || item_noise < 0) throw ValidationError("synth: noise levels must be non-negative");
  }
};

struct Dataset {
  std::vector<Interaction> interactions;
  std::vector<MaskPair> mask;
  InteractionGraph graph;
  FeatureStore features;
  TextStore texts;
  std::vector<std::size_t> user_cluster;
  std::vector<std::size_t> item_cluster;
  std::vector<std::size_t> user_genre;  // global genre index, cluster * genres_per_cluster + j
  std::vector<std::size_t> item_genre;
};

namespace detail {

inline std::string vocab(const std::vector<std::string>& words, std::size_t i, const char* fallback) {
  return i < words.size() ? words[i] : std::string(fallback) + std::to_string(i);
}

inline const std::vector<std::string>& synth_countries() {
  static const std::vector<std::string> v{"brazil", "japan", "germany", "nigeria", "canada", "india", "mexico", "sweden"};
  return v;
}
inline const std::vector<std::string>& synth_languages() {
  static const std::vector<std::string> v{"portuguese", "japanese", "german", "yoruba", "french", "hindi", "spanish", "swedish"};
  return v;
}
inline const std::vector<std::string>& synth_genres() {
  static const std::vector<std::string> v{"comedy",   "horror",  "western",   "musical", "thriller", "romance",
                                          "documentary", "animation", "fantasy", "crime",   "war",      "mystery",
                                          "scifi",    "adventure", "biography", "sports",  "history",  "family"};
  return v;
}
inline const std::vector<std::string>& synth_occupations() {
  static const std::vector<std::string> v{"engineer", "teacher", "artist", "student", "nurse", "lawyer", "farmer", "writer"};
  return v;
}

inline std::string join_values(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : " ") + p;
  return out;
}

}  // namespace detail

// Feature rows come from the same mock embedding and projection that the
// gateway applies to reasoning text, so profiles and queries share a space.
inline Dataset generate_synthetic(const SynthConfig& cfg, const LlmConfig& llm) {
  cfg.validate();
  llm.validate();
  const auto* mock = std::get_if<MockBackend>(&llm.embedding);
  if (!mock) throw ValidationError("synth: features are generated with the mock embedding backend only");
  MockEmbeddingBackend embedder(mock->seed, llm.embed_dim_native);
  const Matrix projection = projection_matrix(llm.projection_seed, llm.dim, llm.embed_dim_native);
  auto encode = [&](const std::string& text) {
    const auto native = embedder.embed(text);
    Vector out = projection * Eigen::Map<const Vector>(native.data(), static_cast<Eigen::Index>(native.size()));
    return Vector(out / out.norm());
  };

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t G = cfg.genres_per_cluster;
  const std::size_t n_blocks = cfg.clusters * G;

  Dataset ds;
  ds.user_cluster.resize(cfg.users);
  ds.user_genre.resize(cfg.users);
  ds.item_cluster.resize(cfg.items);
  ds.item_genre.resize(cfg.items);
  std::vector<std::size_t> item_perm(cfg.items);
  std::iota(item_perm.begin(), item_perm.end(), 0);
  std::shuffle(item_perm.begin(), item_perm.end(), rng);
  // Genre blocks over a shuffled order; position in the block is the Zipf rank.
  std::vector<std::vector<ItemId>> blocks(n_blocks);
  for (std::size_t r = 0; r < cfg.items; ++r) {
    const std::size_t b = r * n_blocks / cfg.items;
    ds.item_genre[item_perm[r]] = b;
    ds.item_cluster[item_perm[r]] = b / G;
    blocks[b].push_back(static_cast<ItemId>(item_perm[r]));
  }
  for (std::size_t u = 0; u < cfg.users; ++u) ds.user_cluster[u] = u * cfg.clusters / cfg.users;
  std::shuffle(ds.user_cluster.begin(), ds.user_cluster.end(), rng);
  std::uniform_int_distribution<std::size_t> genre_dist(0, G - 1);
  for (std::size_t u = 0; u < cfg.users; ++u) ds.user_genre[u] = ds.user_cluster[u] * G + genre_dist(rng);

  auto genre_name = [&](std::size_t b) { return detail::vocab(detail::synth_genres(), b, "genre"); };

  IdRegistry users, items;
  char buf[32];
  for (std::size_t u = 0; u < cfg.users; ++u) {
    std::snprintf(buf, sizeof buf, "u%04zu", u);
    users.intern(buf);
  }
  for (std::size_t v = 0; v < cfg.items; ++v) {
    std::snprintf(buf, sizeof buf, "i%04zu", v);
    items.intern(buf);
  }

  // Interactions.
  std::vector<std::discrete_distribution<std::size_t>> popularity;
  for (const auto& block : blocks) {
    std::vector<double> w(block.size());
    for (std::size_t r = 0; r < block.size(); ++r) w[r] = 1.0 / std::pow(static_cast<double>(r + 1), cfg.zipf_exponent);
    popularity.emplace_back(w.begin(), w.end());
  }
  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_interactions, cfg.max_interactions);
  std::uniform_int_distribution<std::size_t> other_cluster(0, cfg.clusters > 1 ? cfg.clusters - 2 : 0);
  std::uniform_int_distribution<std::size_t> other_genre(0, G > 1 ? G - 2 : 0);
  for (std::size_t u = 0; u < cfg.users; ++u) {
    const std::size_t home = ds.user_cluster[u];
    const std::size_t fav = ds.user_genre[u] % G;
    const std::size_t n = count_dist(rng);
    std::vector<ItemId> chosen;
    std::int64_t ts = 1'600'000'000 + static_cast<std::int64_t>(u) * 10'000;
    for (std::size_t tries = 0; chosen.size() < n && tries < 100 * n; ++tries) {
      std::size_t b;
      if (cfg.clusters > 1 && unit(rng) >= cfg.p_in) {
        std::size_t c = other_cluster(rng);
        if (c >= home) ++c;
        b = c * G + genre_dist(rng);
      } else if (G > 1 && unit(rng) >= cfg.p_genre) {
        std::size_t j = other_genre(rng);
        if (j >= fav) ++j;
        b = home * G + j;
      } else {
        b = home * G + fav;
      }
      const ItemId v = blocks[b][popularity[b](rng)];
      if (std::find(chosen.begin(), chosen.end(), v) != chosen.end()) continue;
      chosen.push_back(v);
      ts += 1 + static_cast<std::int64_t>(unit(rng) * 100);
      ds.interactions.push_back({users.name(static_cast<UserId>(u)), items.name(v), ts});
    }
    // Leave-last-out test split.
    if (chosen.size() >= 2) ds.mask.push_back({users.name(static_cast<UserId>(u)), items.name(chosen.back())});
  }

  // Text, indexed by generation order for now.
  std::normal_distribution<double> year_jitter(0.0, 6.0);
  std::uniform_int_distribution<int> age_dist(18, 65);
  const auto& occupations = detail::synth_occupations();
  std::uniform_int_distribution<std::size_t> occ_dist(0, occupations.size() - 1);
  std::vector<ItemRecord> item_records(cfg.items);
  std::vector<std::string> item_values(cfg.items);
  for (std::size_t v = 0; v < cfg.items; ++v) {
    const std::size_t c = ds.item_cluster[v];
    ItemRecord& rec = item_records[v];
    rec.title = "title" + std::to_string(v);
    rec.year = std::clamp(1965 + static_cast<int>(10 * (c % 5)) + static_cast<int>(std::lround(year_jitter(rng))), 1930, 2023);
    std::vector<std::string> genres{genre_name(ds.item_genre[v])};
    if (G > 1 && unit(rng) < 0.3) {
      std::size_t j = other_genre(rng);
      if (j >= ds.item_genre[v] % G) ++j;
      genres.push_back(genre_name(c * G + j));
    }
    rec.attributes["genre"] = genres;
    rec.attributes["language"] = {detail::vocab(detail::synth_languages(), c, "language")};
    std::vector<std::string> values;
    values.insert(values.end(), genres.begin(), genres.end());
    values.push_back(rec.attributes["language"][0]);
    item_values[v] = detail::join_values(values);
  }
  std::vector<Profile> profiles(cfg.users);
  std::vector<std::string> user_values(cfg.users);
  for (std::size_t u = 0; u < cfg.users; ++u) {
    const std::size_t c = ds.user_cluster[u];
    Profile& p = profiles[u];
    p["Age"] = std::to_string(age_dist(rng));
    p["Gender"] = unit(rng) < 0.5 ? "female" : "male";
    p["Country"] = detail::vocab(detail::synth_countries(), c, "country");
    p["Language"] = detail::vocab(detail::synth_languages(), c, "language");
    p["Occupation"] = occupations[occ_dist(rng)];
    p["Favorite genre"] = genre_name(ds.user_genre[u]);
    std::vector<std::string> values;
    for (const auto& key : canonical_profile_keys()) values.push_back(p[key]);
    values.push_back(p["Favorite genre"]);
    user_values[u] = detail::join_values(values);
  }

  // Re-index to the graph's first-seen ids, the order ingest would assign
  // from the written files. Items nobody bought are dropped.
  ds.graph = InteractionGraph::build(ds.interactions, ds.mask);
  const auto& g = ds.graph;
  const auto d = static_cast<Eigen::Index>(llm.dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  ds.texts = TextStore(g.num_users(), g.num_items());
  ds.features.user_features.resize(static_cast<Eigen::Index>(g.num_users()), d);
  ds.features.item_features.resize(static_cast<Eigen::Index>(g.num_items()), d);
  std::vector<std::size_t> user_cluster(g.num_users()), item_cluster(g.num_items());
  std::vector<std::size_t> user_genre(g.num_users()), item_genre(g.num_items());
  for (UserId u = 0; u < g.num_users(); ++u) {
    const std::size_t raw = *users.find(g.users().name(u));
    ds.texts.mutable_profile(u) = profiles[raw];
    user_cluster[u] = ds.user_cluster[raw];
    user_genre[u] = ds.user_genre[raw];
    Vector f = encode(user_values[raw]);
    for (auto& x : f) x += cfg.user_noise * normal(rng);
    ds.features.user_features.row(u) = f.transpose();
  }
  for (ItemId v = 0; v < g.num_items(); ++v) {
    const std::size_t raw = *items.find(g.items().name(v));
    ItemRecord rec = item_records[raw];
    rec.id = v;
    ds.texts.mutable_item(v) = std::move(rec);
    item_cluster[v] = ds.item_cluster[raw];
    item_genre[v] = ds.item_genre[raw];
    Vector f = encode(item_values[raw]);
    for (auto& x : f) x += cfg.item_noise * normal(rng);
    ds.features.item_features.row(v) = f.transpose();
  }
  ds.user_cluster = std::move(user_cluster);
  ds.item_cluster = std::move(item_cluster);
  ds.user_genre = std::move(user_genre);
  ds.item_genre = std::move(item_genre);
  return ds;
}

struct RawDatasetPaths {
  std::filesystem::path interactions, mask, users, items, user_features, item_features;

  static RawDatasetPaths in(const std::filesystem::path& dir) {
    return {dir / "interactions.tsv", dir / "mask.tsv",         dir / "users.jsonl",
            dir / "items.jsonl",      dir / "user_features.crnf", dir / "item_features.crnf"};
  }
};

inline void write_raw_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto p = RawDatasetPaths::in(dir);
  {
    std::ofstream out(p.interactions);
    for (const auto& r : ds.interactions) out << r.user << '\t' << r.item << '\t' << r.timestamp << '\n';
  }
  {
    std::ofstream out(p.mask);
    for (const auto& m : ds.mask) out << m.user << '\t' << m.item << '\n';
  }
  {
    std::ofstream out(p.users);
    ds.texts.write_users(out, ds.graph);
  }
  {
    std::ofstream out(p.items);
    ds.texts.write_items(out, ds.graph);
  }
  save_features(p.user_features, ds.features.user_features);
  save_features(p.item_features, ds.features.item_features);
}

}  // namespace corona
