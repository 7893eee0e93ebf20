#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "corona/common.hpp"
#include "corona/graph.hpp"

namespace corona {

// CRNF: "CRNF", u32 version, u32 rows, u32 cols, rows*cols little-endian f32, row-major.
inline constexpr std::array<char, 4> kCrnfMagic{'C', 'R', 'N', 'F'};
inline constexpr std::uint32_t kCrnfMatrixVersion = 1;
inline constexpr std::uint32_t kCrnfCheckpointVersion = 2;

class FeatureFileError : public Error {
 public:
  enum class Reason { Io, BadMagic, UnsupportedVersion, HeaderMismatch, NonFinite, Truncated };

  FeatureFileError(Reason r, const std::string& what) : Error(ErrorKind::Format, what), reason_(r) {}
  Reason reason() const noexcept { return reason_; }

 private:
  Reason reason_;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  return true;
}

inline void read_header(std::istream& in, std::uint32_t expected_version, const std::string& source) {
  char magic[4];
  if (!in.read(magic, 4)) throw FeatureFileError(FeatureFileError::Reason::Truncated, source + ": truncated header");
  if (std::memcmp(magic, kCrnfMagic.data(), 4) != 0)
    throw FeatureFileError(FeatureFileError::Reason::BadMagic, source + ": not a CRNF file");
  std::uint32_t version = 0;
  if (!get_u32(in, version)) throw FeatureFileError(FeatureFileError::Reason::Truncated, source + ": truncated header");
  if (version != expected_version)
    throw FeatureFileError(FeatureFileError::Reason::UnsupportedVersion,
                           source + ": unsupported CRNF version " + std::to_string(version));
}

}  // namespace detail

inline void write_crnf(std::ostream& out, const Matrix& m) {
  out.write(kCrnfMagic.data(), 4);
  detail::put_u32(out, kCrnfMatrixVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i])));
}

inline Matrix read_crnf(std::istream& in, const std::string& source = "crnf") {
  detail::read_header(in, kCrnfMatrixVersion, source);
  std::uint32_t rows = 0, cols = 0;
  if (!detail::get_u32(in, rows) || !detail::get_u32(in, cols))
    throw FeatureFileError(FeatureFileError::Reason::Truncated, source + ": truncated header");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint32_t bits = 0;
    if (!detail::get_u32(in, bits))
      throw FeatureFileError(FeatureFileError::Reason::Truncated,
                             source + ": truncated payload after " + std::to_string(i) + " values");
    const float f = std::bit_cast<float>(bits);
    if (!std::isfinite(f))
      throw FeatureFileError(FeatureFileError::Reason::NonFinite,
                             source + ": non-finite value at row " + std::to_string(i / std::max<std::uint32_t>(cols, 1)));
    m.data()[i] = f;
  }
  return m;
}

inline void save_features(const std::filesystem::path& path, const Matrix& m) {
  if (!m.allFinite()) throw ValidationError("refusing to save non-finite features to " + path.string());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FeatureFileError(FeatureFileError::Reason::Io, "cannot write " + path.string());
  write_crnf(out, m);
}

inline Matrix load_features(const std::filesystem::path& path, std::size_t expected_rows, std::size_t expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open feature file " + path.string());
  const std::string source = path.string();
  detail::read_header(in, kCrnfMatrixVersion, source);
  std::uint32_t rows = 0, cols = 0;
  if (!detail::get_u32(in, rows) || !detail::get_u32(in, cols))
    throw FeatureFileError(FeatureFileError::Reason::Truncated, source + ": truncated header");
  if (rows != expected_rows || cols != expected_dim)
    throw FeatureFileError(FeatureFileError::Reason::HeaderMismatch,
                           source + ": shape " + std::to_string(rows) + "x" + std::to_string(cols) + " does not align with expected " +
                               std::to_string(expected_rows) + "x" + std::to_string(expected_dim));
  in.seekg(0);
  return read_crnf(in, source);
}

// Checkpoint container: CRNF header with version 2, u32 manifest length, the
// JSON manifest, then one version-1 CRNF matrix blob per tensor in manifest order.
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix& tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return m;
    throw FeatureFileError(FeatureFileError::Reason::HeaderMismatch, "checkpoint has no tensor '" + name + "'");
  }
};

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json manifest = ckpt.metadata;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, m] : ckpt.tensors) manifest["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FeatureFileError(FeatureFileError::Reason::Io, "cannot write " + path.string());
  out.write(kCrnfMagic.data(), 4);
  detail::put_u32(out, kCrnfCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : ckpt.tensors) write_crnf(out, m);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open checkpoint " + path.string());
  const std::string source = path.string();
  detail::read_header(in, kCrnfCheckpointVersion, source);
  std::uint32_t len = 0;
  if (!detail::get_u32(in, len)) throw FeatureFileError(FeatureFileError::Reason::Truncated, source + ": truncated manifest");
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw FeatureFileError(FeatureFileError::Reason::Truncated, source + ": truncated manifest");
  Checkpoint ckpt;
  try {
    ckpt.metadata = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FeatureFileError(FeatureFileError::Reason::HeaderMismatch, source + ": bad manifest: " + e.what());
  }
  for (const auto& t : ckpt.metadata.at("tensors")) {
    Matrix m = read_crnf(in, source);
    if (m.rows() != t.at("rows").get<Eigen::Index>() || m.cols() != t.at("cols").get<Eigen::Index>())
      throw FeatureFileError(FeatureFileError::Reason::HeaderMismatch, source + ": tensor shape disagrees with manifest");
    ckpt.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  ckpt.metadata.erase("tensors");
  return ckpt;
}

struct FeatureStore {
  Matrix user_features;  // |U| x d, row = internal user id
  Matrix item_features;  // |V| x d, row = internal item id

  std::size_t dim() const { return static_cast<std::size_t>(user_features.cols()); }

  void validate(const InteractionGraph& g) const {
    if (static_cast<std::size_t>(user_features.rows()) != g.num_users())
      throw ValidationError("user features have " + std::to_string(user_features.rows()) + " rows, graph has " +
                            std::to_string(g.num_users()) + " users");
    if (static_cast<std::size_t>(item_features.rows()) != g.num_items())
      throw ValidationError("item features have " + std::to_string(item_features.rows()) + " rows, graph has " +
                            std::to_string(g.num_items()) + " items");
    if (user_features.cols() != item_features.cols()) throw ValidationError("user and item feature dimensions differ");
    if (!user_features.allFinite() || !item_features.allFinite()) throw ValidationError("features contain non-finite values");
  }

  static FeatureStore load(const std::filesystem::path& users, const std::filesystem::path& items, const InteractionGraph& g,
                           std::size_t dim) {
    FeatureStore fs{load_features(users, g.num_users(), dim), load_features(items, g.num_items(), dim)};
    fs.validate(g);
    return fs;
  }
};

using Profile = std::map<std::string, std::string>;

struct ItemRecord {
  ItemId id = 0;
  std::string title;
  std::optional<int> year;
  // Open list-valued attributes, e.g. "genre", "category".
  std::map<std::string, std::vector<std::string>> attributes;

  bool operator==(const ItemRecord&) const = default;
};

class TextStore {
 public:
  TextStore() = default;
  TextStore(std::size_t num_users, std::size_t num_items) : profiles_(num_users), items_(num_items) {
    for (ItemId v = 0; v < num_items; ++v) items_[v].id = v;
  }

  const Profile& profile(UserId u) const {
    if (u >= profiles_.size()) throw LookupError("no profile for user " + std::to_string(u));
    return profiles_[u];
  }
  const ItemRecord& item(ItemId v) const {
    if (v >= items_.size()) throw LookupError("no text for item " + std::to_string(v));
    return items_[v];
  }
  Profile& mutable_profile(UserId u) { return profiles_.at(u); }
  ItemRecord& mutable_item(ItemId v) { return items_.at(v); }

  std::size_t num_users() const { return profiles_.size(); }
  std::size_t num_items() const { return items_.size(); }

  // Records in ascending internal-id order, duplicates removed.
  template <class ItemRange>
  std::vector<ItemRecord> item_text(const ItemRange& ids) const {
    std::vector<ItemId> sorted(std::begin(ids), std::end(ids));
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::vector<ItemRecord> out;
    out.reserve(sorted.size());
    for (ItemId v : sorted) out.push_back(item(v));
    return out;
  }

  static TextStore load(std::istream& users_jsonl, std::istream& items_jsonl, const InteractionGraph& g);
  void write_users(std::ostream& out, const InteractionGraph& g) const;
  void write_items(std::ostream& out, const InteractionGraph& g) const;

 private:
  std::vector<Profile> profiles_;
  std::vector<ItemRecord> items_;
};

namespace detail {

inline std::string json_scalar_text(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "";
  return v.dump();
}

inline std::optional<int> parse_year(const nlohmann::json& v, const std::string& where) {
  if (v.is_null()) return std::nullopt;
  std::string text = json_scalar_text(v);
  if (text.size() != 4 || !std::all_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw ValidationError(where + ": year '" + text + "' is not a 4-digit integer");
  return std::stoi(text);
}

template <class Fn>
void for_each_jsonl(std::istream& in, const std::string& source, Fn&& fn) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("id") || !obj["id"].is_string())
      throw ValidationError(where + ": expected an object with a string \"id\"");
    fn(obj, where);
  }
}

}  // namespace detail

inline TextStore TextStore::load(std::istream& users_jsonl, std::istream& items_jsonl, const InteractionGraph& g) {
  TextStore ts(g.num_users(), g.num_items());
  detail::for_each_jsonl(users_jsonl, "users.jsonl", [&](const nlohmann::json& obj, const std::string& where) {
    auto u = g.users().find(obj["id"].get<std::string>());
    if (!u) throw ValidationError(where + ": user '" + obj["id"].get<std::string>() + "' is not in the graph");
    Profile& p = ts.profiles_[*u];
    for (const auto& [key, value] : obj.items())
      if (key != "id") p[key] = detail::json_scalar_text(value);
  });
  detail::for_each_jsonl(items_jsonl, "items.jsonl", [&](const nlohmann::json& obj, const std::string& where) {
    auto v = g.items().find(obj["id"].get<std::string>());
    if (!v) throw ValidationError(where + ": item '" + obj["id"].get<std::string>() + "' is not in the graph");
    ItemRecord& rec = ts.items_[*v];
    for (const auto& [key, value] : obj.items()) {
      if (key == "id") continue;
      if (key == "title") {
        rec.title = detail::json_scalar_text(value);
      } else if (key == "year") {
        rec.year = detail::parse_year(value, where);
      } else if (value.is_array()) {
        auto& list = rec.attributes[key];
        for (const auto& x : value) list.push_back(detail::json_scalar_text(x));
      } else if (!value.is_null()) {
        rec.attributes[key].push_back(detail::json_scalar_text(value));
      }
    }
  });
  return ts;
}

inline void TextStore::write_users(std::ostream& out, const InteractionGraph& g) const {
  for (UserId u = 0; u < profiles_.size(); ++u) {
    nlohmann::json obj = {{"id", g.users().name(u)}};
    for (const auto& [k, v] : profiles_[u]) obj[k] = v;
    out << obj.dump() << '\n';
  }
}

inline void TextStore::write_items(std::ostream& out, const InteractionGraph& g) const {
  for (const auto& rec : items_) {
    nlohmann::json obj = {{"id", g.items().name(rec.id)}, {"title", rec.title}};
    if (rec.year) obj["year"] = *rec.year;
    for (const auto& [k, v] : rec.attributes) obj[k] = v;
    out << obj.dump() << '\n';
  }
}

}  // namespace corona
