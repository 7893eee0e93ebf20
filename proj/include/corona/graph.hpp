#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "corona/common.hpp"

namespace corona {

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
};

struct MaskPair {
  std::string user;
  std::string item;
};

struct HistoryEntry {
  ItemId item;
  std::int64_t timestamp;
  bool operator==(const HistoryEntry&) const = default;
};

// Dense ids in first-seen order, with reverse lookup by external name.
class IdRegistry {
 public:
  std::uint32_t intern(const std::string& name) {
    auto [it, inserted] = index_.try_emplace(name, static_cast<std::uint32_t>(names_.size()));
    if (inserted) names_.push_back(name);
    return it->second;
  }

  std::optional<std::uint32_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& name(std::uint32_t id) const { return names_.at(id); }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const IdRegistry& o) const { return names_ == o.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

// Hop bucket of each user relative to a target: 1 = shares an item, 2 = two
// steps in the user projection, 3 = farther or disconnected. The target's own
// slot holds 0.
struct HopBuckets {
  UserId target = 0;
  std::vector<std::uint8_t> bucket;

  std::uint8_t operator[](UserId u) const { return bucket.at(u); }
  std::size_t size() const { return bucket.size(); }
};

class InteractionGraph {
 public:
  InteractionGraph() = default;

  static InteractionGraph build(const std::vector<Interaction>& interactions, const std::vector<MaskPair>& mask) {
    return build_seeded({}, {}, interactions, mask);
  }

  // As build(), but ids already present in the given registries keep their
  // positions; new names are appended in first-seen order.
  static InteractionGraph build_seeded(IdRegistry users, IdRegistry items, const std::vector<Interaction>& interactions,
                                       const std::vector<MaskPair>& mask);

  std::size_t num_users() const { return users_.size(); }
  std::size_t num_items() const { return items_.size(); }
  std::size_t num_edges() const {
    std::size_t n = 0;
    for (const auto& row : user_items_) n += row.size();
    return n;
  }

  const IdRegistry& users() const { return users_; }
  const IdRegistry& items() const { return items_; }

  UserId user_id(const std::string& name) const {
    auto id = users_.find(name);
    if (!id) throw LookupError("unknown user '" + name + "'");
    return *id;
  }
  ItemId item_id(const std::string& name) const {
    auto id = items_.find(name);
    if (!id) throw LookupError("unknown item '" + name + "'");
    return *id;
  }

  // Sorted ascending; masked pairs are not present.
  std::span<const ItemId> items_of(UserId u) const { return user_items_.at(u); }
  std::span<const UserId> users_of(ItemId v) const { return item_users_.at(v); }

  bool has_edge(UserId u, ItemId v) const { return std::binary_search(user_items_[u].begin(), user_items_[u].end(), v); }
  bool is_masked(UserId u, ItemId v) const { return masked_.contains({u, v}); }
  const std::set<std::pair<UserId, ItemId>>& masked_edges() const { return masked_; }

  // Time-ordered history, masked interactions included.
  const std::vector<HistoryEntry>& history(UserId u) const { return histories_.at(u); }

  // History restricted to observed (unmasked) interactions; this is what prompts see.
  std::vector<HistoryEntry> observed_history(UserId u) const {
    std::vector<HistoryEntry> out;
    for (const auto& h : histories_.at(u))
      if (!is_masked(u, h.item)) out.push_back(h);
    return out;
  }

  // Total recorded interactions of an item, masked ones included.
  std::size_t interaction_count(ItemId v) const { return item_users_.at(v).size() + masked_per_item_.at(v); }

  // Re-runs build() with extra pairs masked; ids stay aligned with this graph.
  InteractionGraph with_extra_mask(const std::vector<std::pair<UserId, ItemId>>& extra) const;

  std::vector<Interaction> interactions() const;

  nlohmann::json to_json() const;
  static InteractionGraph from_json(const nlohmann::json& j);
  std::string fingerprint() const { return sha256_hex(to_json().dump()); }

  bool operator==(const InteractionGraph& o) const {
    return users_ == o.users_ && items_ == o.items_ && user_items_ == o.user_items_ && item_users_ == o.item_users_ &&
           histories_ == o.histories_ && masked_ == o.masked_;
  }

 private:
  IdRegistry users_;
  IdRegistry items_;
  std::vector<std::vector<ItemId>> user_items_;
  std::vector<std::vector<UserId>> item_users_;
  std::vector<std::vector<HistoryEntry>> histories_;
  std::vector<std::size_t> masked_per_item_;
  std::set<std::pair<UserId, ItemId>> masked_;
};

inline InteractionGraph InteractionGraph::build_seeded(IdRegistry users, IdRegistry items,
                                                       const std::vector<Interaction>& interactions,
                                                       const std::vector<MaskPair>& mask) {
  InteractionGraph g;
  g.users_ = std::move(users);
  g.items_ = std::move(items);
  // Latest timestamp per (user, item); duplicates collapse to one edge.
  std::map<std::pair<UserId, ItemId>, std::int64_t> latest;
  for (const auto& r : interactions) {
    if (r.user.empty() || r.item.empty()) throw ValidationError("interaction with empty user or item id");
    const UserId u = g.users_.intern(r.user);
    const ItemId v = g.items_.intern(r.item);
    auto [it, inserted] = latest.try_emplace({u, v}, r.timestamp);
    if (!inserted) it->second = std::max(it->second, r.timestamp);
  }

  for (const auto& m : mask) {
    auto u = g.users_.find(m.user);
    auto v = g.items_.find(m.item);
    if (!u || !v || !latest.contains({*u, *v}))
      throw ValidationError("mask pair (" + m.user + ", " + m.item + ") is not among the interactions");
    g.masked_.insert({*u, *v});
  }

  g.user_items_.assign(g.users_.size(), {});
  g.item_users_.assign(g.items_.size(), {});
  g.histories_.assign(g.users_.size(), {});
  g.masked_per_item_.assign(g.items_.size(), 0);
  for (const auto& [edge, ts] : latest) {
    const auto [u, v] = edge;
    g.histories_[u].push_back({v, ts});
    if (g.masked_.contains(edge)) {
      ++g.masked_per_item_[v];
      continue;
    }
    g.user_items_[u].push_back(v);
    g.item_users_[v].push_back(u);
  }
  // `latest` iterates in (u, v) order so user rows are already sorted.
  for (auto& row : g.item_users_) std::sort(row.begin(), row.end());
  for (auto& h : g.histories_)
    std::stable_sort(h.begin(), h.end(), [](const HistoryEntry& a, const HistoryEntry& b) { return a.timestamp < b.timestamp; });
  return g;
}

inline InteractionGraph build_graph(const std::vector<Interaction>& interactions, const std::vector<MaskPair>& mask) {
  return InteractionGraph::build(interactions, mask);
}

inline std::vector<Interaction> InteractionGraph::interactions() const {
  std::vector<Interaction> out;
  for (UserId u = 0; u < histories_.size(); ++u)
    for (const auto& h : histories_[u]) out.push_back({users_.name(u), items_.name(h.item), h.timestamp});
  return out;
}

inline InteractionGraph InteractionGraph::with_extra_mask(const std::vector<std::pair<UserId, ItemId>>& extra) const {
  std::vector<MaskPair> mask;
  for (const auto& [u, v] : masked_) mask.push_back({users_.name(u), items_.name(v)});
  for (const auto& [u, v] : extra)
    if (!masked_.contains({u, v})) mask.push_back({users_.name(u), items_.name(v)});
  return build_seeded(users_, items_, interactions(), mask);
}

inline nlohmann::json InteractionGraph::to_json() const {
  nlohmann::json j;
  j["users"] = users_.names();
  j["items"] = items_.names();
  auto records = nlohmann::json::array();
  for (UserId u = 0; u < histories_.size(); ++u)
    for (const auto& h : histories_[u]) records.push_back({u, h.item, h.timestamp});
  j["interactions"] = std::move(records);
  auto masked = nlohmann::json::array();
  for (const auto& [u, v] : masked_) masked.push_back({u, v});
  j["masked"] = std::move(masked);
  return j;
}

inline InteractionGraph InteractionGraph::from_json(const nlohmann::json& j) {
  try {
    const auto users = j.at("users").get<std::vector<std::string>>();
    const auto items = j.at("items").get<std::vector<std::string>>();
    std::vector<Interaction> records;
    for (const auto& r : j.at("interactions"))
      records.push_back({users.at(r.at(0).get<std::size_t>()), items.at(r.at(1).get<std::size_t>()),
                         r.at(2).get<std::int64_t>()});
    std::vector<MaskPair> mask;
    for (const auto& m : j.at("masked"))
      mask.push_back({users.at(m.at(0).get<std::size_t>()), items.at(m.at(1).get<std::size_t>())});
    IdRegistry user_reg, item_reg;
    for (const auto& name : users) user_reg.intern(name);
    for (const auto& name : items) item_reg.intern(name);
    return build_seeded(std::move(user_reg), std::move(item_reg), records, mask);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed graph document: ") + e.what());
  }
}

// Reads `user<TAB>item<TAB>unix_timestamp` records. Blank lines are skipped.
inline std::vector<Interaction> read_interactions(std::istream& in, const std::string& source = "interactions") {
  std::vector<Interaction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos)
      throw ValidationError(source + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
    Interaction r{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), 0};
    const std::string ts = line.substr(t2 + 1);
    std::size_t used = 0;
    try {
      r.timestamp = std::stoll(ts, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != ts.size() || r.user.empty() || r.item.empty())
      throw ValidationError(source + ":" + std::to_string(lineno) + ": malformed record");
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<MaskPair> read_mask_pairs(std::istream& in, const std::string& source = "mask") {
  std::vector<MaskPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto t = line.find('\t');
    if (t == std::string::npos || t == 0 || t + 1 == line.size() || line.find('\t', t + 1) != std::string::npos)
      throw ValidationError(source + ":" + std::to_string(lineno) + ": expected 2 tab-separated fields");
    out.push_back({line.substr(0, t), line.substr(t + 1)});
  }
  return out;
}

inline HopBuckets hop_distance(const InteractionGraph& g, UserId target) {
  if (target >= g.num_users()) throw LookupError("unknown target user " + std::to_string(target));
  HopBuckets hb;
  hb.target = target;
  hb.bucket.assign(g.num_users(), 3);
  hb.bucket[target] = 0;
  std::vector<UserId> frontier{target};
  std::vector<bool> item_seen(g.num_items(), false);
  for (std::uint8_t level = 1; level <= 2 && !frontier.empty(); ++level) {
    std::vector<UserId> next;
    for (UserId u : frontier) {
      for (ItemId v : g.items_of(u)) {
        if (item_seen[v]) continue;
        item_seen[v] = true;
        for (UserId w : g.users_of(v)) {
          if (w == target || hb.bucket[w] != 3) continue;
          hb.bucket[w] = level;
          next.push_back(w);
        }
      }
    }
    frontier = std::move(next);
  }
  return hb;
}

struct Subgraph {
  Stage stage = Stage::Preference;
  std::vector<UserId> users;  // sorted
  std::vector<ItemId> items;  // sorted
  std::vector<std::pair<UserId, ItemId>> edges;  // sorted

  bool degenerate() const { return items.empty(); }
  bool contains_user(UserId u) const { return std::binary_search(users.begin(), users.end(), u); }
  bool contains_item(ItemId v) const { return std::binary_search(items.begin(), items.end(), v); }

  std::string fingerprint() const {
    std::string buf;
    for (UserId u : users) buf += std::to_string(u) + ",";
    buf += "|";
    for (ItemId v : items) buf += std::to_string(v) + ",";
    return sha256_hex(buf).substr(0, 16);
  }
};

template <class UserRange>
Subgraph induce_subgraph(const InteractionGraph& g, const UserRange& user_set, Stage stage) {
  Subgraph s;
  s.stage = stage;
  for (UserId u : user_set) {
    if (u >= g.num_users()) throw LookupError("unknown user " + std::to_string(u));
    s.users.push_back(u);
  }
  if (s.users.empty()) throw ValidationError("induce_subgraph: empty user set");
  std::sort(s.users.begin(), s.users.end());
  s.users.erase(std::unique(s.users.begin(), s.users.end()), s.users.end());
  for (UserId u : s.users)
    for (ItemId v : g.items_of(u)) {
      s.items.push_back(v);
      s.edges.emplace_back(u, v);
    }
  std::sort(s.items.begin(), s.items.end());
  s.items.erase(std::unique(s.items.begin(), s.items.end()), s.items.end());
  return s;
}

}  // namespace corona
