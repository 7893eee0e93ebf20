#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "corona/common.hpp"
#include "corona/features.hpp"

namespace corona {

inline constexpr std::size_t kSummaryTopN = 20;
inline constexpr std::string_view kReleasePeriod = "release_period";

// Profile keys always rendered, in this order; missing ones print "unknown".
inline const std::vector<std::string>& canonical_profile_keys() {
  static const std::vector<std::string> keys{"Age", "Gender", "Country", "Language", "Occupation"};
  return keys;
}

inline constexpr std::string_view kPreferenceInstruction =
    "Task: describe this user's lasting tastes.\n"
    "Read the profile fields below and list the genres, languages, countries and decades of items the user is "
    "likely to enjoy. Mention which profile fields support each guess.";

inline constexpr std::string_view kIntentInstruction =
    "Task: describe what this user is likely to pick next.\n"
    "Read the user's past items and the candidate overview below and list the genres, languages and decades the "
    "next choice will probably come from. Only name values that appear in the candidate overview.";

inline std::string preference_prompt(const Profile& profile) {
  std::string out(kPreferenceInstruction);
  out += "\n\nUser profile: ";
  bool first = true;
  auto emit = [&](const std::string& key, const std::string& value) {
    if (!first) out += "; ";
    first = false;
    out += key + ": " + (value.empty() ? std::string("unknown") : value);
  };
  const auto& keys = canonical_profile_keys();
  for (const auto& key : keys) {
    auto it = profile.find(key);
    emit(key, it == profile.end() ? std::string() : it->second);
  }
  for (const auto& [key, value] : profile)
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) emit(key, value);
  return out;
}

inline std::string decade_bucket(int year) {
  const int start = year - ((year % 10) + 10) % 10;
  return std::to_string(start) + "-" + std::to_string(start + 10);
}

struct CandidateSummary {
  std::map<std::string, std::map<std::string, std::size_t>> histograms;
  std::map<std::string, std::vector<std::string>> top_lists;
  std::string rendered_text;

  bool empty() const { return histograms.empty(); }
};

namespace detail {

inline std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// genre and category lead, release periods close, anything else in between.
inline std::vector<std::string> attribute_render_order(const std::map<std::string, std::vector<std::string>>& lists) {
  std::vector<std::string> order;
  for (const char* lead : {"genre", "category"})
    if (lists.contains(lead)) order.emplace_back(lead);
  for (const auto& [k, _] : lists)
    if (k != "genre" && k != "category" && k != kReleasePeriod) order.push_back(k);
  if (lists.contains(std::string(kReleasePeriod))) order.emplace_back(kReleasePeriod);
  return order;
}

}  // namespace detail

inline CandidateSummary summarize(const std::vector<ItemRecord>& records) {
  CandidateSummary s;
  for (const auto& rec : records) {
    for (const auto& [attr, values] : rec.attributes)
      for (const auto& value : values)
        if (!value.empty()) ++s.histograms[attr][value];
    if (rec.year) ++s.histograms[std::string(kReleasePeriod)][decade_bucket(*rec.year)];
  }
  for (const auto& [attr, hist] : s.histograms) {
    std::vector<std::pair<std::string, std::size_t>> entries(hist.begin(), hist.end());
    // Map order is lexicographic, so a stable sort by count keeps value order on ties.
    std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    auto& top = s.top_lists[attr];
    for (std::size_t i = 0; i < entries.size() && i < kSummaryTopN; ++i) top.push_back(entries[i].first);
  }
  if (s.top_lists.empty()) {
    s.rendered_text = "No candidate items were retrieved.";
    return s;
  }
  std::vector<std::string> lines;
  for (const auto& attr : detail::attribute_render_order(s.top_lists)) {
    const std::string label = attr == kReleasePeriod ? "Release periods" : "Candidate " + attr;
    lines.push_back(detail::capitalize(label) + ": " + detail::join(s.top_lists.at(attr), ", "));
  }
  s.rendered_text = detail::join(lines, "\n");
  return s;
}

inline std::string render_history_entry(std::size_t position, const ItemRecord& rec) {
  std::string out = "No." + std::to_string(position) + ": Title: " + (rec.title.empty() ? "unknown" : rec.title);
  out += "; Year: " + (rec.year ? std::to_string(*rec.year) : std::string("unknown"));
  for (const auto& [attr, values] : rec.attributes)
    out += "; " + detail::capitalize(attr) + ": " + (values.empty() ? std::string("unknown") : detail::join(values, ", "));
  return out;
}

// `history` must be in interaction-time order. An empty history is only
// accepted when `allow_empty_history` is set.
inline std::string intent_prompt(const CandidateSummary& summary, const std::vector<ItemRecord>& history,
                                 bool allow_empty_history = false) {
  if (history.empty() && !allow_empty_history)
    throw ValidationError("intent_prompt: empty history without empty-history mode");
  std::string out(kIntentInstruction);
  out += "\n\nUser history:";
  if (history.empty()) out += " none recorded.";
  for (std::size_t i = 0; i < history.size(); ++i) out += "\n" + render_history_entry(i + 1, history[i]);
  out += "\nCandidate summary:\n" + summary.rendered_text;
  return out;
}

}  // namespace corona
