// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Answer extraction and verified rewards for closed-ended records. Matching
// is case-insensitive over word tokens (maximal runs of letters/digits), so
// surrounding whitespace and punctuation never matter.

#include <cctype>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mbpo/synth.hpp"

namespace mbpo {

inline constexpr double kCorrectReward = 2.0;
inline constexpr double kIncorrectReward = 0.0;

struct Verdict {
  std::string extracted;  // "A".."D", "yes", "no" or "none"
  bool correct = false;
  double reward = kIncorrectReward;
  friend bool operator==(const Verdict&, const Verdict&) = default;
};

inline std::vector<std::string> words_lower(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isalnum(uc)) {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace detail {
inline bool contains_run(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < needle.size() && ok; ++j) ok = hay[i + j] == needle[j];
    if (ok) return true;
  }
  return false;
}
}  // namespace detail

// Option letter chosen by a multiple-choice response, if unambiguous:
//   1. a standalone letter a-d (any case); two different letters -> none
//   2. otherwise the single option whose full text occurs in the response
//   3. otherwise none
inline std::optional<char> extract_mc(std::string_view response, std::span<const std::string> options) {
  const auto words = words_lower(response);
  std::set<char> letters;
  for (const auto& w : words) {
    if (w.size() == 1 && w[0] >= 'a' && w[0] < 'a' + static_cast<char>(std::min<std::size_t>(options.size(), 4))) {
      letters.insert(static_cast<char>(std::toupper(static_cast<unsigned char>(w[0]))));
    }
  }
  if (letters.size() == 1) return *letters.begin();
  if (letters.size() > 1) return std::nullopt;
  std::optional<char> found;
  for (std::size_t i = 0; i < options.size() && i < 4; ++i) {
    if (detail::contains_run(words, words_lower(options[i]))) {
      if (found) return std::nullopt;
      found = static_cast<char>('A' + i);
    }
  }
  return found;
}

// "yes" or "no" when exactly one of the two words occurs.
inline std::optional<std::string> extract_yn(std::string_view response) {
  bool yes = false, no = false;
  for (const auto& w : words_lower(response)) {
    yes = yes || w == "yes";
    no = no || w == "no";
  }
  if (yes == no) return std::nullopt;
  return yes ? "yes" : "no";
}

inline Verdict reward(std::string_view response, const ClosedRecord& record) {
  Verdict v;
  if (record.kind == ClosedKind::kMultipleChoice) {
    if (auto letter = extract_mc(response, record.options)) v.extracted = std::string(1, *letter);
  } else if (auto yn = extract_yn(response)) {
    v.extracted = *yn;
  }
  if (v.extracted.empty()) v.extracted = "none";
  v.correct = v.extracted != "none" && v.extracted == record.answer;
  v.reward = v.correct ? kCorrectReward : kIncorrectReward;
  return v;
}

inline nlohmann::json to_json(const Verdict& v) {
  return {{"extracted", v.extracted}, {"correct", v.correct}, {"reward", v.reward}};
}

}  // namespace mbpo
