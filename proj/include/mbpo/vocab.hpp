// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mbpo/tensor.hpp"

namespace mbpo {

class VocabError : public Error {
 public:
  VocabError(const std::string& message, std::vector<std::string> unknown)
      : Error(message), unknown_(std::move(unknown)) {}
  const std::vector<std::string>& unknown_words() const { return unknown_; }

 private:
  std::vector<std::string> unknown_;
};

using TokenId = std::size_t;
using Tokens = std::vector<TokenId>;

// Closed word-level vocabulary; token id is the index into words().
class Vocab {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";

  explicit Vocab(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], i).second) throw Error("vocab: duplicate word '" + words_[i] + "'");
    }
  }

  // The word list every generated corpus is drawn from.
  static Vocab standard() {
    return Vocab({std::string(kPad), std::string(kBos), std::string(kEos),
                  // attributes
                  "red", "green", "blue", "yellow", "circle", "square", "triangle",
                  "one", "two", "three", "four",
                  // answers
                  "A", "B", "C", "D", "yes", "no",
                  // template words
                  "a", "and", "describe", "the", "image", "what", "color", "shape", "is", "are",
                  "there", "how", "many", "objects", "object", "which", "option", "answer", "with",
                  "in", "picture", "this", "?", ".", ":"});
  }

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(TokenId id) const { return words_.at(id); }
  bool contains(std::string_view w) const { return index_.count(std::string(w)) != 0; }

  TokenId id(std::string_view w) const {
    auto it = index_.find(std::string(w));
    if (it == index_.end()) throw VocabError("vocab: unknown word '" + std::string(w) + "'", {std::string(w)});
    return it->second;
  }
  TokenId eos() const { return id(kEos); }

  Tokens tokenize(std::string_view text) const {
    Tokens out;
    std::vector<std::string> unknown;
    std::istringstream is{std::string(text)};
    std::string w;
    while (is >> w) {
      auto it = index_.find(w);
      if (it == index_.end()) {
        unknown.push_back(w);
      } else {
        out.push_back(it->second);
      }
    }
    if (!unknown.empty()) {
      std::string msg = "tokenize: out-of-vocabulary word(s):";
      for (const auto& u : unknown) msg += " '" + u + "'";
      throw VocabError(msg, std::move(unknown));
    }
    return out;
  }

  // Space-joined words; end-of-sequence and padding are dropped.
  std::string detokenize(const Tokens& ids) const {
    std::string out;
    for (TokenId id : ids) {
      const std::string& w = word(id);
      if (w == kEos || w == kPad) continue;
      if (!out.empty()) out += ' ';
      out += w;
    }
    return out;
  }

  nlohmann::json to_json() const { return words_; }
  static Vocab from_json(const nlohmann::json& j) { return Vocab(j.get<std::vector<std::string>>()); }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace mbpo
