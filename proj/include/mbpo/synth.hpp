// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Deterministic toy visual-QA corpus: 4x4-cell scenes of coloured shapes,
// rendered with fixed stencils, plus open-ended instructions and closed-ended
// (multiple-choice / yes-no) questions with verifiable answers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mbpo/model.hpp"
#include "mbpo/rng.hpp"
#include "mbpo/tensor.hpp"
#include "mbpo/vocab.hpp"

namespace mbpo {

enum class ShapeKind { kCircle, kSquare, kTriangle };
enum class Color { kRed, kGreen, kBlue, kYellow };

inline constexpr std::array<ShapeKind, 3> kShapes = {ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle};
inline constexpr std::array<Color, 4> kColors = {Color::kRed, Color::kGreen, Color::kBlue, Color::kYellow};
inline constexpr std::array<std::string_view, 4> kCountWords = {"one", "two", "three", "four"};
inline constexpr std::array<std::string_view, 4> kOptionLetters = {"A", "B", "C", "D"};

inline constexpr std::size_t kGrid = 4;
inline constexpr std::size_t kCellPx = 6;
inline constexpr std::size_t kImageSide = kGrid * kCellPx;
inline constexpr double kBackground = 0.8;

inline std::string_view name(ShapeKind s) {
  switch (s) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "?";
}

inline std::string_view name(Color c) {
  switch (c) {
    case Color::kRed: return "red";
    case Color::kGreen: return "green";
    case Color::kBlue: return "blue";
    case Color::kYellow: return "yellow";
  }
  return "?";
}

inline std::array<double, 3> rgb(Color c) {
  switch (c) {
    case Color::kRed: return {1.0, 0.0, 0.0};
    case Color::kGreen: return {0.0, 1.0, 0.0};
    case Color::kBlue: return {0.0, 0.0, 1.0};
    case Color::kYellow: return {1.0, 1.0, 0.0};
  }
  return {0.0, 0.0, 0.0};
}

inline ShapeKind shape_from(std::string_view s) {
  for (auto k : kShapes) if (name(k) == s) return k;
  throw Error("unknown shape '" + std::string(s) + "'");
}

inline Color color_from(std::string_view s) {
  for (auto c : kColors) if (name(c) == s) return c;
  throw Error("unknown color '" + std::string(s) + "'");
}

struct SceneObject {
  ShapeKind shape;
  Color color;
  std::size_t row;
  std::size_t col;
  std::size_t cell() const { return row * kGrid + col; }
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

// Objects kept sorted by cell in row-major order.
struct Scene {
  std::vector<SceneObject> objects;

  void validate() const {
    if (objects.empty() || objects.size() > 4) throw Error("scene: object count must be in [1,4]");
    for (std::size_t i = 0; i < objects.size(); ++i) {
      if (objects[i].row >= kGrid || objects[i].col >= kGrid) throw Error("scene: cell outside 4x4 grid");
      for (std::size_t j = 0; j < i; ++j) {
        if (objects[i].cell() == objects[j].cell()) throw Error("scene: two objects share a cell");
      }
    }
  }

  std::size_t count_shape(ShapeKind s) const {
    std::size_t n = 0;
    for (const auto& o : objects) n += o.shape == s;
    return n;
  }
  std::size_t count_color(Color c) const {
    std::size_t n = 0;
    for (const auto& o : objects) n += o.color == c;
    return n;
  }
  bool has(Color c, ShapeKind s) const {
    for (const auto& o : objects) {
      if (o.color == c && o.shape == s) return true;
    }
    return false;
  }

  friend bool operator==(const Scene&, const Scene&) = default;
};

// 6x6 stencils, 1 = object pixel.
inline const std::array<std::array<std::uint8_t, 36>, 3>& stencils() {
  static const std::array<std::array<std::uint8_t, 36>, 3> s = {{
      // circle
      {0, 0, 1, 1, 0, 0,  //
       0, 1, 1, 1, 1, 0,  //
       1, 1, 1, 1, 1, 1,  //
       1, 1, 1, 1, 1, 1,  //
       0, 1, 1, 1, 1, 0,  //
       0, 0, 1, 1, 0, 0},
      // square
      {0, 0, 0, 0, 0, 0,  //
       0, 1, 1, 1, 1, 0,  //
       0, 1, 1, 1, 1, 0,  //
       0, 1, 1, 1, 1, 0,  //
       0, 1, 1, 1, 1, 0,  //
       0, 0, 0, 0, 0, 0},
      // triangle
      {0, 0, 1, 1, 0, 0,  //
       0, 0, 1, 1, 0, 0,  //
       0, 1, 1, 1, 1, 0,  //
       0, 1, 1, 1, 1, 0,  //
       1, 1, 1, 1, 1, 1,  //
       1, 1, 1, 1, 1, 1},
  }};
  return s;
}

inline Image render(const Scene& scene) {
  scene.validate();
  std::vector<double> px(kImageSide * kImageSide * 3, kBackground);
  for (const auto& o : scene.objects) {
    const auto& st = stencils()[static_cast<std::size_t>(o.shape)];
    const auto color = rgb(o.color);
    for (std::size_t i = 0; i < kCellPx; ++i) {
      for (std::size_t j = 0; j < kCellPx; ++j) {
        if (!st[i * kCellPx + j]) continue;
        const std::size_t base = ((o.row * kCellPx + i) * kImageSide + (o.col * kCellPx + j)) * 3;
        for (std::size_t c = 0; c < 3; ++c) px[base + c] = color[c];
      }
    }
  }
  return Tensor({kImageSide, kImageSide, 3}, std::move(px));
}

inline Scene random_scene(Rng& rng) {
  Scene s;
  const std::size_t n = 1 + rng.below(4);
  std::vector<std::size_t> cells(kGrid * kGrid);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(cells);
  cells.resize(n);
  std::sort(cells.begin(), cells.end());
  for (auto cell : cells) {
    const auto shape = kShapes[rng.below(kShapes.size())];
    const auto color = kColors[rng.below(kColors.size())];
    s.objects.push_back({shape, color, cell / kGrid, cell % kGrid});
  }
  return s;
}

// "a red square and a blue circle", objects in row-major cell order.
inline std::string caption(const Scene& scene) {
  std::string out;
  for (const auto& o : scene.objects) {
    if (!out.empty()) out += " and ";
    out += "a ";
    out += name(o.color);
    out += ' ';
    out += name(o.shape);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records.

struct InstructRecord {
  std::uint64_t id = 0;
  std::string question;
  Image image;
  std::string chosen;
  Scene scene;
};

enum class ClosedKind { kMultipleChoice, kYesNo };

struct ClosedRecord {
  std::uint64_t id = 0;
  std::string question;
  Image image;
  ClosedKind kind = ClosedKind::kYesNo;
  std::vector<std::string> options;  // A-D for multiple choice, empty otherwise
  std::string answer;                // option letter, or "yes"/"no"
  Scene scene;
};

// Text the model is conditioned on: the question followed, for multiple
// choice, by the labelled options.
inline std::string prompt_text(const ClosedRecord& r) {
  std::string s = r.question;
  for (std::size_t i = 0; i < r.options.size(); ++i) {
    s += ' ';
    s += kOptionLetters[i];
    s += ' ';
    s += r.options[i];
  }
  return s;
}

inline Prompt make_prompt(const Vocab& vocab, const std::string& text, const Image& image) {
  return Prompt{vocab.tokenize(text), image};
}

// Tokens of `text` terminated by end-of-sequence, unless the text already
// fills `max_len` tokens (a response cut off at the length limit).
inline Response make_response(const Vocab& vocab, const std::string& text,
                              std::size_t max_len = std::numeric_limits<std::size_t>::max()) {
  Response r{vocab.tokenize(text)};
  if (r.tokens.size() < max_len) r.tokens.push_back(vocab.eos());
  return r;
}

namespace detail {
inline constexpr std::uint64_t kOpenStream = 0x6f70656eULL;
inline constexpr std::uint64_t kClosedStream = 0x636c6f73ULL;

inline std::optional<ShapeKind> unique_shape(const Scene& s, Rng& rng) {
  std::vector<ShapeKind> unique;
  for (auto k : kShapes) if (s.count_shape(k) == 1) unique.push_back(k);
  if (unique.empty()) return std::nullopt;
  return unique[rng.below(unique.size())];
}
inline std::optional<Color> unique_color(const Scene& s, Rng& rng) {
  std::vector<Color> unique;
  for (auto c : kColors) if (s.count_color(c) == 1) unique.push_back(c);
  if (unique.empty()) return std::nullopt;
  return unique[rng.below(unique.size())];
}
}  // namespace detail

// Open-ended instruction for record `index` of the stream keyed by `seed`.
inline InstructRecord make_open(std::uint64_t seed, std::uint64_t index) {
  Rng rng(derive_seed(seed, {detail::kOpenStream, index}));
  InstructRecord r;
  r.id = index;
  r.scene = random_scene(rng);
  r.image = render(r.scene);
  const double u = rng.uniform();
  if (u < 0.2) {
    if (auto s = detail::unique_shape(r.scene, rng)) {
      r.question = "what color is the " + std::string(name(*s)) + " ?";
      for (const auto& o : r.scene.objects) if (o.shape == *s) r.chosen = name(o.color);
      return r;
    }
  } else if (u < 0.35) {
    if (auto c = detail::unique_color(r.scene, rng)) {
      r.question = "what shape is the " + std::string(name(*c)) + " object ?";
      for (const auto& o : r.scene.objects) if (o.color == *c) r.chosen = name(o.shape);
      return r;
    }
  } else if (u < 0.5) {
    r.question = "how many objects are there ?";
    r.chosen = kCountWords[r.scene.objects.size() - 1];
    return r;
  }
  r.question = "describe the image .";
  r.chosen = caption(r.scene);
  return r;
}

inline ClosedRecord make_closed(std::uint64_t seed, std::uint64_t index, double mc_fraction) {
  Rng rng(derive_seed(seed, {detail::kClosedStream, index}));
  ClosedRecord r;
  r.id = index;
  r.scene = random_scene(rng);
  r.image = render(r.scene);
  if (rng.uniform() < mc_fraction) {
    r.kind = ClosedKind::kMultipleChoice;
    std::string correct;
    std::vector<std::string> pool;
    auto shape = detail::unique_shape(r.scene, rng);
    if (shape && rng.uniform() < 0.6) {
      r.question = "what color is the " + std::string(name(*shape)) + " ?";
      for (const auto& o : r.scene.objects) if (o.shape == *shape) correct = name(o.color);
      for (auto c : kColors) pool.emplace_back(name(c));
    } else {
      r.question = "how many objects are there ?";
      correct = kCountWords[r.scene.objects.size() - 1];
      for (auto w : kCountWords) pool.emplace_back(w);
    }
    // Distractors are the values the queried attribute does not take.
    std::vector<std::string> distractors;
    for (const auto& p : pool) if (p != correct) distractors.push_back(p);
    rng.shuffle(distractors);
    distractors.resize(3);
    r.options = distractors;
    const std::size_t slot = rng.below(4);
    r.options.insert(r.options.begin() + static_cast<std::ptrdiff_t>(slot), correct);
    r.answer = kOptionLetters[slot];
  } else {
    r.kind = ClosedKind::kYesNo;
    const bool yes = rng.uniform() < 0.5;
    if (rng.uniform() < 0.7) {
      Color c;
      ShapeKind s;
      if (yes) {
        const auto& o = r.scene.objects[rng.below(r.scene.objects.size())];
        c = o.color;
        s = o.shape;
      } else {
        do {
          c = kColors[rng.below(kColors.size())];
          s = kShapes[rng.below(kShapes.size())];
        } while (r.scene.has(c, s));
      }
      r.question = "is there a " + std::string(name(c)) + " " + std::string(name(s)) + " ?";
    } else {
      std::size_t n = r.scene.objects.size();
      if (!yes) {
        std::size_t other;
        do {
          other = 1 + rng.below(4);
        } while (other == n);
        n = other;
      }
      r.question = "are there " + std::string(kCountWords[n - 1]) + " objects ?";
    }
    r.answer = yes ? "yes" : "no";
  }
  return r;
}

inline std::vector<InstructRecord> gen_open(std::uint64_t seed, std::size_t n) {
  if (n == 0) throw Error("gen_open: n must be positive");
  std::vector<InstructRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_open(seed, i));
  return out;
}

inline std::vector<ClosedRecord> gen_closed(std::uint64_t seed, std::size_t n, double mc_fraction) {
  if (n == 0) throw Error("gen_closed: n must be positive");
  if (mc_fraction < 0.0 || mc_fraction > 1.0) throw Error("gen_closed: mc_fraction must be in [0,1]");
  std::vector<ClosedRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_closed(seed, i, mc_fraction));
  return out;
}

// Seeds for the disjoint corpus splits derived from one run seed.
struct SplitSeeds {
  std::uint64_t train, eval, text;
};

inline SplitSeeds split_seeds(std::uint64_t seed) {
  return {derive_seed(seed, {1}), derive_seed(seed, {2}), derive_seed(seed, {3})};
}

// ---------------------------------------------------------------------------
// Scene oracle: the answer a record should carry, recomputed from its scene.

inline std::string oracle_open_answer(const InstructRecord& r) {
  const Scene& s = r.scene;
  const std::string& q = r.question;
  if (q == "describe the image .") return caption(s);
  if (q == "how many objects are there ?") return std::string(kCountWords[s.objects.size() - 1]);
  for (auto k : kShapes) {
    if (q == "what color is the " + std::string(name(k)) + " ?") {
      if (s.count_shape(k) != 1) return {};
      for (const auto& o : s.objects) if (o.shape == k) return std::string(name(o.color));
    }
  }
  for (auto c : kColors) {
    if (q == "what shape is the " + std::string(name(c)) + " object ?") {
      if (s.count_color(c) != 1) return {};
      for (const auto& o : s.objects) if (o.color == c) return std::string(name(o.shape));
    }
  }
  return {};
}

// True when exactly the keyed option (or yes/no) is correct for the scene.
inline bool oracle_consistent(const ClosedRecord& r) {
  const Scene& s = r.scene;
  if (r.kind == ClosedKind::kYesNo) {
    if (!r.options.empty()) return false;
    bool truth = false;
    bool parsed = false;
    for (auto c : kColors) {
      for (auto k : kShapes) {
        if (r.question == "is there a " + std::string(name(c)) + " " + std::string(name(k)) + " ?") {
          truth = s.has(c, k);
          parsed = true;
        }
      }
    }
    for (std::size_t n = 1; n <= 4; ++n) {
      if (r.question == "are there " + std::string(kCountWords[n - 1]) + " objects ?") {
        truth = s.objects.size() == n;
        parsed = true;
      }
    }
    return parsed && r.answer == (truth ? "yes" : "no");
  }
  if (r.options.size() != 4) return false;
  std::string truth;
  if (r.question == "how many objects are there ?") {
    truth = kCountWords[s.objects.size() - 1];
  } else {
    for (auto k : kShapes) {
      if (r.question == "what color is the " + std::string(name(k)) + " ?" && s.count_shape(k) == 1) {
        for (const auto& o : s.objects) if (o.shape == k) truth = name(o.color);
      }
    }
  }
  if (truth.empty()) return false;
  std::size_t matches = 0;
  std::string letter;
  for (std::size_t i = 0; i < 4; ++i) {
    if (r.options[i] == truth) {
      ++matches;
      letter = kOptionLetters[i];
    }
  }
  return matches == 1 && letter == r.answer;
}

// ---------------------------------------------------------------------------
// JSONL.

// Rounds to 6 significant digits, the precision images are stored with.
inline double round6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return std::stod(buf);
}

inline nlohmann::json image_to_json(const Image& img) {
  std::vector<double> data(img.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = round6(img[i]);
  return {{"shape", img.shape()}, {"data", std::move(data)}};
}

inline Image image_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& o : s.objects) {
    arr.push_back({{"shape", name(o.shape)}, {"color", name(o.color)}, {"row", o.row}, {"col", o.col}});
  }
  return arr;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  for (const auto& o : j) {
    s.objects.push_back({shape_from(o.at("shape").get<std::string>()), color_from(o.at("color").get<std::string>()),
                         o.at("row").get<std::size_t>(), o.at("col").get<std::size_t>()});
  }
  return s;
}

inline nlohmann::json to_json(const InstructRecord& r) {
  return {{"id", r.id},
          {"question", r.question},
          {"image", image_to_json(r.image)},
          {"chosen", r.chosen},
          {"scene", scene_to_json(r.scene)}};
}

inline InstructRecord instruct_from_json(const nlohmann::json& j) {
  InstructRecord r;
  r.id = j.at("id").get<std::uint64_t>();
  r.question = j.at("question").get<std::string>();
  r.image = image_from_json(j.at("image"));
  r.chosen = j.at("chosen").get<std::string>();
  if (j.contains("scene")) r.scene = scene_from_json(j.at("scene"));
  return r;
}

inline std::string_view kind_name(ClosedKind k) { return k == ClosedKind::kMultipleChoice ? "mc" : "yn"; }

inline nlohmann::json to_json(const ClosedRecord& r) {
  nlohmann::json j = {{"id", r.id},
                      {"question", r.question},
                      {"image", image_to_json(r.image)},
                      {"kind", kind_name(r.kind)},
                      {"answer", r.answer},
                      {"scene", scene_to_json(r.scene)}};
  if (r.kind == ClosedKind::kMultipleChoice) j["options"] = r.options;
  return j;
}

inline ClosedRecord closed_from_json(const nlohmann::json& j) {
  ClosedRecord r;
  r.id = j.at("id").get<std::uint64_t>();
  r.question = j.at("question").get<std::string>();
  r.image = image_from_json(j.at("image"));
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "mc") {
    r.kind = ClosedKind::kMultipleChoice;
  } else if (kind == "yn") {
    r.kind = ClosedKind::kYesNo;
  } else {
    throw Error("closed record " + std::to_string(r.id) + ": unknown kind '" + kind + "'");
  }
  if (j.contains("options")) r.options = j.at("options").get<std::vector<std::string>>();
  r.answer = j.at("answer").get<std::string>();
  if (j.contains("scene")) r.scene = scene_from_json(j.at("scene"));
  return r;
}

inline void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& rows) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  for (const auto& row : rows) f << row.dump() << '\n';
  if (!f) throw Error("write failed for '" + path + "'");
}

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

template <typename Record>
std::vector<nlohmann::json> to_json_rows(const std::vector<Record>& records) {
  std::vector<nlohmann::json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) rows.push_back(to_json(r));
  return rows;
}

inline std::vector<InstructRecord> read_instruct(const std::string& path) {
  std::vector<InstructRecord> out;
  for (const auto& j : read_jsonl(path)) out.push_back(instruct_from_json(j));
  return out;
}

inline std::vector<ClosedRecord> read_closed(const std::string& path) {
  std::vector<ClosedRecord> out;
  for (const auto& j : read_jsonl(path)) out.push_back(closed_from_json(j));
  return out;
}

}  // namespace mbpo
