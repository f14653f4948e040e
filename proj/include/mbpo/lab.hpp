// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Run configuration, corpus generation and the pipeline stages shared by the
// command-line tool and the end-to-end tests.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbpo/trainer.hpp"

namespace mbpo {

struct DataConfig {
  std::size_t offline_pool = 10000;  // open records scored by IIG
  std::size_t sft = 4000;            // open records for supervised fine-tuning
  std::size_t online = 2000;         // closed records for rollouts
  std::size_t eval_closed = 400;
  std::size_t eval_open = 200;
  std::size_t text = 2000;       // closed records shown only with the blank image
  std::size_t sft_closed = 400;  // closed records shown with their image during SFT
  double mc_fraction = 0.5;
};

struct StageConfig {
  std::size_t steps = 0;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double final_lr_fraction = 1.0;  // cosine decay to lr * final_lr_fraction
};

struct IigConfig {
  std::size_t top_k = 2000;
  std::string scorer_checkpoint;  // empty: score with the policy being trained
};

struct MineConfig {
  AttackConfig attack;
  double temperature = 1.0;
  std::size_t max_resamples = 4;
  bool random_noise = false;
};

struct LabConfig {
  ModelConfig model;
  DataConfig data;
  StageConfig pretrain{300};
  StageConfig sft{4000, 16, 1e-3, 0.1};
  IigConfig iig;
  MineConfig mine;
  TrainConfig train;  // train.seed is the run seed
};

namespace detail {

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ConfigError(where + ": unknown key '" + k + "'");
    }
  }
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, StageConfig& c) {
  detail::reject_unknown(j, {"steps", "batch_size", "lr", "final_lr_fraction"}, "stage config");
  detail::get_if(j, "steps", c.steps);
  detail::get_if(j, "batch_size", c.batch_size);
  detail::get_if(j, "lr", c.lr);
  detail::get_if(j, "final_lr_fraction", c.final_lr_fraction);
}

inline void to_json(nlohmann::json& j, const StageConfig& c) {
  j = {{"steps", c.steps}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"final_lr_fraction", c.final_lr_fraction}};
}

inline nlohmann::json to_json(const LabConfig& c) {
  nlohmann::json j = c.train;
  j["model"] = c.model;
  j["data"] = {{"offline_pool", c.data.offline_pool}, {"sft", c.data.sft},
               {"online", c.data.online},             {"eval_closed", c.data.eval_closed},
               {"eval_open", c.data.eval_open},       {"text", c.data.text},
               {"sft_closed", c.data.sft_closed},     {"mc_fraction", c.data.mc_fraction}};
  j["pretrain"] = c.pretrain;
  j["sft"] = c.sft;
  j["iig"] = {{"top_k", c.iig.top_k}, {"scorer_checkpoint", c.iig.scorer_checkpoint}};
  j["mine"] = {{"temperature", c.mine.temperature},
               {"max_resamples", c.mine.max_resamples},
               {"random_noise", c.mine.random_noise}};
  return j;
}

// Top-level keys mirror TrainConfig; the other pipeline stages live in
// named sections. Unknown keys are errors.
inline LabConfig lab_config_from_json(const nlohmann::json& root) {
  if (!root.is_object()) throw ConfigError("config: expected a JSON object");
  LabConfig c;
  nlohmann::json train = nlohmann::json::object();
  for (const auto& [k, v] : root.items()) {
    if (k == "model") {
      detail::reject_unknown(v, {"image_h", "image_w", "channels", "patch", "d_model", "n_layers", "n_heads",
                                 "vocab_size", "max_question_len", "max_response_len", "eos_id"},
                             "config.model");
      c.model = v.get<ModelConfig>();
    } else if (k == "data") {
      detail::reject_unknown(v, {"offline_pool", "sft", "online", "eval_closed", "eval_open", "text", "sft_closed",
                                 "mc_fraction"},
                             "config.data");
      detail::get_if(v, "offline_pool", c.data.offline_pool);
      detail::get_if(v, "sft", c.data.sft);
      detail::get_if(v, "online", c.data.online);
      detail::get_if(v, "eval_closed", c.data.eval_closed);
      detail::get_if(v, "eval_open", c.data.eval_open);
      detail::get_if(v, "text", c.data.text);
      detail::get_if(v, "sft_closed", c.data.sft_closed);
      detail::get_if(v, "mc_fraction", c.data.mc_fraction);
    } else if (k == "pretrain") {
      v.get_to(c.pretrain);
    } else if (k == "sft") {
      v.get_to(c.sft);
    } else if (k == "iig") {
      detail::reject_unknown(v, {"top_k", "scorer_checkpoint"}, "config.iig");
      detail::get_if(v, "top_k", c.iig.top_k);
      detail::get_if(v, "scorer_checkpoint", c.iig.scorer_checkpoint);
    } else if (k == "mine") {
      detail::reject_unknown(v, {"temperature", "max_resamples", "random_noise"}, "config.mine");
      detail::get_if(v, "temperature", c.mine.temperature);
      detail::get_if(v, "max_resamples", c.mine.max_resamples);
      detail::get_if(v, "random_noise", c.mine.random_noise);
    } else {
      train[k] = v;
    }
  }
  try {
    train.get_to(c.train);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.mine.attack = c.train.attack;
  c.model.validate();
  c.train.validate();
  return c;
}

inline LabConfig load_lab_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return lab_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Corpus.

struct Corpus {
  std::vector<InstructRecord> offline_pool;
  std::vector<InstructRecord> sft;
  std::vector<ClosedRecord> online;
  std::vector<ClosedRecord> eval_closed;
  std::vector<InstructRecord> eval_open;
  std::vector<ClosedRecord> text;
  std::vector<ClosedRecord> sft_closed;
};

inline constexpr std::uint64_t kPoolStream = 0x706f6f6cULL;
inline constexpr std::uint64_t kSftStream = 0x736674ULL;
inline constexpr std::uint64_t kOnlineStream = 0x6f6e6c696e65ULL;
inline constexpr std::uint64_t kEvalOpenStream = 0x65766f70ULL;
inline constexpr std::uint64_t kSftClosedStream = 0x736663ULL;

namespace detail {
template <typename Gen>
auto generate_if(std::size_t n, Gen gen) -> decltype(gen()) {
  return n ? gen() : decltype(gen()){};
}
}  // namespace detail

inline Corpus generate_corpus(const DataConfig& d, std::uint64_t seed) {
  const SplitSeeds s = split_seeds(seed);
  Corpus c;
  c.offline_pool = detail::generate_if(d.offline_pool, [&] { return gen_open(derive_seed(s.train, {kPoolStream}), d.offline_pool); });
  c.sft = detail::generate_if(d.sft, [&] { return gen_open(derive_seed(s.train, {kSftStream}), d.sft); });
  c.online = detail::generate_if(d.online, [&] { return gen_closed(derive_seed(s.train, {kOnlineStream}), d.online, d.mc_fraction); });
  c.eval_closed = detail::generate_if(d.eval_closed, [&] { return gen_closed(s.eval, d.eval_closed, d.mc_fraction); });
  c.eval_open = detail::generate_if(d.eval_open, [&] { return gen_open(derive_seed(s.eval, {kEvalOpenStream}), d.eval_open); });
  c.text = detail::generate_if(d.text, [&] { return gen_closed(s.text, d.text, d.mc_fraction); });
  c.sft_closed = detail::generate_if(d.sft_closed, [&] { return gen_closed(derive_seed(s.text, {kSftClosedStream}), d.sft_closed, d.mc_fraction); });
  return c;
}

// Names of the corpus files inside a data directory.
struct CorpusFiles {
  std::filesystem::path dir;
  std::filesystem::path offline_pool() const { return dir / "offline_pool.jsonl"; }
  std::filesystem::path sft() const { return dir / "sft.jsonl"; }
  std::filesystem::path online() const { return dir / "online.jsonl"; }
  std::filesystem::path eval_closed() const { return dir / "eval_closed.jsonl"; }
  std::filesystem::path eval_open() const { return dir / "eval_open.jsonl"; }
  std::filesystem::path text() const { return dir / "text.jsonl"; }
  std::filesystem::path sft_closed() const { return dir / "sft_closed.jsonl"; }
};

inline void write_corpus(const CorpusFiles& f, const Corpus& c) {
  std::filesystem::create_directories(f.dir);
  write_jsonl(f.offline_pool().string(), to_json_rows(c.offline_pool));
  write_jsonl(f.sft().string(), to_json_rows(c.sft));
  write_jsonl(f.online().string(), to_json_rows(c.online));
  write_jsonl(f.eval_closed().string(), to_json_rows(c.eval_closed));
  write_jsonl(f.eval_open().string(), to_json_rows(c.eval_open));
  write_jsonl(f.text().string(), to_json_rows(c.text));
  write_jsonl(f.sft_closed().string(), to_json_rows(c.sft_closed));
}

// ---------------------------------------------------------------------------
// Stages.

inline constexpr std::uint64_t kPretrainStage = 0x707265ULL;
inline constexpr std::uint64_t kSftStage = 0x736674ULL;
inline constexpr std::uint64_t kMineStage = 0x6d696e65ULL;
inline constexpr std::uint64_t kTrainStage = 0x747261696eULL;
inline constexpr std::uint64_t kInitStage = 0x696e6974ULL;

inline SupervisedConfig supervised_config(const StageConfig& s, std::uint64_t seed, std::uint64_t stage,
                                          std::size_t threads) {
  SupervisedConfig c{s.steps, s.batch_size, s.lr, derive_seed(seed, {stage}), threads};
  c.final_lr_fraction = s.final_lr_fraction;
  return c;
}

inline Policy initial_policy(const ModelConfig& model, std::uint64_t seed) {
  return Policy(model, derive_seed(seed, {kInitStage}));
}

// Caption and closed-answer-format text under the blank image.
inline std::vector<SupervisedExample> pretrain_corpus(const Vocab& vocab, const ModelConfig& model,
                                                      std::span<const InstructRecord> sft_records,
                                                      std::span<const ClosedRecord> text) {
  return pretrain_examples(vocab, model, sft_records, text);
}

// Image-grounded instructions and closed records, with the text-only corpus
// mixed back in so the answer formats learned in pretraining are retained.
inline std::vector<SupervisedExample> sft_corpus(const Vocab& vocab, const ModelConfig& model,
                                                 std::span<const InstructRecord> sft_records,
                                                 std::span<const ClosedRecord> text,
                                                 std::span<const ClosedRecord> sft_closed) {
  std::vector<SupervisedExample> out = sft_examples(vocab, model, sft_records);
  const auto rehearsal = pretrain_examples(vocab, model, sft_records, text);
  out.insert(out.end(), rehearsal.begin(), rehearsal.end());
  const auto grounded = closed_examples(vocab, model, sft_closed);
  out.insert(out.end(), grounded.begin(), grounded.end());
  return out;
}

inline MiningOptions mining_options(const MineConfig& m, std::size_t threads) {
  MiningOptions o;
  o.attack = m.attack;
  o.temperature = m.temperature;
  o.max_resamples = m.max_resamples;
  o.random_noise = m.random_noise;
  o.threads = threads;
  return o;
}

// ---------------------------------------------------------------------------
// Files.

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

inline std::string losses_csv(std::span<const double> losses) {
  std::string s = "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) s += std::to_string(i) + "," + format_metric(losses[i]) + "\n";
  return s;
}

inline std::vector<nlohmann::json> iig_rows(std::span<const IIGScore> scores) {
  std::vector<nlohmann::json> rows;
  rows.reserve(scores.size());
  for (const auto& s : scores) rows.push_back({{"id", s.id}, {"iig", s.value}});
  return rows;
}

}  // namespace mbpo
