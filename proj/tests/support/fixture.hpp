// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mbpo/lab.hpp"

namespace mbpo::testing {

// Cached fixture: corpus, post-SFT policy and mined preference records built
// with the default configuration.

class Fixture {
 public:
  Fixture(std::filesystem::path dir, std::size_t threads) : dir_(std::move(dir)), threads_(threads) {
    cfg_.train.seed = kSeed;
    cfg_.train.threads = threads_;
    std::filesystem::create_directories(dir_);
    const std::string key = to_json(cfg_).dump();
    const std::filesystem::path key_path = dir_ / "config.json";
    if (!std::filesystem::exists(key_path) || read_file(key_path.string()) != key) {
      for (const auto& e : std::filesystem::directory_iterator(dir_)) std::filesystem::remove_all(e.path());
      write_atomic(key_path, key);
    }
    corpus_ = generate_corpus(cfg_.data, kSeed);
  }

  const LabConfig& config() const { return cfg_; }
  const Corpus& corpus() const { return corpus_; }
  const Vocab& vocab() const { return vocab_; }
  std::size_t threads() const { return threads_; }

  const Policy& pretrain_policy() {
    if (!pretrain_) {
      const std::filesystem::path path = dir_ / "pretrain.ckpt";
      if (!std::filesystem::exists(path)) {
        Policy p = initial_policy(cfg_.model, kSeed);
        pretrain_text(p, pretrain_corpus(vocab_, cfg_.model, corpus_.sft, corpus_.text),
                      supervised_config(cfg_.pretrain, kSeed, kPretrainStage, threads_));
        write_atomic(path, encode_checkpoint(to_checkpoint(p)));
      }
      pretrain_ = load_policy(path.string());
    }
    return *pretrain_;
  }

  const Policy& sft_policy() {
    if (!sft_) {
      const std::filesystem::path path = dir_ / "sft.ckpt";
      if (!std::filesystem::exists(path)) {
        const auto t0 = std::chrono::steady_clock::now();
        Policy p = pretrain_policy();
        sft(p, sft_corpus(vocab_, cfg_.model, corpus_.sft, corpus_.text, corpus_.sft_closed),
            supervised_config(cfg_.sft, kSeed, kSftStage, threads_));
        write_atomic(path, encode_checkpoint(to_checkpoint(p)));
        note("built post-SFT policy", t0);
      }
      sft_ = load_policy(path.string());
    }
    return *sft_;
  }

  const std::vector<PreferenceRecord>& mined() {
    if (!mined_) {
      const std::filesystem::path path = dir_ / "offline.jsonl";
      if (!std::filesystem::exists(path)) {
        const auto t0 = std::chrono::steady_clock::now();
        const Policy& p = sft_policy();
        const Selection sel = select_top_k(corpus_.offline_pool, p, vocab_, cfg_.iig.top_k, threads_);
        const MiningResult res = build_offline(sel.selected, p, vocab_, mining_options(cfg_.mine, threads_),
                                               derive_seed(kSeed, {kMineStage}));
        std::string text;
        for (const auto& r : res.records) text += to_json(r).dump() + "\n";
        write_atomic(path, text);
        note("mined " + std::to_string(res.records.size()) + " records", t0);
      }
      mined_ = read_preferences(path.string());
    }
    return *mined_;
  }

  static constexpr std::uint64_t kSeed = 7;

 private:
  static void note(const std::string& what, std::chrono::steady_clock::time_point t0) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "  .. " << what << " in " << secs << " s" << std::endl;
  }

  static void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    write_file(tmp.string(), bytes);
    std::filesystem::rename(tmp, path);
  }

  std::filesystem::path dir_;
  std::size_t threads_;
  LabConfig cfg_;
  Corpus corpus_;
  Vocab vocab_ = Vocab::standard();
  std::optional<Policy> pretrain_, sft_;
  std::optional<std::vector<PreferenceRecord>> mined_;
};

}  // namespace mbpo::testing
