// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "mbpo/model.hpp"
#include "mbpo/synth.hpp"

namespace mbpo {
namespace {

const Vocab& vocab() {
  static const Vocab v = Vocab::standard();
  return v;
}

Prompt scene_prompt(std::uint64_t seed, const std::string& question = "describe the image .") {
  Rng rng(seed);
  return make_prompt(vocab(), question, render(random_scene(rng)));
}

// Softmax probability of `token` in a row of raw logits, computed directly.
double softmax_prob(std::span<const double> logits, std::size_t token) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return std::exp(logits[token] - m) / z;
}

// Logits for the next token after `question` + `prefix`, from a fresh full
// forward pass over just that sequence.
std::vector<double> next_logits(const Policy& p, const Prompt& prompt, const Tokens& prefix) {
  Tokens seq = prompt.question;
  seq.insert(seq.end(), prefix.begin(), prefix.end());
  const std::size_t row = p.config().num_patches() + seq.size() - 1;
  return forward_logits(p.parameters(), p.config(), prompt.image, seq, row, row + 1).values();
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.num_patches(), 16u);
  c.patch = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(LogProb, DegenerateVocabularyIsCertain) {
  ModelConfig c;
  c.vocab_size = 1;
  c.eos_id = 0;
  c.d_model = 8;
  c.n_heads = 2;
  Policy p(c, 3);
  Prompt prompt{{0, 0}, Tensor::full(c.image_shape(), 0.5)};
  LogProb lp = log_prob(p, prompt, Response{{0, 0, 0}});
  for (double v : lp.per_token) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(lp.total, 0.0);
}

TEST(LogProb, TotalIsSumOfTokens) {
  Policy p(ModelConfig{}, 1);
  LogProb lp = log_prob(p, scene_prompt(2), make_response(vocab(), "a red square and a blue circle"));
  double s = 0.0;
  for (double v : lp.per_token) {
    EXPECT_LE(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(lp.total, s, 1e-12);
}

TEST(LogProb, MatchesFullSoftmaxEnumeration) {
  Policy p(ModelConfig{}, 4);
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    const Prompt prompt = scene_prompt(10 + trial);
    const Response r = make_response(vocab(), trial % 2 ? "yes" : "a green triangle and a yellow square");
    double product = 1.0;
    Tokens prefix;
    for (TokenId t : r.tokens) {
      product *= softmax_prob(next_logits(p, prompt, prefix), t);
      prefix.push_back(t);
    }
    const double total = log_prob(p, prompt, r).total;
    EXPECT_NEAR(std::exp(total), product, 1e-9 * std::max(1.0, product));
    EXPECT_NEAR(total, std::log(product), 1e-9);
  }
}

TEST(LogProb, RejectsOutOfRangeTokens) {
  Policy p(ModelConfig{}, 1);
  Prompt prompt = scene_prompt(1);
  EXPECT_THROW(log_prob(p, prompt, Response{{static_cast<TokenId>(vocab().size())}}), Error);
  EXPECT_THROW(log_prob(p, prompt, Response{{}}), Error);
  prompt.question.push_back(static_cast<TokenId>(999));
  EXPECT_THROW(log_prob(p, prompt, make_response(vocab(), "yes")), Error);
}

TEST(LogProb, Causality) {
  Policy p(ModelConfig{}, 5);
  const Prompt prompt = scene_prompt(3);
  const Response a = make_response(vocab(), "a red square and a blue circle");
  Response b = a;
  b.tokens[4] = vocab().id("yellow");
  b.tokens[5] = vocab().id("?");
  const auto la = log_prob(p, prompt, a).per_token, lb = log_prob(p, prompt, b).per_token;
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(la[t], lb[t]) << t;
  EXPECT_NE(la[4], lb[4]);
  EXPECT_NE(la[5], lb[5]);
}

TEST(LogProb, HeadRowsNormalize) {
  Policy p(ModelConfig{}, 6);
  const Prompt prompt = scene_prompt(4);
  const std::size_t n = p.config().num_patches() + prompt.question.size();
  Tensor probs = softmax(forward_logits(p.parameters(), p.config(), prompt.image, prompt.question, 0, n));
  const std::size_t v = p.config().vocab_size;
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += probs[r * v + j];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Sample, GreedyIsDeterministicAndArgmax) {
  Policy p(ModelConfig{}, 7);
  const Prompt prompt = scene_prompt(5);
  const Response a = sample(p, prompt, 0.0, 1), b = sample(p, prompt, 0.0, 99);
  EXPECT_EQ(a, b);
  Tokens prefix;
  for (TokenId t : a.tokens) {
    const auto logits = next_logits(p, prompt, prefix);
    const double chosen = softmax_prob(logits, t);
    for (std::size_t j = 0; j < logits.size(); ++j) EXPECT_GE(chosen, softmax_prob(logits, j));
    prefix.push_back(t);
  }
  EXPECT_TRUE(a.tokens.back() == p.config().eos_id || a.tokens.size() == p.config().max_response_len);
}

TEST(Sample, SeededDeterminism) {
  Policy p(ModelConfig{}, 8);
  const Prompt prompt = scene_prompt(6);
  EXPECT_EQ(sample(p, prompt, 1.0, 42), sample(p, prompt, 1.0, 42));
  bool any_diff = false;
  for (std::uint64_t s = 0; s < 10 && !any_diff; ++s) any_diff = sample(p, prompt, 1.0, s) != sample(p, prompt, 1.0, 42);
  EXPECT_TRUE(any_diff);
  EXPECT_THROW(sample(p, prompt, -1.0, 0), DomainError);
}

TEST(Sample, GroupMatchesIndividualDraws) {
  Policy p(ModelConfig{}, 9);
  const Prompt prompt = scene_prompt(7);
  std::vector<std::uint64_t> seeds = {3, 1, 4, 1, 5, 9, 2, 6};
  const auto group = sample_group(p, prompt, 1.0, seeds);
  ASSERT_EQ(group.size(), seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) EXPECT_EQ(group[i], sample(p, prompt, 1.0, seeds[i])) << i;
}

TEST(ImageGradient, MatchesFiniteDifferences) {
  Policy p(ModelConfig{}, 10);
  const Prompt prompt = scene_prompt(8);
  const Response r = make_response(vocab(), "a red square");
  const Image g = image_gradient(p, prompt, r);
  ASSERT_EQ(g.shape(), prompt.image.shape());
  Rng rng(11);
  const double h = 1e-5;
  for (int k = 0; k < 20; ++k) {
    const std::size_t i = rng.below(g.size());
    auto nll_at = [&](double delta) {
      std::vector<double> px = prompt.image.values();
      px[i] += delta;
      return -log_prob(p, Prompt{prompt.question, Tensor(prompt.image.shape(), px)}, r).total;
    };
    const double numeric = (nll_at(h) - nll_at(-h)) / (2 * h);
    const double denom = std::max({std::abs(numeric), std::abs(g[i]), 1e-6});
    EXPECT_LT(std::abs(numeric - g[i]) / denom, 1e-3) << "pixel " << i;
  }
  for (double v : g.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(image_gradient(p, prompt, r).values(), g.values());
}

TEST(ImageGradient, ZeroProjectionBlocksGradient) {
  Policy p(ModelConfig{}, 12);
  const std::size_t w = p.index_of("patch_proj.w");
  p.parameters()[w] = Tensor::zeros(p.parameters()[w].shape());
  const Image g = image_gradient(p, scene_prompt(9), make_response(vocab(), "yes"));
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Snapshot, RestoreIsBitExact) {
  Policy p(ModelConfig{}, 13);
  const Prompt prompt = scene_prompt(10);
  const Response r = make_response(vocab(), "a blue circle");
  const PolicySnapshot s1 = snapshot(p), s2 = snapshot(p);
  EXPECT_EQ(s1.bytes(), s2.bytes());
  const Policy q = restore(s1);
  EXPECT_EQ(log_prob(q, prompt, r).per_token, log_prob(p, prompt, r).per_token);
  EXPECT_EQ(fingerprint(q), fingerprint(p));
}

TEST(Snapshot, FileRoundTripAndTruncation) {
  Policy p(ModelConfig{}, 14);
  const std::string path = ::testing::TempDir() + "policy.ckpt";
  save_policy(path, p);
  EXPECT_EQ(fingerprint(load_policy(path)), fingerprint(p));
  const std::string bytes = read_file(path);
  write_file(path, bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_policy(path), CheckpointError);
  std::remove(path.c_str());
  EXPECT_THROW(load_policy(path), Error);
}

TEST(Snapshot, SurvivesLaterUpdates) {
  Policy p(ModelConfig{}, 15);
  const PolicySnapshot s = snapshot(p);
  const std::uint64_t before = fingerprint(p);
  p.parameters()[0] = Tensor::zeros(p.parameters()[0].shape());
  EXPECT_NE(fingerprint(p), before);
  EXPECT_EQ(fingerprint(restore(s)), before);
}

}  // namespace
}  // namespace mbpo
