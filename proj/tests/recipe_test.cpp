// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Measurements on policies trained with the default recipe. The pretrained
// and post-SFT policies are cached in MBPO_FIXTURE_CACHE and shared with
// mbpo_acceptance.

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "support/fixture.hpp"

namespace mbpo {
namespace {

testing::Fixture& fixture() {
  static testing::Fixture f(MBPO_FIXTURE_CACHE, default_threads());
  return f;
}

double mean_iig(const Policy& p, std::span<const InstructRecord> records, bool captions) {
  const auto& fx = fixture();
  std::vector<double> v(records.size());
  parallel_for(records.size(), fx.threads(), [&](std::size_t i) {
    const auto& r = records[i];
    const std::string q = captions ? "describe the image ." : r.question;
    const std::string o = captions ? caption(r.scene) : r.chosen;
    v[i] = iig(p, make_prompt(fx.vocab(), q, r.image), make_response(fx.vocab(), o));
  });
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

TEST(PostSft, ClosedAccuracyAboveChance) {
  auto& fx = fixture();
  const EvalReport rep = evaluate(fx.sft_policy(), fx.vocab(), fx.corpus().eval_closed, {}, fx.threads());
  ASSERT_GE(rep.n_mc + rep.n_yn, 400u);
  EXPECT_GT(rep.acc_yn, 0.5);
  EXPECT_GT(rep.acc_mc, 0.25);
  RecordProperty("acc_yn", std::to_string(rep.acc_yn));
  RecordProperty("acc_mc", std::to_string(rep.acc_mc));
}

TEST(PostSft, CaptionIigExceedsPretrained) {
  auto& fx = fixture();
  const auto records = std::span(fx.corpus().eval_open).first(200);
  EXPECT_GT(mean_iig(fx.sft_policy(), records, true), mean_iig(fx.pretrain_policy(), records, true));
}

TEST(PostSft, HeldOutIigPositive) {
  auto& fx = fixture();
  EXPECT_GT(mean_iig(fx.sft_policy(), std::span(fx.corpus().eval_open).first(200), false), 0.0);
}

TEST(PostSft, PgdLowersChosenLogProbStepByStep) {
  auto& fx = fixture();
  const Policy& p = fx.sft_policy();
  AttackConfig cfg = fx.config().mine.attack;
  cfg.iterations = 5;
  const std::size_t batches = 10, per_batch = 20;
  const auto records = std::span(fx.corpus().offline_pool).first(batches * per_batch);
  std::vector<std::vector<double>> lp(records.size());
  parallel_for(records.size(), fx.threads(), [&](std::size_t i) {
    const auto& r = records[i];
    const Prompt prompt = make_prompt(fx.vocab(), r.question, r.image);
    const Response w = make_response(fx.vocab(), r.chosen);
    for (const Image& img : pgd_trajectory(p, prompt, w, cfg)) lp[i].push_back(log_prob(p, {prompt.question, img}, w).total);
  });
  std::size_t down = 0, steps = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
      double before = 0.0, after = 0.0;
      for (std::size_t i = b * per_batch; i < (b + 1) * per_batch; ++i) {
        before += lp[i][t];
        after += lp[i][t + 1];
      }
      down += after <= before;
      ++steps;
    }
  }
  EXPECT_GE(static_cast<double>(down) / static_cast<double>(steps), 0.9) << down << "/" << steps;
}

struct Anchoring {
  int same = 0;
  double kl = 0.0;
};

Anchoring online_run(double beta) {
  auto& fx = fixture();
  const Policy& ref = fx.sft_policy();
  Policy p = ref;
  TrainConfig c = fx.config().train;
  c.beta = beta;
  c.steps = 40;
  c.offline_weight = 0.0;
  c.online_weight = 1.0;
  const auto rows = mbpo_train(p, fx.vocab(), TrainData{{}, fx.corpus().online, {}}, c, {});
  const auto eval = std::span(fx.corpus().eval_closed).first(200);
  std::vector<int> same(eval.size());
  parallel_for(eval.size(), fx.threads(), [&](std::size_t i) {
    const Prompt prompt = make_prompt(fx.vocab(), prompt_text(eval[i]), eval[i].image);
    same[i] = greedy(p, prompt) == greedy(ref, prompt);
  });
  return {std::accumulate(same.begin(), same.end(), 0), rows.back().kl};
}

// Greedy agreement with the reference after 40 online steps, beta 1e3 against 0.1.
TEST(MbpoTrain, LargeBetaAnchorsToReference) {
  const Anchoring loose = online_run(0.1), tight = online_run(1e3);
  EXPECT_GT(tight.same, loose.same);
  EXPECT_LT(tight.kl * 10.0, loose.kl);
  RecordProperty("same_beta_1e3", tight.same);
  RecordProperty("same_beta_0.1", loose.same);
}

}  // namespace
}  // namespace mbpo
