// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mbpo/objective.hpp"
#include "mbpo/optim.hpp"
#include "mbpo/synth.hpp"
#include "support/gradcheck.hpp"
#include "support/loss_fixtures.hpp"

namespace mbpo {
namespace {

using testing::make_group;
using testing::mixed_batch;
using testing::naive_loss;
using testing::vocab;

TEST(GroupAdvantages, Table) {
  EXPECT_EQ(group_advantages(std::vector<double>{2.0, 0.0}), (std::vector<double>{1.0, -1.0}));
  EXPECT_EQ(group_advantages(std::vector<double>{2, 2, 0, 0}), (std::vector<double>{1, 1, -1, -1}));
  EXPECT_EQ(group_advantages(std::vector<double>{2, 2, 2, 2}), (std::vector<double>{0, 0, 0, 0}));
  EXPECT_THROW(group_advantages(std::vector<double>{2.0}), GroupError);
}

TEST(GroupAdvantages, ZeroMeanUnitVariance) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(2 + rng.below(15));
    for (auto& v : r) v = rng.uniform() < 0.5 ? 0.0 : 2.0;
    const auto a = group_advantages(r);
    double m = 0.0, var = 0.0;
    for (double v : a) m += v;
    m /= static_cast<double>(a.size());
    for (double v : a) var += (v - m) * (v - m);
    var /= static_cast<double>(a.size());
    EXPECT_NEAR(m, 0.0, 1e-9);
    const bool degenerate = std::all_of(r.begin(), r.end(), [&](double v) { return v == r[0]; });
    EXPECT_NEAR(var, degenerate ? 0.0 : 1.0, 1e-9);
  }
}

TEST(GroupAdvantages, ScaleInvariant) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(2 + rng.below(10)), doubled;
    for (auto& v : r) v = rng.uniform(-3, 3);
    for (double v : r) doubled.push_back(2 * v);
    const auto a = group_advantages(r), b = group_advantages(doubled);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(KlK3, Identities) {
  const std::vector<double> lp = {-0.1, -2.0, -7.5};
  for (double v : kl_k3(lp, lp)) EXPECT_EQ(v, 0.0);
  const std::vector<double> ref = {std::log(0.5)}, cur = {std::log(0.25)};
  EXPECT_NEAR(kl_k3(ref, cur)[0], 2.0 - std::log(2.0) - 1.0, 1e-12);
  EXPECT_THROW(kl_k3(lp, std::vector<double>{0.0}), ShapeError);
}

TEST(KlK3, NonNegativeOnRandomPairs) {
  Rng rng(3);
  std::vector<double> ref(100000), cur(100000);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    ref[i] = -rng.uniform(0, 20);
    cur[i] = -rng.uniform(0, 20);
  }
  for (double v : kl_k3(ref, cur)) ASSERT_GE(v, 0.0);
}

TEST(ClippedSurrogate, Table) {
  const std::vector<double> same = {-1.0, -0.5};
  for (double v : clipped_surrogate(same, same, 0.7, 0.2)) EXPECT_DOUBLE_EQ(v, 0.7);
  const std::vector<double> cur = {std::log(2.0)}, old = {0.0};
  EXPECT_NEAR(clipped_surrogate(cur, old, 1.0, 0.2)[0], 1.2, 1e-12);
  const std::vector<double> half = {std::log(0.5)};
  EXPECT_NEAR(clipped_surrogate(half, old, -1.0, 0.2)[0], -0.8, 1e-12);
  EXPECT_THROW(clipped_surrogate(cur, same, 1.0, 0.2), ShapeError);
  EXPECT_THROW(clipped_surrogate(cur, old, 1.0, 1.5), DomainError);
}

// --- mbpo_loss ---------------------------------------------------------------

TEST(MbpoLoss, ZeroWhenPoliciesCoincide) {
  Policy p(ModelConfig{}, 5);
  const std::size_t b = 4;
  for (auto [off, on] : {std::pair<std::size_t, std::size_t>{b, 0}, {0, b}, {b / 2, b / 2}}) {
    const auto batch = mixed_batch(p, p, p, off, on, 6);
    const LossBreakdown lb = mbpo_loss(batch, p, {});
    EXPECT_NEAR(lb.total, 0.0, 1e-9) << off << "/" << on;
    EXPECT_EQ(lb.kl, 0.0);
    EXPECT_EQ(lb.n_offline, off);
    EXPECT_EQ(lb.n_online, on);
  }
}

TEST(MbpoLoss, TotalIsNegatedObjective) {
  Policy p(ModelConfig{}, 7), old(ModelConfig{}, 8), ref(ModelConfig{}, 9);
  const auto batch = mixed_batch(p, old, ref, 2, 2, 10);
  LossConfig cfg;
  cfg.beta = 0.3;
  const LossBreakdown lb = mbpo_loss(batch, p, cfg);
  EXPECT_NEAR(lb.total, -(lb.surrogate - cfg.beta * lb.kl), 1e-12);
  EXPECT_GT(lb.kl, 0.0);
  ASSERT_EQ(lb.groups.size(), 4u);
}

TEST(MbpoLoss, DegenerateGroupContributesNoSurrogate) {
  Policy p(ModelConfig{}, 11), old(ModelConfig{}, 12);
  const auto closed = gen_closed(13, 1, 0.5);
  const Prompt prompt = make_prompt(vocab(), prompt_text(closed[0]), closed[0].image);
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  const auto g = make_group(p, old, p, prompt, sample_group(p, prompt, 1.0, seeds), {2, 2, 2}, Source::kOnline);
  LossConfig cfg;
  cfg.beta = 0.0;
  const LossBreakdown lb = mbpo_loss(std::vector<RolloutGroup>{g}, p, cfg);
  EXPECT_EQ(lb.surrogate, 0.0);
  for (const auto& t : lb.grads) {
    for (double v : t.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(MbpoLoss, MatchesNaiveTranscription) {
  Policy p(ModelConfig{}, 14), old(ModelConfig{}, 15), ref(ModelConfig{}, 16);
  const auto batch = mixed_batch(p, old, ref, 1, 2, 17);
  LossConfig cfg;
  cfg.threads = 3;
  const LossBreakdown lb = mbpo_loss(batch, p, cfg);
  GradientTape tape;
  std::vector<Tensor> watched;
  for (const auto& t : p.parameters()) watched.push_back(tape.watch(t));
  Tensor loss = naive_loss(watched, p.config(), batch, cfg);
  EXPECT_NEAR(lb.total, loss.item(), 1e-12);
  Gradients g = tape.backward(loss);
  for (std::size_t k = 0; k < watched.size(); ++k) {
    EXPECT_LT(testing::max_relative_error(lb.grads[k].values(), g[watched[k]].values(), 1e-9), 1e-6) << k;
  }
}

TEST(MbpoLoss, ThreadCountDoesNotChangeResult) {
  Policy p(ModelConfig{}, 18), old(ModelConfig{}, 19);
  const auto batch = mixed_batch(p, old, p, 2, 2, 20);
  LossConfig one, many;
  many.threads = 4;
  const LossBreakdown a = mbpo_loss(batch, p, one), b = mbpo_loss(batch, p, many);
  EXPECT_EQ(a.total, b.total);
  for (std::size_t k = 0; k < a.grads.size(); ++k) EXPECT_EQ(a.grads[k].values(), b.grads[k].values());
}

TEST(MbpoLoss, GradientMatchesFiniteDifferences) {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 10; ++trial) worst = std::max(worst, testing::loss_gradient_trial(trial));
  EXPECT_LT(worst, 1e-4);
}

TEST(MbpoLoss, OneStepFavoursChosen) {
  Policy p(ModelConfig{}, 25);
  const auto open = gen_open(26, 1);
  const Prompt prompt = make_prompt(vocab(), open[0].question, open[0].image);
  const Response chosen = make_response(vocab(), open[0].chosen), rejected = make_response(vocab(), "no");
  const auto batch =
      std::vector<RolloutGroup>{make_group(p, p, p, prompt, {chosen, rejected}, {2.0, 0.0}, Source::kOffline)};
  const double margin_before = log_prob(p, prompt, chosen).total - log_prob(p, prompt, rejected).total;
  const LossBreakdown lb = mbpo_loss(batch, p, {});
  Optimizer opt({UpdateRule::kSgd, 1e-3});
  opt.step(p.parameters(), lb.grads);
  const double margin_after = log_prob(p, prompt, chosen).total - log_prob(p, prompt, rejected).total;
  EXPECT_GT(margin_after, margin_before);
}

TEST(RolloutGroupValidation, Errors) {
  Policy p(ModelConfig{}, 27);
  const auto open = gen_open(28, 1);
  const Prompt prompt = make_prompt(vocab(), open[0].question, open[0].image);
  const Response a = make_response(vocab(), "yes"), b = make_response(vocab(), "no");
  auto g = make_group(p, p, p, prompt, {a, b}, {2.0, 0.0}, Source::kOffline);
  EXPECT_NO_THROW(g.validate());
  auto bad = g;
  bad.rewards = {2.0, 2.0};
  bad.advantages = {0.0, 0.0};
  EXPECT_THROW(bad.validate(), GroupError);
  bad = g;
  bad.rewards = {1.0, 0.0};
  EXPECT_THROW(bad.validate(), GroupError);
  bad = g;
  bad.old_logps[0].push_back(0.0);
  EXPECT_THROW(bad.validate(), GroupError);
  bad = g;
  bad.source = Source::kOnline;
  bad.responses.push_back(a);
  EXPECT_THROW(bad.validate(), GroupError);
  EXPECT_THROW(mbpo_loss(std::vector<RolloutGroup>{}, p, {}), GroupError);
}

}  // namespace
}  // namespace mbpo
