// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Hybrid offline/online group-relative policy objective.
//
// For a batch of B groups (offline chosen/rejected pairs and online rollout
// groups alike) the maximised objective is
//
//   J = 1/B * sum_g 1/G_g * sum_i mean_t min(rho A_i, clip(rho, 1-eps, 1+eps) A_i)
//       - beta * mean over every batch token of k3(ref, cur)
//
// with token-level ratios rho = exp(cur - old) and the k3 estimator
// k3 = exp(ref - cur) - (ref - cur) - 1. The returned loss is -J.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mbpo/model.hpp"
#include "mbpo/parallel.hpp"
#include "mbpo/tensor.hpp"

namespace mbpo {

class GroupError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kDegenerateStd = 1e-8;

// (r_i - mean) / std with the population standard deviation. Groups whose
// rewards are (numerically) constant get all-zero advantages.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw GroupError("group_advantages: need at least 2 rewards, got " + std::to_string(rewards.size()));
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double stddev = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (stddev < kDegenerateStd) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / stddev;
  return out;
}

inline std::vector<double> kl_k3(std::span<const double> ref_logps, std::span<const double> cur_logps) {
  if (ref_logps.size() != cur_logps.size()) {
    throw ShapeError("kl_k3: length mismatch " + std::to_string(ref_logps.size()) + " vs " +
                     std::to_string(cur_logps.size()));
  }
  std::vector<double> out(ref_logps.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = ref_logps[i] - cur_logps[i];
    // expm1(d) - d keeps full precision near d = 0; never negative.
    out[i] = std::max(0.0, std::expm1(d) - d);
  }
  return out;
}

inline std::vector<double> clipped_surrogate(std::span<const double> cur_logps, std::span<const double> old_logps,
                                             double advantage, double eps_clip) {
  if (cur_logps.size() != old_logps.size()) {
    throw ShapeError("clipped_surrogate: length mismatch " + std::to_string(cur_logps.size()) + " vs " +
                     std::to_string(old_logps.size()));
  }
  if (!(eps_clip > 0.0 && eps_clip < 1.0)) throw DomainError("clipped_surrogate: eps_clip must be in (0,1)");
  std::vector<double> out(cur_logps.size());
  for (std::size_t t = 0; t < out.size(); ++t) {
    const double rho = std::exp(cur_logps[t] - old_logps[t]);
    out[t] = std::min(rho * advantage, std::clamp(rho, 1.0 - eps_clip, 1.0 + eps_clip) * advantage);
  }
  return out;
}

enum class Source { kOffline, kOnline };

struct RolloutGroup {
  Prompt prompt;
  std::vector<Response> responses;
  std::vector<std::vector<double>> old_logps;
  std::vector<std::vector<double>> ref_logps;
  std::vector<double> rewards;
  std::vector<double> advantages;
  Source source = Source::kOnline;

  std::size_t size() const { return responses.size(); }

  void validate() const {
    const std::size_t g = responses.size();
    if (g < 2) throw GroupError("rollout group needs at least 2 responses");
    if (old_logps.size() != g || ref_logps.size() != g || rewards.size() != g || advantages.size() != g) {
      throw GroupError("rollout group fields disagree on group size " + std::to_string(g));
    }
    for (std::size_t i = 0; i < g; ++i) {
      if (old_logps[i].size() != responses[i].tokens.size() || ref_logps[i].size() != responses[i].tokens.size()) {
        throw GroupError("rollout group response " + std::to_string(i) + ": log-prob length does not match tokens");
      }
    }
    for (double r : rewards) {
      if (r != 0.0 && r != 2.0) throw GroupError("rollout group reward " + std::to_string(r) + " not in {0, 2}");
    }
    if (source == Source::kOffline && (g != 2 || rewards[0] + rewards[1] != 2.0 || rewards[0] == rewards[1])) {
      throw GroupError("offline group must be a chosen/rejected pair with rewards {2, 0}");
    }
    double mean = 0.0;
    for (double a : advantages) mean += a;
    if (std::abs(mean / static_cast<double>(g)) > 1e-9) throw GroupError("rollout group advantages do not have zero mean");
  }
};

struct LossConfig {
  double beta = 0.1;
  double eps_clip = 0.2;
  std::size_t threads = 1;
};

struct GroupDiagnostics {
  double surrogate = 0.0;  // 1/G sum_i mean_t clipped surrogate
  double kl_sum = 0.0;     // sum of k3 over the group's tokens
  std::size_t tokens = 0;
  double mean_reward = 0.0;
};

struct LossBreakdown {
  double total = 0.0;
  double surrogate = 0.0;
  double kl = 0.0;
  std::size_t n_offline = 0;
  std::size_t n_online = 0;
  std::vector<GroupDiagnostics> groups;
  std::vector<Tensor> grads;  // aligned with Policy::parameters()
};

// Per-token log-probs of each response under `policy`.
inline std::vector<std::vector<double>> response_logps(const Policy& policy, const Prompt& prompt,
                                                       std::span<const Response> responses) {
  std::vector<std::vector<double>> out;
  out.reserve(responses.size());
  for (const auto& r : responses) out.push_back(log_prob(policy, prompt, r).per_token);
  return out;
}

namespace detail {

struct LossItem {
  std::size_t group;
  std::size_t response;    // representative index within the group
  double multiplicity;     // identical responses folded into this one
};

struct ItemResult {
  double surrogate_mean = 0.0;  // mean_t surrogate of one copy
  double kl_sum = 0.0;          // sum_t k3 of one copy
  std::vector<Tensor> grads;
};

inline bool same_rollout(const RolloutGroup& g, std::size_t a, std::size_t b) {
  return g.responses[a] == g.responses[b] && g.advantages[a] == g.advantages[b] && g.old_logps[a] == g.old_logps[b] &&
         g.ref_logps[a] == g.ref_logps[b];
}

}  // namespace detail

inline LossBreakdown mbpo_loss(std::span<const RolloutGroup> batch, const Policy& policy, const LossConfig& cfg) {
  if (batch.empty()) throw GroupError("mbpo_loss: empty batch");
  if (!(cfg.eps_clip > 0.0 && cfg.eps_clip < 1.0)) throw DomainError("mbpo_loss: eps_clip must be in (0,1)");
  LossBreakdown out;
  std::size_t total_tokens = 0;
  std::vector<detail::LossItem> items;
  for (std::size_t gi = 0; gi < batch.size(); ++gi) {
    const auto& g = batch[gi];
    g.validate();
    (g.source == Source::kOffline ? out.n_offline : out.n_online) += 1;
    std::vector<bool> folded(g.size(), false);
    for (std::size_t i = 0; i < g.size(); ++i) {
      total_tokens += g.responses[i].tokens.size();
      if (folded[i]) continue;
      double mult = 1.0;
      for (std::size_t j = i + 1; j < g.size(); ++j) {
        if (!folded[j] && detail::same_rollout(g, i, j)) {
          folded[j] = true;
          mult += 1.0;
        }
      }
      items.push_back({gi, i, mult});
    }
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const double inv_tokens = 1.0 / static_cast<double>(total_tokens);
  const ModelConfig& mc = policy.config();
  std::vector<detail::ItemResult> results(items.size());

  parallel_for(items.size(), cfg.threads, [&](std::size_t k) {
    const auto& item = items[k];
    const RolloutGroup& g = batch[item.group];
    const Response& resp = g.responses[item.response];
    const std::size_t t_len = resp.tokens.size();
    const double adv = g.advantages[item.response];

    GradientTape tape;
    std::vector<Tensor> watched;
    watched.reserve(policy.parameters().size());
    for (const auto& p : policy.parameters()) watched.push_back(tape.watch(p));

    Tensor cur = token_log_probs(watched, mc, g.prompt, resp);
    Tensor old(Shape{t_len}, g.old_logps[item.response]);
    Tensor ref(Shape{t_len}, g.ref_logps[item.response]);

    Tensor ratio = exp(sub(cur, old));
    Tensor surr = minimum(scale(ratio, adv), scale(clamp(ratio, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip), adv));
    Tensor diff = sub(ref, cur);
    Tensor k3 = add_scalar(sub(exp(diff), diff), -1.0);

    const double surr_weight = item.multiplicity * inv_b / (static_cast<double>(g.size()) * static_cast<double>(t_len));
    const double kl_weight = item.multiplicity * cfg.beta * inv_tokens;
    Tensor loss = add(scale(sum(surr), -surr_weight), scale(sum(k3), kl_weight));

    auto& res = results[k];
    res.surrogate_mean = sum(surr.detach()).item() / static_cast<double>(t_len);
    // Same expression as kl_k3() so diagnostics agree with the pure function.
    for (double v : kl_k3(g.ref_logps[item.response], cur.values())) res.kl_sum += v;
    Gradients grads = tape.backward(loss);
    res.grads.reserve(watched.size());
    for (const auto& w : watched) res.grads.push_back(grads[w]);
  });

  out.groups.resize(batch.size());
  std::vector<std::vector<double>> acc;
  for (const auto& p : policy.parameters()) acc.emplace_back(p.size(), 0.0);
  double kl_total = 0.0;
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto& item = items[k];
    const auto& res = results[k];
    auto& diag = out.groups[item.group];
    const double g_size = static_cast<double>(batch[item.group].size());
    diag.surrogate += item.multiplicity * res.surrogate_mean / g_size;
    diag.kl_sum += item.multiplicity * res.kl_sum;
    kl_total += item.multiplicity * res.kl_sum;
    for (std::size_t p = 0; p < acc.size(); ++p) {
      const auto gd = res.grads[p].data();
      auto& a = acc[p];
      for (std::size_t j = 0; j < a.size(); ++j) a[j] += gd[j];
    }
  }
  for (std::size_t gi = 0; gi < batch.size(); ++gi) {
    auto& diag = out.groups[gi];
    for (const auto& r : batch[gi].responses) diag.tokens += r.tokens.size();
    double rsum = 0.0;
    for (double r : batch[gi].rewards) rsum += r;
    diag.mean_reward = rsum / static_cast<double>(batch[gi].size());
    out.surrogate += diag.surrogate;
  }
  out.surrogate *= inv_b;
  out.kl = kl_total * inv_tokens;
  out.total = -(out.surrogate - cfg.beta * out.kl);
  for (std::size_t p = 0; p < acc.size(); ++p) out.grads.emplace_back(policy.parameters()[p].shape(), std::move(acc[p]));
  return out;
}

}  // namespace mbpo
