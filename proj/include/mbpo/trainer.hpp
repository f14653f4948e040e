// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Training drivers: supervised next-token training (text-only pretraining
// and SFT), the hybrid offline/online policy optimization loop, held-out
// evaluation, and metrics emission.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbpo/adversarial.hpp"
#include "mbpo/iig.hpp"
#include "mbpo/model.hpp"
#include "mbpo/objective.hpp"
#include "mbpo/optim.hpp"
#include "mbpo/parallel.hpp"
#include "mbpo/rng.hpp"
#include "mbpo/synth.hpp"
#include "mbpo/verifier.hpp"

namespace mbpo {

class TrainingError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Supervised training.

struct SupervisedExample {
  Prompt prompt;
  Response target;
};

struct SupervisedConfig {
  std::size_t steps = 0;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // Cosine decay from lr to lr * final_lr_fraction over the run; 1 keeps lr constant.
  double final_lr_fraction = 1.0;
};

inline double cosine_lr(double lr, double final_fraction, std::size_t step, std::size_t steps) {
  if (steps <= 1 || final_fraction == 1.0) return lr;
  const double progress = static_cast<double>(step) / static_cast<double>(steps - 1);
  return lr * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));
}

// Mean per-token negative log-likelihood of each example, averaged over the
// examples.
inline double supervised_loss(const Policy& policy, std::span<const SupervisedExample> examples,
                              std::size_t threads = 1) {
  if (examples.empty()) throw TrainingError("supervised_loss: no examples");
  std::vector<double> nll(examples.size());
  parallel_for(examples.size(), threads, [&](std::size_t i) {
    const auto lp = log_prob(policy, examples[i].prompt, examples[i].target);
    nll[i] = -lp.total / static_cast<double>(lp.per_token.size());
  });
  double s = 0.0;
  for (double v : nll) s += v;
  return s / static_cast<double>(nll.size());
}

// Minibatch Adam on next-token cross-entropy. Returns the per-step batch
// losses measured before each update.
inline std::vector<double> supervised_train(Policy& policy, std::span<const SupervisedExample> examples,
                                            const SupervisedConfig& cfg) {
  if (cfg.steps == 0) return {};
  if (examples.empty()) throw TrainingError("supervised_train: no examples");
  if (cfg.batch_size == 0) throw ConfigError("supervised_train: batch_size must be >= 1");
  Optimizer opt({UpdateRule::kAdam, cfg.lr});
  const auto& mc = policy.config();
  std::vector<double> losses;
  losses.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, {0x7375706572ULL, step}));
    std::vector<std::size_t> pick_idx(cfg.batch_size);
    for (auto& i : pick_idx) i = rng.below(examples.size());

    std::vector<std::vector<Tensor>> grads(pick_idx.size());
    std::vector<double> item_loss(pick_idx.size());
    const double w = 1.0 / static_cast<double>(pick_idx.size());
    parallel_for(pick_idx.size(), cfg.threads, [&](std::size_t b) {
      const auto& ex = examples[pick_idx[b]];
      GradientTape tape;
      std::vector<Tensor> watched;
      for (const auto& p : policy.parameters()) watched.push_back(tape.watch(p));
      Tensor nll = scale(mean(token_log_probs(watched, mc, ex.prompt, ex.target)), -w);
      item_loss[b] = nll.item();
      Gradients g = tape.backward(nll);
      for (const auto& t : watched) grads[b].push_back(g[t]);
    });

    double loss = 0.0;
    for (double v : item_loss) loss += v;
    if (!std::isfinite(loss)) {
      throw TrainingError("supervised_train: non-finite loss at step " + std::to_string(step));
    }
    std::vector<Tensor> total;
    for (std::size_t p = 0; p < policy.parameters().size(); ++p) {
      std::vector<double> acc(policy.parameters()[p].size(), 0.0);
      for (const auto& g : grads) {
        const auto d = g[p].data();
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += d[j];
      }
      total.emplace_back(policy.parameters()[p].shape(), std::move(acc));
    }
    opt.set_lr(cosine_lr(cfg.lr, cfg.final_lr_fraction, step, cfg.steps));
    opt.step(policy.parameters(), total);
    losses.push_back(loss);
  }
  return losses;
}

// Text-only corpus: every prompt carries the blank image, so whatever is
// learned here is a language prior. Captions come from open records; the
// closed records contribute the answer format of closed-ended questions.
// Supervised target for a closed record. Multiple-choice targets alternate,
// by record id, between the option letter and the option text; the verifier
// accepts either.
inline std::string closed_target(const ClosedRecord& r) {
  if (r.kind != ClosedKind::kMultipleChoice || !(derive_seed(r.id, {0x666d74ULL}) & 1)) return r.answer;
  const std::size_t k = static_cast<std::size_t>(r.answer.at(0) - 'A');
  return r.options.at(k);
}

// Closed records answered under their own image.
inline std::vector<SupervisedExample> closed_examples(const Vocab& vocab, const ModelConfig& config,
                                                      std::span<const ClosedRecord> closed) {
  std::vector<SupervisedExample> out;
  for (const auto& r : closed) {
    out.push_back({make_prompt(vocab, prompt_text(r), r.image), make_response(vocab, closed_target(r), config.max_response_len)});
  }
  return out;
}

inline std::vector<SupervisedExample> pretrain_examples(const Vocab& vocab, const ModelConfig& config,
                                                        std::span<const InstructRecord> open,
                                                        std::span<const ClosedRecord> closed) {
  const Image blank = blank_image(config);
  std::vector<SupervisedExample> out;
  for (const auto& r : open) {
    out.push_back({make_prompt(vocab, "describe the image .", blank),
                   make_response(vocab, caption(r.scene), config.max_response_len)});
  }
  for (const auto& r : closed) {
    out.push_back({make_prompt(vocab, prompt_text(r), blank), make_response(vocab, closed_target(r), config.max_response_len)});
  }
  return out;
}

inline std::vector<SupervisedExample> sft_examples(const Vocab& vocab, const ModelConfig& config,
                                                   std::span<const InstructRecord> open) {
  std::vector<SupervisedExample> out;
  for (const auto& r : open) {
    out.push_back({make_prompt(vocab, r.question, r.image), make_response(vocab, r.chosen, config.max_response_len)});
  }
  return out;
}

inline std::vector<double> pretrain_text(Policy& policy, std::span<const SupervisedExample> corpus,
                                         const SupervisedConfig& cfg) {
  return supervised_train(policy, corpus, cfg);
}

inline std::vector<double> sft(Policy& policy, std::span<const SupervisedExample> corpus, const SupervisedConfig& cfg) {
  return supervised_train(policy, corpus, cfg);
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalItem {
  std::uint64_t id = 0;
  ClosedKind kind = ClosedKind::kYesNo;
  std::string response;
  Verdict verdict;
};

struct EvalReport {
  std::size_t n_mc = 0;
  std::size_t n_yn = 0;
  double acc_mc = kNaN;
  double acc_yn = kNaN;
  double accuracy = kNaN;
  double mean_reward = kNaN;
  double mean_iig = kNaN;  // over open records; NaN when none given
  std::vector<EvalItem> items;
};

inline Response greedy(const Policy& policy, const Prompt& prompt) { return sample(policy, prompt, 0.0, 0); }

inline EvalReport evaluate(const Policy& policy, const Vocab& vocab, std::span<const ClosedRecord> closed,
                           std::span<const InstructRecord> open = {}, std::size_t threads = 1) {
  if (closed.empty()) throw TrainingError("evaluate: held-out closed-ended set is empty");
  EvalReport rep;
  rep.items.resize(closed.size());
  parallel_for(closed.size(), threads, [&](std::size_t i) {
    const auto& r = closed[i];
    const Response out = greedy(policy, make_prompt(vocab, prompt_text(r), r.image));
    const std::string text = vocab.detokenize(out.tokens);
    rep.items[i] = {r.id, r.kind, text, reward(text, r)};
  });
  std::size_t hit_mc = 0, hit_yn = 0;
  double rsum = 0.0;
  for (const auto& it : rep.items) {
    const bool mc = it.kind == ClosedKind::kMultipleChoice;
    (mc ? rep.n_mc : rep.n_yn) += 1;
    if (it.verdict.correct) (mc ? hit_mc : hit_yn) += 1;
    rsum += it.verdict.reward;
  }
  if (rep.n_mc) rep.acc_mc = static_cast<double>(hit_mc) / static_cast<double>(rep.n_mc);
  if (rep.n_yn) rep.acc_yn = static_cast<double>(hit_yn) / static_cast<double>(rep.n_yn);
  rep.accuracy = static_cast<double>(hit_mc + hit_yn) / static_cast<double>(closed.size());
  rep.mean_reward = rsum / static_cast<double>(closed.size());
  if (!open.empty()) {
    double s = 0.0;
    for (const auto& sc : score_records(policy, vocab, open, threads)) s += sc.value;
    rep.mean_iig = s / static_cast<double>(open.size());
  }
  return rep;
}

inline nlohmann::json nan_or(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"n_mc", r.n_mc},
          {"n_yn", r.n_yn},
          {"acc_mc", nan_or(r.acc_mc)},
          {"acc_yn", nan_or(r.acc_yn)},
          {"accuracy", nan_or(r.accuracy)},
          {"mean_reward", nan_or(r.mean_reward)},
          {"mean_iig", nan_or(r.mean_iig)}};
}

inline nlohmann::json to_json(const EvalItem& it) {
  return {{"id", it.id}, {"kind", kind_name(it.kind)}, {"response", it.response}, {"verdict", to_json(it.verdict)}};
}

// ---------------------------------------------------------------------------
// Hybrid policy optimization.

struct TrainConfig {
  std::uint64_t seed = 0;
  double lr = 1e-3;
  double reference_lr = 5e-7;  // reference value for 7B models; not used by the toy
  double beta = 0.1;
  double eps_clip = 0.2;
  std::size_t batch_size = 16;
  std::size_t group_size = 16;
  double temperature = 1.0;
  std::size_t steps = 500;
  // Source sampling weights; unset means proportional to dataset sizes.
  std::optional<double> offline_weight;
  std::optional<double> online_weight;
  AttackConfig attack;
  std::size_t eval_every = 50;
  std::size_t threads = 1;

  void validate() const {
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (group_size < 2) throw ConfigError("TrainConfig: group_size must be >= 2");
    if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
    if (beta < 0.0) throw ConfigError("TrainConfig: beta must be >= 0");
    if (!(eps_clip > 0.0 && eps_clip < 1.0)) throw ConfigError("TrainConfig: eps_clip must be in (0,1)");
    if (temperature < 0.0) throw ConfigError("TrainConfig: temperature must be >= 0");
    if (offline_weight.value_or(0.0) < 0.0 || online_weight.value_or(0.0) < 0.0) {
      throw ConfigError("TrainConfig: mix weights must be non-negative");
    }
    if (offline_weight && online_weight && *offline_weight == 0.0 && *online_weight == 0.0) {
      throw ConfigError("TrainConfig: mix weights must not both be zero");
    }
    attack.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"seed", c.seed},
       {"lr", c.lr},
       {"reference_lr", c.reference_lr},
       {"beta", c.beta},
       {"eps_clip", c.eps_clip},
       {"batch_size", c.batch_size},
       {"group_size", c.group_size},
       {"temperature", c.temperature},
       {"steps", c.steps},
       {"mix", {{"offline", c.offline_weight ? nlohmann::json(*c.offline_weight) : nlohmann::json(nullptr)},
                {"online", c.online_weight ? nlohmann::json(*c.online_weight) : nlohmann::json(nullptr)}}},
       {"attack", {{"iterations", c.attack.iterations}, {"step", c.attack.step}, {"ball", c.attack.ball}}},
       {"eval_every", c.eval_every},
       {"threads", c.threads}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {"seed",        "lr",    "reference_lr", "beta",   "eps_clip",
                                                 "batch_size",  "group_size", "temperature", "steps", "mix",
                                                 "attack",      "eval_every", "threads"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("TrainConfig: unknown key '" + k + "'");
  }
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) j.at(k).get_to(field);
  };
  get("seed", c.seed);
  get("lr", c.lr);
  get("reference_lr", c.reference_lr);
  get("beta", c.beta);
  get("eps_clip", c.eps_clip);
  get("batch_size", c.batch_size);
  get("group_size", c.group_size);
  get("temperature", c.temperature);
  get("steps", c.steps);
  get("eval_every", c.eval_every);
  get("threads", c.threads);
  if (j.contains("mix")) {
    const auto& m = j.at("mix");
    if (m.contains("offline") && !m.at("offline").is_null()) c.offline_weight = m.at("offline").get<double>();
    if (m.contains("online") && !m.at("online").is_null()) c.online_weight = m.at("online").get<double>();
  }
  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    if (a.contains("iterations")) a.at("iterations").get_to(c.attack.iterations);
    if (a.contains("step")) a.at("step").get_to(c.attack.step);
    if (a.contains("ball")) a.at("ball").get_to(c.attack.ball);
  }
}

struct MetricsRow {
  std::size_t step = 0;
  double reward_online = kNaN;
  double iig_chosen = kNaN;
  double iig_rejected = kNaN;
  double loss = kNaN;
  double surrogate = kNaN;
  double kl = kNaN;
  double eval_acc = kNaN;
  std::size_t n_offline = 0;
  std::size_t n_online = 0;
};

struct TrainData {
  std::span<const PreferenceRecord> offline;
  std::span<const ClosedRecord> online;
  std::span<const ClosedRecord> eval;  // may be empty; eval_acc is then NaN
};

struct TrainHooks {
  std::function<void(const MetricsRow&)> on_row;
  std::string failure_dump;  // where a non-finite batch is serialized
};

namespace detail {

inline constexpr std::uint64_t kBatchStream = 0x6261746368ULL;
inline constexpr std::uint64_t kRolloutStream = 0x726f6c6cULL;

// Log-probs of each response, evaluating each distinct response once.
inline std::vector<std::vector<double>> dedup_logps(const Policy& policy, const Prompt& prompt,
                                                    std::span<const Response> responses) {
  std::map<Tokens, std::vector<double>> cache;
  std::vector<std::vector<double>> out;
  out.reserve(responses.size());
  for (const auto& r : responses) {
    auto it = cache.find(r.tokens);
    if (it == cache.end()) it = cache.emplace(r.tokens, log_prob(policy, prompt, r).per_token).first;
    out.push_back(it->second);
  }
  return out;
}

inline nlohmann::json batch_to_json(std::span<const RolloutGroup> batch, const Vocab& vocab) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& g : batch) {
    nlohmann::json resp = nlohmann::json::array();
    for (const auto& r : g.responses) resp.push_back(vocab.detokenize(r.tokens));
    out.push_back({{"source", g.source == Source::kOffline ? "offline" : "online"},
                   {"question", vocab.detokenize(g.prompt.question)},
                   {"image", image_to_json(g.prompt.image)},
                   {"responses", resp},
                   {"rewards", g.rewards},
                   {"advantages", g.advantages},
                   {"old_logps", g.old_logps},
                   {"ref_logps", g.ref_logps}});
  }
  return out;
}

}  // namespace detail

// Runs config.steps iterations of the hybrid objective on `policy`, which is
// updated in place. The policy passed in is the fixed reference.
inline std::vector<MetricsRow> mbpo_train(Policy& policy, const Vocab& vocab, const TrainData& data,
                                          const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  const double w_off = cfg.offline_weight.value_or(static_cast<double>(data.offline.size()));
  const double w_on = cfg.online_weight.value_or(static_cast<double>(data.online.size()));
  if (w_off + w_on <= 0.0) throw ConfigError("mbpo_train: both sources have zero weight");
  if (w_off > 0.0 && data.offline.empty()) throw TrainingError("mbpo_train: offline weight > 0 but no offline records");
  if (w_on > 0.0 && data.online.empty()) throw TrainingError("mbpo_train: online weight > 0 but no online records");

  const Policy ref = policy;
  const std::uint64_t ref_print = fingerprint(ref);
  const std::size_t max_len = policy.config().max_response_len;
  Optimizer opt({UpdateRule::kAdam, cfg.lr});
  LossConfig loss_cfg{cfg.beta, cfg.eps_clip, cfg.threads};
  std::vector<MetricsRow> rows;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    // The pre-update parameters are the iteration snapshot pi_old.
    const Policy old = policy;
    Rng rng(derive_seed(cfg.seed, {detail::kBatchStream, step}));
    struct Draw {
      Source source;
      std::size_t index;
    };
    std::vector<Draw> draws(cfg.batch_size);
    for (auto& d : draws) {
      d.source = rng.uniform() * (w_off + w_on) < w_off ? Source::kOffline : Source::kOnline;
      d.index = rng.below(d.source == Source::kOffline ? data.offline.size() : data.online.size());
    }

    std::vector<RolloutGroup> batch(draws.size());
    std::vector<double> iig_w(draws.size(), kNaN), iig_l(draws.size(), kNaN);
    parallel_for(draws.size(), cfg.threads, [&](std::size_t b) {
      RolloutGroup& g = batch[b];
      g.source = draws[b].source;
      if (g.source == Source::kOffline) {
        const PreferenceRecord& p = data.offline[draws[b].index];
        g.prompt = make_prompt(vocab, p.source.question, p.source.image);
        g.responses = {make_response(vocab, p.source.chosen, max_len), make_response(vocab, p.rejected, max_len)};
        g.rewards = {PreferenceRecord::kChosenReward, PreferenceRecord::kRejectedReward};
        iig_w[b] = iig(old, g.prompt, g.responses[0]);
        iig_l[b] = iig(old, g.prompt, g.responses[1]);
      } else {
        const ClosedRecord& r = data.online[draws[b].index];
        g.prompt = make_prompt(vocab, prompt_text(r), r.image);
        std::vector<std::uint64_t> seeds(cfg.group_size);
        for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = derive_seed(cfg.seed, {detail::kRolloutStream, step, b, i});
        g.responses = sample_group(old, g.prompt, cfg.temperature, seeds);
        for (const auto& resp : g.responses) g.rewards.push_back(reward(vocab.detokenize(resp.tokens), r).reward);
      }
      g.advantages = group_advantages(g.rewards);
      g.old_logps = detail::dedup_logps(old, g.prompt, g.responses);
      g.ref_logps = detail::dedup_logps(ref, g.prompt, g.responses);
    });

    LossBreakdown lb = mbpo_loss(batch, policy, loss_cfg);
    if (lb.n_offline + lb.n_online != cfg.batch_size) throw TrainingError("mbpo_train: batch accounting mismatch");
    bool finite = std::isfinite(lb.total);
    for (const auto& gr : lb.grads) {
      for (double v : gr.data()) finite = finite && std::isfinite(v);
    }
    if (!finite) {
      std::string where;
      if (!hooks.failure_dump.empty()) {
        std::ofstream f(hooks.failure_dump);
        f << detail::batch_to_json(batch, vocab).dump() << "\n";
        where = "; batch written to " + hooks.failure_dump;
      }
      throw TrainingError("mbpo_train: non-finite loss at step " + std::to_string(step) + where);
    }
    opt.step(policy.parameters(), lb.grads);

    MetricsRow row;
    row.step = step;
    row.loss = lb.total;
    row.surrogate = lb.surrogate;
    row.kl = lb.kl;
    row.n_offline = lb.n_offline;
    row.n_online = lb.n_online;
    double rsum = 0.0, wsum = 0.0, lsum = 0.0;
    std::size_t rcount = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (batch[b].source == Source::kOnline) {
        for (double r : batch[b].rewards) rsum += r;
        rcount += batch[b].size();
      } else {
        wsum += iig_w[b];
        lsum += iig_l[b];
      }
    }
    if (rcount) row.reward_online = rsum / static_cast<double>(rcount);
    if (lb.n_offline) {
      row.iig_chosen = wsum / static_cast<double>(lb.n_offline);
      row.iig_rejected = lsum / static_cast<double>(lb.n_offline);
    }
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0) {
      if (fingerprint(ref) != ref_print) throw TrainingError("mbpo_train: reference policy was modified");
      if (!data.eval.empty()) row.eval_acc = evaluate(policy, vocab, data.eval, {}, cfg.threads).accuracy;
    }
    if (hooks.on_row) hooks.on_row(row);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Metrics output.

inline const char* kMetricsHeader = "step,reward_online,iig_chosen,iig_rejected,loss,surrogate,kl,eval_acc";

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string metrics_csv_row(const MetricsRow& r) {
  std::string s = std::to_string(r.step);
  for (double v : {r.reward_online, r.iig_chosen, r.iig_rejected, r.loss, r.surrogate, r.kl, r.eval_acc}) {
    s += ',';
    s += format_metric(v);
  }
  return s;
}

inline std::string metrics_csv(std::span<const MetricsRow> rows) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) s += metrics_csv_row(r) + "\n";
  return s;
}

inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw Error("metrics csv: unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) throw Error("metrics csv: expected 8 columns in '" + line + "'");
    auto num = [](const std::string& c) { return c == "nan" ? kNaN : std::stod(c); };
    MetricsRow r;
    r.step = std::stoull(cells[0]);
    r.reward_online = num(cells[1]);
    r.iig_chosen = num(cells[2]);
    r.iig_rejected = num(cells[3]);
    r.loss = num(cells[4]);
    r.surrogate = num(cells[5]);
    r.kl = num(cells[6]);
    r.eval_acc = num(cells[7]);
    rows.push_back(r);
  }
  return rows;
}

inline constexpr std::size_t kSmoothingWindow = 20;

// Trailing moving average; NaN entries are skipped, and a window without any
// finite value stays NaN.
inline std::vector<double> smooth(std::span<const double> values, std::size_t window = kSmoothingWindow) {
  std::vector<double> out(values.size(), kNaN);
  for (std::size_t i = 0; i < values.size(); ++i) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t j = i + 1 > window ? i + 1 - window : 0; j <= i; ++j) {
      if (std::isnan(values[j])) continue;
      s += values[j];
      ++n;
    }
    if (n) out[i] = s / static_cast<double>(n);
  }
  return out;
}

inline std::vector<double> column(std::span<const MetricsRow> rows, double MetricsRow::*field) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.*field);
  return out;
}

struct Series {
  std::string label;
  std::vector<double> values;
  std::string color;
};

// Line chart over step index; NaN points break the line.
inline std::string line_chart_svg(const std::string& title, std::span<const Series> series) {
  const double w = 640, h = 360, left = 60, right = 20, top = 30, bottom = 40;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  auto x = [&](std::size_t i) { return left + (w - left - right) * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.5); };
  auto y = [&](double v) { return top + (h - top - bottom) * (hi - v) / (hi - lo); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
    << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << left - 5 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
    << format_metric(hi) << "</text>\n";
  o << "<text x=\"" << left - 5 << "\" y=\"" << h - bottom << "\" text-anchor=\"end\" font-size=\"10\">"
    << format_metric(lo) << "</text>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\" font-size=\"11\">step</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    std::string pts;
    auto flush = [&] {
      if (!pts.empty()) o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" points=\"" << pts << "\"/>\n";
      pts.clear();
    };
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      if (!std::isfinite(s.values[i])) {
        flush();
        continue;
      }
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", x(i), y(s.values[i]));
      pts += buf;
    }
    flush();
    o << "<text x=\"" << w - right - 5 << "\" y=\"" << top + 14 * (k + 1) << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
      << s.color << "\">" << s.label << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace mbpo
