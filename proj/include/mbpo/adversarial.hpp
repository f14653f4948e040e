// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Hard-negative mining: a projected signed-gradient attack pushes the image
// away from the chosen response, then the rejected response is sampled from
// the policy looking at the attacked image.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbpo/model.hpp"
#include "mbpo/parallel.hpp"
#include "mbpo/rng.hpp"
#include "mbpo/synth.hpp"

namespace mbpo {

class AttackError : public Error {
 public:
  using Error::Error;
};

struct AttackConfig {
  std::size_t iterations = 20;
  double step = 4.0 / 255.0;
  double ball = 16.0 / 255.0;
  double pixel_min = 0.0;
  double pixel_max = 1.0;

  void validate() const {
    if (!(step > 0.0)) throw ConfigError("AttackConfig: step must be > 0");
    if (!(ball > 0.0)) throw ConfigError("AttackConfig: ball radius must be > 0");
    if (!(pixel_min < pixel_max)) throw ConfigError("AttackConfig: empty pixel range");
  }

  // Iteration / step-size pairs (step in 1/255 units) from the attack sweep.
  static AttackConfig preset(std::size_t iterations, double step_255) {
    AttackConfig c;
    c.iterations = iterations;
    c.step = step_255 / 255.0;
    return c;
  }
  static std::vector<AttackConfig> sweep() {
    return {preset(5, 4), preset(10, 4), preset(20, 2), preset(20, 4), preset(20, 8)};
  }
};

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// One attack step from `current`: ascend -log p along sign(grad), project
// onto the l-inf ball around `origin`, clip to the pixel range.
inline Image pgd_step(const Image& origin, const Image& current, const Image& grad, const AttackConfig& cfg) {
  std::vector<double> next(current.size());
  for (std::size_t i = 0; i < next.size(); ++i) {
    if (!std::isfinite(grad[i])) throw AttackError("pgd_attack: non-finite image gradient at pixel " + std::to_string(i));
    double v = current[i] + cfg.step * sign(grad[i]);
    v = std::clamp(v, origin[i] - cfg.ball, origin[i] + cfg.ball);
    next[i] = std::clamp(v, cfg.pixel_min, cfg.pixel_max);
  }
  return Tensor(current.shape(), std::move(next));
}

// Iterates I^(0) .. I^(T) of the attack; I^(0) is the clean image.
inline std::vector<Image> pgd_trajectory(const Policy& policy, const Prompt& prompt, const Response& chosen,
                                         const AttackConfig& cfg) {
  cfg.validate();
  std::vector<Image> path{prompt.image};
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    const Image grad = image_gradient(policy, Prompt{prompt.question, path.back()}, chosen);
    path.push_back(pgd_step(prompt.image, path.back(), grad, cfg));
  }
  return path;
}

inline Image pgd_attack(const Policy& policy, const Prompt& prompt, const Response& chosen, const AttackConfig& cfg) {
  return pgd_trajectory(policy, prompt, chosen, cfg).back();
}

inline double linf_distance(const Image& a, const Image& b) {
  if (a.shape() != b.shape()) shape_error("linf_distance", a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool within_budget(const Image& clean, const Image& adv, const AttackConfig& cfg) {
  if (linf_distance(clean, adv) > cfg.ball + 1e-12) return false;
  for (double v : adv.data()) {
    if (v < cfg.pixel_min || v > cfg.pixel_max) return false;
  }
  return true;
}

inline Response mine_rejected(const Policy& policy, const Prompt& adversarial_prompt, double temperature,
                              std::uint64_t seed) {
  return sample(policy, adversarial_prompt, temperature, seed);
}

// Rounds an image to the precision records are stored with. Pixels that the
// rounding pushes out of the budget around `clean` move one digit back toward
// it, so a stored adversarial image satisfies the same budget as the attack.
inline Image storable_image(const Image& clean, const Image& adv, const AttackConfig& cfg) {
  std::vector<double> px(adv.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    auto inside = [&](double v) {
      return std::abs(v - clean[i]) <= cfg.ball && v >= cfg.pixel_min && v <= cfg.pixel_max;
    };
    double q = round6(adv[i]);
    for (int guard = 0; !inside(q) && guard < 4; ++guard) {
      const double digit = std::pow(10.0, std::floor(std::log10(std::abs(q))) - 5.0);
      q = round6(q - sign(q - clean[i]) * digit);
    }
    if (!inside(q)) throw AttackError("storable_image: cannot round pixel " + std::to_string(i) + " inside the budget");
    px[i] = q;
  }
  return Tensor(adv.shape(), std::move(px));
}

// Unit-Gaussian pixel noise clipped to the pixel range; the random-noise
// mining baseline.
inline Image noise_image(const Image& clean, std::uint64_t seed, double pixel_min = 0.0, double pixel_max = 1.0) {
  Rng rng(seed);
  std::vector<double> px(clean.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(clean[i] + rng.normal(), pixel_min, pixel_max);
  return Tensor(clean.shape(), std::move(px));
}

struct PreferenceRecord {
  InstructRecord source;  // question, clean image, chosen text
  std::string rejected;
  Image adv_image;

  static constexpr double kChosenReward = 2.0;
  static constexpr double kRejectedReward = 0.0;
};

struct MiningOptions {
  AttackConfig attack;
  double temperature = 1.0;
  std::size_t max_resamples = 4;
  bool random_noise = false;
  std::size_t threads = 1;
};

struct MiningSkip {
  std::uint64_t id;
  std::string reason;
};

struct MiningResult {
  std::vector<PreferenceRecord> records;
  std::vector<MiningSkip> skipped;
};

namespace detail {
inline constexpr std::uint64_t kAttackStream = 0x61747461636bULL;
inline constexpr std::uint64_t kSampleStream = 0x73616d706c65ULL;
}  // namespace detail

// One preference pair per input record. Failures are collected in `skipped`
// and never abort the batch; output keeps input order.
inline MiningResult build_offline(std::span<const InstructRecord> records, const Policy& policy, const Vocab& vocab,
                                  const MiningOptions& opts, std::uint64_t seed,
                                  const std::function<void(const MiningSkip&)>& log = {}) {
  opts.attack.validate();
  std::vector<std::optional<PreferenceRecord>> slots(records.size());
  std::vector<std::string> errors(records.size());
  parallel_for(records.size(), opts.threads, [&](std::size_t i) {
    const InstructRecord& r = records[i];
    try {
      const Prompt prompt = make_prompt(vocab, r.question, r.image);
      const Response chosen = make_response(vocab, r.chosen);
      const Image adv =
          opts.random_noise
              ? image_from_json(image_to_json(noise_image(r.image, derive_seed(seed, {detail::kAttackStream, r.id}),
                                                          opts.attack.pixel_min, opts.attack.pixel_max)))
              : storable_image(r.image, pgd_attack(policy, prompt, chosen, opts.attack), opts.attack);
      const Prompt adv_prompt{prompt.question, adv};
      const std::uint64_t base = derive_seed(seed, {detail::kSampleStream, r.id});
      for (std::size_t attempt = 0; attempt <= opts.max_resamples; ++attempt) {
        Response rejected = mine_rejected(policy, adv_prompt, opts.temperature, base + attempt);
        if (rejected.tokens != chosen.tokens) {
          slots[i] = PreferenceRecord{r, vocab.detokenize(rejected.tokens), adv};
          return;
        }
      }
      errors[i] = "rejected response equals chosen after " + std::to_string(opts.max_resamples) + " resamples";
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  MiningResult out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (slots[i]) {
      out.records.push_back(std::move(*slots[i]));
    } else {
      out.skipped.push_back({records[i].id, errors[i]});
      if (log) log(out.skipped.back());
    }
  }
  return out;
}

inline nlohmann::json to_json(const PreferenceRecord& p) {
  nlohmann::json j = to_json(p.source);
  j["rejected"] = p.rejected;
  j["adv_image"] = image_to_json(p.adv_image);
  return j;
}

inline PreferenceRecord preference_from_json(const nlohmann::json& j) {
  PreferenceRecord p;
  p.source = instruct_from_json(j);
  p.rejected = j.at("rejected").get<std::string>();
  p.adv_image = image_from_json(j.at("adv_image"));
  return p;
}

inline std::vector<PreferenceRecord> read_preferences(const std::string& path) {
  std::vector<PreferenceRecord> out;
  for (const auto& j : read_jsonl(path)) out.push_back(preference_from_json(j));
  return out;
}

}  // namespace mbpo
