// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Image information gain: how much more likely a response becomes when the
// model sees the real image instead of an all-zero blank one,
//
//   IIG(o, q, I) = log p(o | q, I) - log p(o | q, blank).

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "mbpo/model.hpp"
#include "mbpo/parallel.hpp"
#include "mbpo/synth.hpp"

namespace mbpo {

struct IIGScore {
  std::uint64_t id = 0;
  double value = 0.0;  // nats
};

inline Image blank_image(const ModelConfig& config) { return Tensor::zeros(config.image_shape()); }

inline double iig(const Policy& policy, const Prompt& prompt, const Response& response) {
  const double with_image = log_prob(policy, prompt, response).total;
  const double with_blank = log_prob(policy, Prompt{prompt.question, blank_image(policy.config())}, response).total;
  return with_image - with_blank;
}

inline IIGScore score_record(const Policy& policy, const Vocab& vocab, const InstructRecord& r) {
  return {r.id, iig(policy, make_prompt(vocab, r.question, r.image), make_response(vocab, r.chosen))};
}

inline std::vector<IIGScore> score_records(const Policy& policy, const Vocab& vocab,
                                           std::span<const InstructRecord> records, std::size_t threads = 1) {
  std::vector<IIGScore> out(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) { out[i] = score_record(policy, vocab, records[i]); });
  return out;
}

// Positions of the k highest scores; ties go to the smaller id.
inline std::vector<std::size_t> top_k_indices(std::span<const IIGScore> scores, std::size_t k) {
  if (k > scores.size()) throw Error("select_top_k: k exceeds record count");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a].value != scores[b].value) return scores[a].value > scores[b].value;
    return scores[a].id < scores[b].id;
  });
  order.resize(k);
  return order;
}

struct Selection {
  std::vector<InstructRecord> selected;
  std::vector<IIGScore> scores;  // one per input record, input order
};

inline Selection select_top_k(std::span<const InstructRecord> records, const Policy& policy, const Vocab& vocab,
                              std::size_t k, std::size_t threads = 1) {
  if (k > records.size()) throw Error("select_top_k: k exceeds record count");
  Selection sel;
  sel.scores = score_records(policy, vocab, records, threads);
  for (std::size_t i : top_k_indices(sel.scores, k)) sel.selected.push_back(records[i]);
  return sel;
}

}  // namespace mbpo
