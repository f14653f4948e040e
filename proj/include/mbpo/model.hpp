// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Tiny image-conditioned autoregressive policy.
//
// The image is cut into non-overlapping patches, each patch is projected to
// d_model and the projected patches form a prefix in front of the question
// tokens. A pre-LayerNorm causal transformer runs over
//
//   [patch_0 .. patch_{P-1}, question_0 .. question_{Q-1}, response_0 .. response_{R-2}]
//
// and the output head at position P+Q-1+t predicts response token t.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbpo/checkpoint.hpp"
#include "mbpo/rng.hpp"
#include "mbpo/tensor.hpp"
#include "mbpo/vocab.hpp"

namespace mbpo {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ModelConfig {
  std::size_t image_h = 24;
  std::size_t image_w = 24;
  std::size_t channels = 3;
  std::size_t patch = 6;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t vocab_size = Vocab::standard().size();
  std::size_t max_question_len = 20;
  std::size_t max_response_len = 24;
  TokenId eos_id = Vocab::standard().eos();

  std::size_t num_patches() const { return (image_h / patch) * (image_w / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t max_positions() const { return num_patches() + max_question_len + max_response_len; }
  Shape image_shape() const { return {image_h, image_w, channels}; }

  void validate() const {
    if (patch == 0 || image_h % patch != 0 || image_w % patch != 0) {
      throw ConfigError("ModelConfig: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " is not divisible by patch " + std::to_string(patch));
    }
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("ModelConfig: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (vocab_size == 0 || eos_id >= vocab_size) throw ConfigError("ModelConfig: eos_id outside vocabulary");
    if (channels == 0 || n_layers == 0 || max_response_len == 0) throw ConfigError("ModelConfig: zero-sized field");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"image_h", c.image_h},     {"image_w", c.image_w},
       {"channels", c.channels},   {"patch", c.patch},
       {"d_model", c.d_model},     {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},     {"vocab_size", c.vocab_size},
       {"max_question_len", c.max_question_len}, {"max_response_len", c.max_response_len},
       {"eos_id", c.eos_id}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.image_h = j.value("image_h", d.image_h);
  c.image_w = j.value("image_w", d.image_w);
  c.channels = j.value("channels", d.channels);
  c.patch = j.value("patch", d.patch);
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_question_len = j.value("max_question_len", d.max_question_len);
  c.max_response_len = j.value("max_response_len", d.max_response_len);
  c.eos_id = j.value("eos_id", d.eos_id);
}

// H x W x C pixels, row-major.
using Image = Tensor;

struct Prompt {
  Tokens question;
  Image image;
};

struct Response {
  Tokens tokens;
  friend bool operator==(const Response&, const Response&) = default;
  friend auto operator<=>(const Response&, const Response&) = default;
};

struct LogProb {
  std::vector<double> per_token;
  double total = 0.0;
};

class Policy {
 public:
  Policy(ModelConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(seed, {0x706f6c6963ULL}));
    const std::size_t d = config_.d_model;
    auto normal = [&](Shape s, double stddev) {
      std::vector<double> v(numel(s));
      for (auto& x : v) x = stddev * rng.normal();
      return Tensor(std::move(s), std::move(v));
    };
    const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
    add("patch_proj.w", normal({config_.patch_dim(), d}, 1.0 / std::sqrt(static_cast<double>(config_.patch_dim()))));
    add("patch_proj.b", Tensor::zeros({d}));
    add("tok_emb", normal({config_.vocab_size, d}, 0.5));
    add("pos_emb", normal({config_.max_positions(), d}, 0.1));
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      add(p + "ln1.g", Tensor::full({d}, 1.0));
      add(p + "ln1.b", Tensor::zeros({d}));
      add(p + "attn.wqkv", normal({d, 3 * d}, w_std));
      add(p + "attn.bqkv", Tensor::zeros({3 * d}));
      add(p + "attn.wo", normal({d, d}, w_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers))));
      add(p + "attn.bo", Tensor::zeros({d}));
      add(p + "ln2.g", Tensor::full({d}, 1.0));
      add(p + "ln2.b", Tensor::zeros({d}));
      add(p + "mlp.w1", normal({d, 4 * d}, w_std));
      add(p + "mlp.b1", Tensor::zeros({4 * d}));
      add(p + "mlp.w2", normal({4 * d, d}, 0.5 * w_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers))));
      add(p + "mlp.b2", Tensor::zeros({d}));
    }
    add("ln_f.g", Tensor::full({d}, 1.0));
    add("ln_f.b", Tensor::zeros({d}));
    add("head.w", normal({d, config_.vocab_size}, w_std));
    add("head.b", Tensor::zeros({config_.vocab_size}));
  }

  const ModelConfig& config() const { return config_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return i;
    }
    throw ConfigError("policy has no parameter '" + name + "'");
  }

  // Rebuilds a policy from named tensors; every parameter must be present
  // with the expected shape.
  static Policy from_tensors(const ModelConfig& config, const std::vector<NamedTensor>& tensors) {
    Policy p(config, 0);
    if (tensors.size() != p.params_.size()) {
      throw CheckpointError("checkpoint has " + std::to_string(tensors.size()) + " tensors, model expects " +
                            std::to_string(p.params_.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].name != p.names_[i] || tensors[i].value.shape() != p.params_[i].shape()) {
        throw CheckpointError("checkpoint tensor '" + tensors[i].name + "' " + to_string(tensors[i].value.shape()) +
                              " does not match model parameter '" + p.names_[i] + "' " +
                              to_string(p.params_[i].shape()));
      }
      p.params_[i] = tensors[i].value.detach();
    }
    return p;
  }

 private:
  void add(std::string name, Tensor value) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(value));
  }

  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
};

namespace detail {

inline std::vector<std::size_t> patch_index(const ModelConfig& c) {
  std::vector<std::size_t> idx;
  idx.reserve(c.num_patches() * c.patch_dim());
  const std::size_t grid_w = c.image_w / c.patch;
  for (std::size_t p = 0; p < c.num_patches(); ++p) {
    const std::size_t r0 = (p / grid_w) * c.patch, c0 = (p % grid_w) * c.patch;
    for (std::size_t i = 0; i < c.patch; ++i)
      for (std::size_t j = 0; j < c.patch; ++j)
        for (std::size_t ch = 0; ch < c.channels; ++ch) idx.push_back(((r0 + i) * c.image_w + (c0 + j)) * c.channels + ch);
  }
  return idx;
}

inline Tensor causal_mask(std::size_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = -1e30;
  return Tensor({t, t}, std::move(m));
}

inline void check_prompt(const ModelConfig& c, const Prompt& prompt) {
  if (prompt.image.shape() != c.image_shape()) {
    shape_error("policy", prompt.image.shape(), c.image_shape(), "image shape");
  }
  if (prompt.question.size() > c.max_question_len) {
    throw DomainError("policy: question has " + std::to_string(prompt.question.size()) + " tokens, limit " +
                      std::to_string(c.max_question_len));
  }
  for (TokenId t : prompt.question) {
    if (t >= c.vocab_size) throw DomainError("policy: question token id " + std::to_string(t) + " out of range");
  }
}

inline void check_response(const ModelConfig& c, const Response& r) {
  if (r.tokens.empty()) throw DomainError("policy: response must be non-empty");
  if (r.tokens.size() > c.max_response_len) {
    throw DomainError("policy: response has " + std::to_string(r.tokens.size()) + " tokens, limit " +
                      std::to_string(c.max_response_len));
  }
  for (TokenId t : r.tokens) {
    if (t >= c.vocab_size) throw DomainError("policy: response token id " + std::to_string(t) + " out of range");
  }
}

}  // namespace detail

// Logits [rows_end - rows_begin, V] for hidden positions [rows_begin,
// rows_end) of the sequence image-prefix + `tokens`. Differentiable with
// respect to any watched tensor among `params` and `image`.
inline Tensor forward_logits(std::span<const Tensor> params, const ModelConfig& c, const Image& image,
                             std::span<const TokenId> tokens, std::size_t rows_begin, std::size_t rows_end) {
  const std::size_t d = c.d_model, heads = c.n_heads, dh = d / heads;
  const std::size_t n_patch = c.num_patches();
  const std::size_t seq = n_patch + tokens.size();
  if (seq > c.max_positions()) throw DomainError("policy: sequence longer than position table");
  std::size_t k = 0;
  const Tensor& patch_w = params[k++];
  const Tensor& patch_b = params[k++];
  const Tensor& tok_emb = params[k++];
  const Tensor& pos_emb = params[k++];

  Tensor patches = gather(image, detail::patch_index(c), Shape{n_patch, c.patch_dim()});
  Tensor x = add(matmul(patches, patch_w), patch_b);
  if (!tokens.empty()) x = concat({x, embedding_gather(tok_emb, tokens)}, 0);
  x = add(x, slice(pos_emb, 0, 0, seq));

  const Tensor mask = detail::causal_mask(seq);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const Tensor& ln1_g = params[k++];
    const Tensor& ln1_b = params[k++];
    const Tensor& wqkv = params[k++];
    const Tensor& bqkv = params[k++];
    const Tensor& wo = params[k++];
    const Tensor& bo = params[k++];
    const Tensor& ln2_g = params[k++];
    const Tensor& ln2_b = params[k++];
    const Tensor& w1 = params[k++];
    const Tensor& b1 = params[k++];
    const Tensor& w2 = params[k++];
    const Tensor& b2 = params[k++];

    Tensor qkv = add(matmul(layer_norm(x, ln1_g, ln1_b), wqkv), bqkv);
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor q = slice(qkv, 1, h * dh, (h + 1) * dh);
      Tensor kk = slice(qkv, 1, d + h * dh, d + (h + 1) * dh);
      Tensor v = slice(qkv, 1, 2 * d + h * dh, 2 * d + (h + 1) * dh);
      Tensor scores = add(scale(matmul(q, transpose(kk)), inv_sqrt_dh), mask);
      head_out.push_back(matmul(softmax(scores), v));
    }
    Tensor attn = heads == 1 ? head_out.front() : concat(head_out, 1);
    x = add(x, add(matmul(attn, wo), bo));
    Tensor hidden = relu(add(matmul(layer_norm(x, ln2_g, ln2_b), w1), b1));
    x = add(x, add(matmul(hidden, w2), b2));
  }
  const Tensor& lnf_g = params[k++];
  const Tensor& lnf_b = params[k++];
  const Tensor& head_w = params[k++];
  const Tensor& head_b = params[k++];
  Tensor rows = slice(x, 0, rows_begin, rows_end);
  return add(matmul(layer_norm(rows, lnf_g, lnf_b), head_w), head_b);
}

// Per-token log p(response_t | image, question, response_<t) as a [T] tensor.
inline Tensor token_log_probs(std::span<const Tensor> params, const ModelConfig& c, const Prompt& prompt,
                              const Response& response) {
  detail::check_prompt(c, prompt);
  detail::check_response(c, response);
  Tokens seq = prompt.question;
  seq.insert(seq.end(), response.tokens.begin(), response.tokens.end() - 1);
  const std::size_t first = c.num_patches() + prompt.question.size() - 1;
  Tensor logits = forward_logits(params, c, prompt.image, seq, first, first + response.tokens.size());
  return pick(log_softmax(logits), response.tokens);
}

inline LogProb log_prob(const Policy& policy, const Prompt& prompt, const Response& response) {
  Tensor lp = token_log_probs(policy.parameters(), policy.config(), prompt, response);
  LogProb out{lp.values(), 0.0};
  for (double v : out.per_token) out.total += v;
  return out;
}

// Index drawn from softmax(logits / temperature); temperature 0 is argmax
// with the lowest index winning ties.
inline TokenId draw_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (temperature < 0.0) throw DomainError("sample: temperature must be >= 0");
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > logits[best]) best = j;
  }
  if (temperature == 0.0) return best;
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) z += (p[j] = std::exp((logits[j] - logits[best]) / temperature));
  const double u = rng.uniform() * z;
  double acc = 0.0;
  std::size_t last_positive = best;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] <= 0.0) continue;
    acc += p[j];
    last_positive = j;
    if (u < acc) return j;
  }
  return last_positive;
}

// Ancestral sampling of one response per seed. Identical in output to calling
// sample() once per seed; shared prefixes are evaluated once.
inline std::vector<Response> sample_group(const Policy& policy, const Prompt& prompt, double temperature,
                                          std::span<const std::uint64_t> seeds) {
  const ModelConfig& c = policy.config();
  detail::check_prompt(c, prompt);
  if (temperature < 0.0) throw DomainError("sample: temperature must be >= 0");
  std::vector<Rng> rngs;
  rngs.reserve(seeds.size());
  for (auto s : seeds) rngs.emplace_back(s);
  std::vector<Response> out(seeds.size());
  std::vector<bool> done(seeds.size(), false);
  for (std::size_t step = 0; step < c.max_response_len; ++step) {
    std::map<Tokens, std::vector<std::size_t>> frontier;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      if (!done[i]) frontier[out[i].tokens].push_back(i);
    }
    if (frontier.empty()) break;
    for (const auto& [prefix, members] : frontier) {
      Tokens seq = prompt.question;
      seq.insert(seq.end(), prefix.begin(), prefix.end());
      const std::size_t row = c.num_patches() + seq.size() - 1;
      Tensor logits = forward_logits(policy.parameters(), c, prompt.image, seq, row, row + 1);
      for (std::size_t i : members) {
        const TokenId t = draw_token(logits.data(), temperature, rngs[i]);
        out[i].tokens.push_back(t);
        if (t == c.eos_id) done[i] = true;
      }
    }
  }
  return out;
}

inline Response sample(const Policy& policy, const Prompt& prompt, double temperature, std::uint64_t seed) {
  const std::uint64_t seeds[] = {seed};
  return sample_group(policy, prompt, temperature, seeds).front();
}

// d(-log p(response | question, image)) / d(image), shaped like the image.
inline Image image_gradient(const Policy& policy, const Prompt& prompt, const Response& response) {
  GradientTape tape;
  Prompt watched{prompt.question, tape.watch(prompt.image)};
  Tensor nll = neg(sum(token_log_probs(policy.parameters(), policy.config(), watched, response)));
  Gradients g = tape.backward(nll);
  return g[watched.image];
}

// Read-only serialized copy of a policy.
class PolicySnapshot {
 public:
  explicit PolicySnapshot(std::string bytes) : bytes_(std::make_shared<const std::string>(std::move(bytes))) {}
  const std::string& bytes() const { return *bytes_; }

 private:
  std::shared_ptr<const std::string> bytes_;
};

inline Checkpoint to_checkpoint(const Policy& policy, nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(extra);
  ckpt.metadata["model_config"] = policy.config();
  for (std::size_t i = 0; i < policy.parameters().size(); ++i) {
    ckpt.tensors.push_back({policy.parameter_names()[i], policy.parameters()[i]});
  }
  return ckpt;
}

inline Policy from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("model_config")) throw CheckpointError("checkpoint: missing model_config");
  ModelConfig config;
  try {
    config = ckpt.metadata.at("model_config").get<ModelConfig>();
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad model_config: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  return Policy::from_tensors(config, ckpt.tensors);
}

inline PolicySnapshot snapshot(const Policy& policy) { return PolicySnapshot(encode_checkpoint(to_checkpoint(policy))); }

inline Policy restore(const PolicySnapshot& snap) { return from_checkpoint(decode_checkpoint(snap.bytes())); }

inline void save_policy(const std::string& path, const Policy& policy, nlohmann::json extra = nlohmann::json::object()) {
  save_checkpoint(path, to_checkpoint(policy, std::move(extra)));
}

inline Policy load_policy(const std::string& path) { return from_checkpoint(load_checkpoint(path)); }

// FNV-1a over the serialized parameters.
inline std::uint64_t fingerprint(const Policy& policy) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const PolicySnapshot snap = snapshot(policy);
  for (unsigned char ch : snap.bytes()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mbpo
