// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mbpo/tensor.hpp"

namespace mbpo {

enum class UpdateRule { kSgd, kAdam };

struct OptimizerConfig {
  UpdateRule rule = UpdateRule::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

// First-order optimizer over a fixed, ordered parameter list. Adam moments
// are keyed by position in that list and persist across step() calls.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  std::size_t steps_taken() const { return t_; }

  void step(std::vector<Tensor>& params, std::span<const Tensor> grads) {
    if (params.size() != grads.size()) {
      throw ShapeError("optimizer_step: " + std::to_string(params.size()) + " params but " +
                       std::to_string(grads.size()) + " gradients");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].shape() != grads[i].shape()) {
        shape_error("optimizer_step", params[i].shape(), grads[i].shape(), "param " + std::to_string(i));
      }
      for (double g : grads[i].data()) {
        if (!std::isfinite(g)) {
          throw NonFiniteGradient("optimizer_step: non-finite gradient in param " + std::to_string(i) +
                                  ", step skipped");
        }
      }
    }
    if (config_.rule == UpdateRule::kAdam && m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    if (config_.rule == UpdateRule::kAdam && m_.size() != params.size()) {
      throw ShapeError("optimizer_step: parameter list changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::vector<double> next(params[i].values());
      const auto g = grads[i].data();
      if (config_.rule == UpdateRule::kSgd) {
        for (std::size_t j = 0; j < next.size(); ++j) next[j] -= config_.lr * g[j];
      } else {
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < next.size(); ++j) {
          m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
          v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
          next[j] -= config_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
        }
      }
      params[i] = Tensor(params[i].shape(), std::move(next));
    }
  }

 private:
  OptimizerConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace mbpo
