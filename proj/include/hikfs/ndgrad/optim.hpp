#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "hikfs/error.hpp"
#include "hikfs/ndgrad/tensor.hpp"

namespace hikfs::nd {

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double lr = 0.1;
  double momentum = 0.9;  // also Adam's beta1
  double weight_decay = 1e-4;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// SGD with momentum (v = m*v + g + wd*p; p -= lr*v) or Adam with L2 weight
/// decay folded into the gradient and bias-corrected moments.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<NamedTensor> params)
      : config_(config), params_(std::move(params)) {
    for (const auto& p : params_) {
      first_.emplace_back(p.tensor.numel(), 0.0);
      if (config_.kind == OptimizerKind::adam) second_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void set_lr(double lr) { config_.lr = lr; }
  double lr() const { return config_.lr; }
  std::size_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  const std::vector<double>& first_moment(std::size_t i) const { return first_.at(i); }

  /// Applies one update to every parameter and zeroes the gradients.
  void step() {
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) throw GraphError("optimizer: parameter '" + p.name + "' has no gradient");
    }
    ++steps_;
    const double b1 = config_.momentum, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor t = params_[i].tensor;
      auto w = t.mutable_data();
      auto g = t.grad();
      auto& m = first_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double grad = g[k] + config_.weight_decay * w[k];
        if (config_.kind == OptimizerKind::sgd_momentum) {
          m[k] = config_.momentum * m[k] + grad;
          w[k] -= config_.lr * m[k];
        } else {
          auto& v = second_[i];
          m[k] = b1 * m[k] + (1.0 - b1) * grad;
          v[k] = b2 * v[k] + (1.0 - b2) * grad * grad;
          w[k] -= config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
        }
      }
      t.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  OptimizerConfig config_;
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::size_t steps_ = 0;
};

enum class ScheduleKind { constant, cosine, halving };

/// Learning rate as a function of the optimizer step.
struct LrSchedule {
  ScheduleKind kind = ScheduleKind::constant;
  double base = 0.1;
  std::size_t total_steps = 1;   // cosine horizon
  std::size_t halve_every = 10000;

  double at(std::size_t step) const {
    switch (kind) {
      case ScheduleKind::constant:
        return base;
      case ScheduleKind::cosine: {
        if (step >= total_steps) return 0.0;
        const double t = static_cast<double>(step) / static_cast<double>(total_steps);
        return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
      }
      case ScheduleKind::halving:
        return base * std::pow(0.5, static_cast<double>(step / halve_every));
    }
    return base;
  }
};

}  // namespace hikfs::nd
