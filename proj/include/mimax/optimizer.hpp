#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mimax/errors.hpp"
#include "mimax/tensor.hpp"

namespace mimax {

enum class LrSchedule { kConstant, kCosine };

/// Plain SGD with L2 weight decay:
///   p <- p - lr * (grad + weight_decay * p)
struct SgdOptimizer {
  double base_lr = 0.5;
  double weight_decay = 0.0;
  LrSchedule schedule = LrSchedule::kCosine;
  std::size_t total_epochs = 100;

  /// Learning rate for 0-based `epoch`. The cosine schedule is
  /// lr0 * (1 + cos(pi * epoch / total)) / 2, which stays positive for
  /// every epoch < total.
  double lr_at(std::size_t epoch) const {
    if (schedule == LrSchedule::kConstant || total_epochs == 0) return base_lr;
    const double t = static_cast<double>(epoch) /
                     static_cast<double>(total_epochs);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads,
            double lr) const {
    if (params.size() != grads.size()) {
      throw DimensionError("optimizer: parameter and gradient counts differ");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->mutable_data();
      auto g = grads[i].data();
      if (p.size() != g.size()) {
        throw DimensionError("optimizer: gradient shape mismatch");
      }
      for (std::size_t k = 0; k < p.size(); ++k) {
        p[k] -= lr * (g[k] + weight_decay * p[k]);
      }
    }
  }
};

}  // namespace mimax
