#pragma once

#include <string>
#include <vector>

#include "vallex/nn/layers.hpp"

namespace vallex::nn {

struct AdamConfig {
  double max_lr = 5e-4;
  int warmup_steps = 8000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

/// Linear warm-up to max_lr, then inverse square-root decay (step counts from 1).
double inverse_sqrt_lr(long step, double max_lr, int warmup_steps);

template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig config);

  /// Applies one update from the accumulated gradients, clears them, and
  /// returns the learning rate used.
  double step();
  long steps_taken() const { return step_; }
  void set_steps_taken(long s) { step_ = s; }
  const AdamConfig& config() const { return config_; }
  double last_grad_norm() const { return last_norm_; }

 private:
  ParamList<T> params_;
  AdamConfig config_;
  std::vector<Mat<T>> m_, v_;
  long step_ = 0;
  double last_norm_ = 0.0;
};

}  // namespace vallex::nn
