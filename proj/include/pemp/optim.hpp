#pragma once

#include <cstdint>
#include <vector>

#include "pemp/tensor.hpp"

namespace pemp {

struct SgdConfig {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double clip_norm = 1.1;  // <= 0 disables clipping
};

struct StepResult {
  double grad_norm_preclip = 0.0;
  double grad_norm_postclip = 0.0;
  bool applied = false;  // false when a gradient was non-finite
};

/// Global L2 norm over all buffers.
double global_norm(const std::vector<std::vector<double>*>& grads);

/// Rescales every buffer by max_norm/g when the global norm g exceeds
/// max_norm. Returns g (pre-clip).
double clip_global_norm(const std::vector<std::vector<double>*>& grads, double max_norm);

/// SGD with momentum, L2 weight decay and global-norm gradient clipping:
///   v <- mu*v + g + wd*param;  param <- param - lr*v
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, SgdConfig config);

  /// Applies one update from the parameters' accumulated gradients.
  StepResult step();
  void zero_grad();

  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& momentum_buffers() const { return velocity_; }
  std::uint64_t steps() const { return steps_; }
  const SgdConfig& config() const { return config_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  SgdConfig config_;
  std::uint64_t steps_ = 0;
};

}  // namespace pemp
