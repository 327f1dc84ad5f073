#include "pemp/optim.hpp"

#include <cmath>
#include <limits>

namespace pemp {

double global_norm(const std::vector<std::vector<double>*>& grads) {
  double s = 0.0;
  for (const auto* g : grads)
    for (double v : *g) s += v * v;
  return std::sqrt(s);
}

double clip_global_norm(const std::vector<std::vector<double>*>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto* g : grads)
      for (double& v : *g) v *= factor;
  }
  return norm;
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, SgdConfig config)
    : params_(std::move(params)), config_(config) {
  for (auto& p : params_) {
    if (!p.requires_grad() || !p.is_leaf()) throw GraphError("optimizer parameters must be trainable leaves");
    velocity_.emplace_back(p.numel(), 0.0);
  }
}

StepResult SgdOptimizer::step() {
  StepResult result;
  std::vector<std::vector<double>*> grads;
  for (auto& p : params_) grads.push_back(&p.node()->grad);
  for (const auto* g : grads) {
    for (double v : *g) {
      if (!std::isfinite(v)) {
        result.grad_norm_preclip = std::numeric_limits<double>::quiet_NaN();
        return result;
      }
    }
  }
  result.grad_norm_preclip = clip_global_norm(grads, config_.clip_norm);
  result.grad_norm_postclip = global_norm(grads);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    const auto& g = *grads[i];
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = config_.momentum * v[j] + g[j] + config_.weight_decay * w[j];
      w[j] -= config_.lr * v[j];
    }
  }
  ++steps_;
  result.applied = true;
  return result;
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace pemp
