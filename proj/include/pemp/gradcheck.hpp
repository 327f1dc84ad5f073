#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pemp/tensor.hpp"

namespace pemp {

using GraphFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  std::string name;
  std::size_t parameters = 0;
  double rel_error = 0.0;
  bool passed = false;
};

/// Compares reverse-mode gradients of sum(f(inputs) * r), r a fixed random
/// projection, against central differences. Inputs are used as given; every
/// one of them is differentiated. Returns ||a - n|| / max(||a||, ||n||).
double gradcheck(const GraphFn& f, const std::vector<Tensor>& inputs, std::uint64_t seed = 0, double step = 1e-6);

/// Finite-difference checks over every differentiable primitive and the
/// end-to-end loss path.
std::vector<GradCheckResult> run_gradcheck_suite(double tolerance = 1e-4, std::uint64_t seed = 11);

}  // namespace pemp
