#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "mtl/tensor.hpp"

namespace mtl {

// One evaluation of a differentiable loss at a parameter point.
struct LossProbe {
  double value = 0.0;
  // Analytic gradients aligned with the parameter list; filled only when the
  // builder is asked for them.
  std::vector<Tensor> grads;
};

// Rebuilds the loss (typically a fresh tape) from explicit parameter values.
// Must be deterministic in `params`: gradcheck calls it many times with
// single entries perturbed.
using LossBuilder = std::function<LossProbe(const std::vector<Tensor>& params, bool want_grads)>;

// Central-difference check of the builder's analytic gradients. For each
// parameter entry compares against (L(θ+h)−L(θ−h))/(2h) with relative error
// |a−n| / max(|a|,|n|,1e-8) and returns the maximum over all entries.
// `max_entries_per_param` > 0 limits the check to that many evenly spaced
// entries per tensor (full check otherwise).
double finite_diff_gradcheck(const LossBuilder& loss, std::vector<Tensor> params, double h,
                             std::size_t max_entries_per_param = 0);

}  // namespace mtl
