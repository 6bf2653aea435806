#include "mtl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mtl/errors.hpp"

namespace mtl {

double finite_diff_gradcheck(const LossBuilder& loss, std::vector<Tensor> params, double h,
                             std::size_t max_entries_per_param) {
  if (!(h > 0.0)) throw ConfigError("gradcheck step must be positive, got " + std::to_string(h));
  const LossProbe base = loss(params, true);
  if (base.grads.size() != params.size()) {
    throw DimensionError("loss builder returned " + std::to_string(base.grads.size()) +
                         " gradients for " + std::to_string(params.size()) + " parameters");
  }
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!base.grads[p].same_shape(params[p])) {
      throw DimensionError("gradient " + std::to_string(p) + " has shape " +
                           shape_str(base.grads[p].shape()) + ", parameter has " +
                           shape_str(params[p].shape()));
    }
    const std::size_t n = params[p].size();
    const std::size_t picks =
        max_entries_per_param > 0 ? std::min(max_entries_per_param, n) : n;
    for (std::size_t k = 0; k < picks; ++k) {
      const std::size_t i = picks == n ? k : k * n / picks;
      const double saved = params[p][i];
      params[p][i] = saved + h;
      const double up = loss(params, false).value;
      params[p][i] = saved - h;
      const double down = loss(params, false).value;
      params[p][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = base.grads[p][i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mtl
