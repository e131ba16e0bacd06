#pragma once

// Central-finite-difference gradient verification. Every analytic gradient
// in this project is validated against this routine before it is trusted in
// a training loop.

#include "rcu/matrix.hpp"

#include <functional>
#include <string>
#include <vector>

namespace rcu {

// A view onto one parameter block: the mutable values the loss closure reads
// and the analytic gradient to check against.
struct ParamRef {
  double* values = nullptr;
  const double* grads = nullptr;
  std::size_t size = 0;
  std::string name;
};

ParamRef param_ref(Mat& values, const Mat& grads, std::string name);
ParamRef param_ref(Vec& values, const Vec& grads, std::string name);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_coord;  // "name[i]" of the worst coordinate
};

// Compares the analytic gradient of `loss` against central finite
// differences on a random subset of coordinates (all coordinates when the
// total count is below `min_coords`). Relative error per coordinate is
//   |fd - g| / max(|fd|, |g|, floor).
// Parameter values are restored exactly after probing. The loss closure must
// be deterministic.
GradCheckResult grad_check(const std::function<double()>& loss,
                           std::vector<ParamRef> params, Rng& rng,
                           double step = 1e-6, std::size_t min_coords = 200,
                           double floor = 1e-4);

}  // namespace rcu
