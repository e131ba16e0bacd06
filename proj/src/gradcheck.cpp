#include "rcu/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace rcu {

ParamRef param_ref(Mat& values, const Mat& grads, std::string name) {
  if (values.rows() != grads.rows() || values.cols() != grads.cols()) {
    throw std::invalid_argument("param_ref: value/grad shape mismatch for " +
                                name);
  }
  return ParamRef{values.data(), grads.data(),
                  static_cast<std::size_t>(values.size()), std::move(name)};
}

ParamRef param_ref(Vec& values, const Vec& grads, std::string name) {
  if (values.size() != grads.size()) {
    throw std::invalid_argument("param_ref: value/grad shape mismatch for " +
                                name);
  }
  return ParamRef{values.data(), grads.data(),
                  static_cast<std::size_t>(values.size()), std::move(name)};
}

GradCheckResult grad_check(const std::function<double()>& loss,
                           std::vector<ParamRef> params, Rng& rng, double step,
                           std::size_t min_coords, double floor) {
  std::size_t total = 0;
  for (const auto& p : params) {
    if (p.values == nullptr || p.grads == nullptr) {
      throw std::invalid_argument("grad_check: null parameter block " + p.name);
    }
    total += p.size;
  }
  if (total == 0) {
    throw std::invalid_argument("grad_check: no coordinates to check");
  }

  // Enumerate all coordinates, then sample without replacement.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  coords.reserve(total);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi].size; ++i) {
      coords.emplace_back(pi, i);
    }
  }
  rng.shuffle(coords);
  const std::size_t n_check = std::min(total, min_coords);

  GradCheckResult res;
  res.coords_checked = n_check;
  for (std::size_t c = 0; c < n_check; ++c) {
    const auto [pi, i] = coords[c];
    double* slot = params[pi].values + i;
    const double saved = *slot;

    *slot = saved + step;
    const double f_plus = loss();
    *slot = saved - step;
    const double f_minus = loss();
    *slot = saved;

    if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
      throw std::runtime_error("grad_check: loss returned non-finite value");
    }

    const double fd = (f_plus - f_minus) / (2.0 * step);
    const double g = params[pi].grads[i];
    const double denom = std::max({std::abs(fd), std::abs(g), floor});
    const double rel = std::abs(fd - g) / denom;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_coord = params[pi].name + "[" + std::to_string(i) + "]";
    }
  }
  return res;
}

}  // namespace rcu
