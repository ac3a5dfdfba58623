#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "caac/tensor.hpp"

namespace caac {

struct GradCheckResult {
  double max_relative_error = 0.0;
  double analytic = 0.0;  // values at the worst coordinate
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps
/// near-zero gradients from turning round-off into large ratios.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares the analytic gradient of f at x with central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h. x must be a leaf that requires grad;
/// f must be deterministic (dropout off). When max_coords > 0 only an evenly
/// strided subset of at most max_coords coordinates is probed.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5,
                           std::size_t max_coords = 0);

/// Same check over several parameter tensors that f closes over.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5,
                           std::size_t max_coords_per_param = 0);

}  // namespace caac
