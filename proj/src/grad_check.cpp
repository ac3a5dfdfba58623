#include "caac/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace caac {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h,
                           std::size_t max_coords_per_param) {
  for (auto& p : params) {
    if (!p.is_leaf() || !p.requires_grad()) throw GraphError("grad_check: inputs must be leaves requiring grad");
    p.zero_grad();
  }
  backward(f());

  GradCheckResult result;
  for (auto& p : params) {
    const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                      : std::vector<double>(p.numel(), 0.0);
    const std::size_t n = p.numel();
    const std::size_t stride = max_coords_per_param > 0 && n > max_coords_per_param
                                   ? (n + max_coords_per_param - 1) / max_coords_per_param
                                   : 1;
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      double fp = 0.0, fm = 0.0;
      {
        NoGradGuard guard;
        values[i] = saved + h;
        fp = f().item();
        values[i] = saved - h;
        fm = f().item();
      }
      values[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      ++result.coordinates;
      if (err >= result.max_relative_error) {
        result.max_relative_error = err;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
    p.zero_grad();
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h,
                           std::size_t max_coords) {
  return grad_check([&] { return f(x); }, std::vector<Tensor>{x}, h, max_coords);
}

}  // namespace caac
