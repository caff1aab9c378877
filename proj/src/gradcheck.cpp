#include "iau/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace iau {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradient(const std::function<TensorD()>& loss, TensorD& param, double h,
                               const std::vector<std::size_t>& coords) {
  if (!(h > 0)) throw ContractError("check_gradient: step h must be positive");
  param.set_requires_grad(true);
  param.zero_grad();
  {
    auto l = loss();
    backward(l);
  }
  std::vector<double> analytic(param.grad().begin(), param.grad().end());
  std::vector<std::size_t> which = coords;
  if (which.empty()) {
    which.resize(param.numel());
    std::iota(which.begin(), which.end(), std::size_t{0});
  }
  GradCheckResult result;
  NoGradGuard no_grad;
  auto values = param.mutable_data();
  for (auto i : which) {
    if (i >= values.size()) throw ContractError("check_gradient: coordinate out of range");
    const double saved = values[i];
    values[i] = saved + h;
    const double plus = loss().item();
    values[i] = saved - h;
    const double minus = loss().item();
    values[i] = saved;
    const double numeric = (plus - minus) / (2 * h);
    const double err = relative_error(analytic[i], numeric);
    if (result.checked == 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.analytic = analytic[i];
      result.numeric = numeric;
    }
    ++result.checked;
  }
  return result;
}

GradCheckResult finite_diff_check(const std::function<TensorD(const TensorD&)>& fn,
                                  const TensorD& x, double h) {
  TensorD param = x.detach();
  return check_gradient([&] { return fn(param); }, param, h);
}

GradCheckResult worst_of(const GradCheckResult& a, const GradCheckResult& b) {
  GradCheckResult out = a.max_rel_error >= b.max_rel_error ? a : b;
  out.checked = a.checked + b.checked;
  return out;
}

}  // namespace iau
