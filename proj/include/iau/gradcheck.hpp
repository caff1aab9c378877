#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "iau/tensor.hpp"

namespace iau {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Relative error with a 1e-8 denominator floor.
double relative_error(double analytic, double numeric);

// Compares the backprop gradient of `loss` with respect to `param` against
// central differences (loss(x + h e_i) - loss(x - h e_i)) / 2h at `coords`
// (every coordinate when empty). `param` is perturbed in place and restored.
GradCheckResult check_gradient(const std::function<TensorD()>& loss, TensorD& param, double h,
                               const std::vector<std::size_t>& coords = {});

// Single-input form: `fn` maps x to a scalar tensor.
GradCheckResult finite_diff_check(const std::function<TensorD(const TensorD&)>& fn,
                                  const TensorD& x, double h);

// Keeps the worst of two results.
GradCheckResult worst_of(const GradCheckResult& a, const GradCheckResult& b);

}  // namespace iau
