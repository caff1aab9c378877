#pragma once

#include <cstdint>
#include <vector>

#include "iau/tensor.hpp"

namespace iau {

struct AdamOptions {
  double lr = 3.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Real>
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<Real>> first_moment;
  std::vector<std::vector<Real>> second_moment;
};

// Bias-corrected Adam update of every tensor in `params`, then zeroes their
// gradients. A parameter without a gradient buffer throws ContractError.
template <typename Real>
void adam_step(std::vector<Tensor<Real>>& params, AdamState<Real>& state);

template <typename Real>
class Adam {
 public:
  Adam(std::vector<Tensor<Real>> params, AdamOptions options);

  void step() { adam_step(params_, state_); }
  void zero_grad();
  void set_lr(double lr) { state_.options.lr = lr; }
  double lr() const { return state_.options.lr; }
  const AdamState<Real>& state() const { return state_; }
  const std::vector<Tensor<Real>>& params() const { return params_; }

 private:
  std::vector<Tensor<Real>> params_;
  AdamState<Real> state_;
};

}  // namespace iau
