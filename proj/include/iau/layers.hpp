#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "iau/ops.hpp"

namespace iau {

template <typename Real>
using NamedTensors = std::vector<std::pair<std::string, Tensor<Real>>>;

// Affine batch normalization with tracked running statistics.
template <typename Real>
struct BatchNormLayer {
  Tensor<Real> gamma;
  Tensor<Real> beta;
  Tensor<Real> running_mean;
  Tensor<Real> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormLayer make(std::size_t channels, Real gamma_init) {
    return {Tensor<Real>::full({channels}, gamma_init, true),
            Tensor<Real>::zeros({channels}, true), Tensor<Real>::zeros({channels}),
            Tensor<Real>::full({channels}, Real(1))};
  }

  Tensor<Real> forward(const Tensor<Real>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var,
                      BatchNormOptions{training, momentum, eps});
  }

  void collect(const std::string& prefix, NamedTensors<Real>& params,
               NamedTensors<Real>& buffers) const {
    params.emplace_back(prefix + ".gamma", gamma);
    params.emplace_back(prefix + ".beta", beta);
    buffers.emplace_back(prefix + ".running_mean", running_mean);
    buffers.emplace_back(prefix + ".running_var", running_var);
  }
};

// Zero-mean uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] scaled by `gain`.
template <typename Real>
Tensor<Real> uniform_fan_in(Shape shape, std::size_t fan_in, std::mt19937_64& rng,
                            double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> values(numel(shape));
  for (auto& v : values) v = static_cast<Real>(dist(rng));
  return Tensor<Real>(std::move(shape), std::move(values), true);
}

}  // namespace iau
