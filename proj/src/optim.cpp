#include "iau/optim.hpp"

#include <cmath>

namespace iau {

template <typename Real>
void adam_step(std::vector<Tensor<Real>>& params, AdamState<Real>& state) {
  for (const auto& p : params) {
    if (!p.has_grad()) throw ContractError("adam_step: parameter without gradient");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), Real(0));
      state.second_moment.emplace_back(p.numel(), Real(0));
    }
  }
  if (state.first_moment.size() != params.size()) throw ContractError("adam_step: parameter list changed");
  ++state.step;
  const auto& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != p.numel()) throw ContractError("adam_step: moment buffer shape mismatch");
    auto values = p.mutable_data();
    auto grad = p.mutable_grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      m[i] = static_cast<Real>(o.beta1 * m[i] + (1.0 - o.beta1) * g);
      v[i] = static_cast<Real>(o.beta2 * v[i] + (1.0 - o.beta2) * g * g);
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      values[i] = static_cast<Real>(values[i] - o.lr * m_hat / (std::sqrt(v_hat) + o.eps));
      grad[i] = Real(0);
    }
  }
}

template <typename Real>
Adam<Real>::Adam(std::vector<Tensor<Real>> params, AdamOptions options)
    : params_(std::move(params)) {
  state_.options = options;
}

template <typename Real>
void Adam<Real>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template void adam_step<float>(std::vector<Tensor<float>>&, AdamState<float>&);
template void adam_step<double>(std::vector<Tensor<double>>&, AdamState<double>&);
template class Adam<float>;
template class Adam<double>;

}  // namespace iau
