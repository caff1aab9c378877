#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "iau/tensor.hpp"

// Differentiable operations. Every op records a backward rule when any input
// requires a gradient; gradients accumulate (sum) into reused inputs.
namespace iau {

using Mask = std::vector<std::uint8_t>;

// Elementwise; shapes must match exactly.
template <typename Real> Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> scale(const Tensor<Real>& x, Real factor);
template <typename Real> Tensor<Real> add_scalar(const Tensor<Real>& x, Real offset);

template <typename Real> Tensor<Real> sigmoid(const Tensor<Real>& x);
template <typename Real> Tensor<Real> relu(const Tensor<Real>& x);
template <typename Real> Tensor<Real> absolute(const Tensor<Real>& x);

// Adds `bias` (length D) along the trailing axis of x[..., D].
template <typename Real> Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias);

template <typename Real> Tensor<Real> sum(const Tensor<Real>& x);
template <typename Real> Tensor<Real> mean(const Tensor<Real>& x);
// Mean over one axis; the axis is removed from the shape.
template <typename Real> Tensor<Real> mean_axis(const Tensor<Real>& x, std::size_t axis);

template <typename Real> Tensor<Real> reshape(const Tensor<Real>& x, Shape shape);
template <typename Real>
Tensor<Real> permute(const Tensor<Real>& x, const std::vector<std::size_t>& axes);
template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis);
// Rows [start, start + length) of the leading axis.
template <typename Real>
Tensor<Real> narrow(const Tensor<Real>& x, std::size_t start, std::size_t length);
// Same rank; every source dim equals the target dim or is 1.
template <typename Real> Tensor<Real> broadcast_to(const Tensor<Real>& x, const Shape& shape);

// out[i] = index[i] < 0 ? 0 : flat(x)[index[i]].
template <typename Real>
Tensor<Real> gather_flat(const Tensor<Real>& x, const std::vector<std::ptrdiff_t>& index,
                         Shape shape);
// Selects rows of a 2-D tensor.
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, const std::vector<std::size_t>& rows);

// a[m x k] * b[k x n].
template <typename Real> Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);
// a[m x k] * b[n x k]^T.
template <typename Real> Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b);
// Batched product over the leading axis of two rank-3 tensors with optional
// transposes of the trailing two axes.
template <typename Real>
Tensor<Real> bmm(const Tensor<Real>& a, const Tensor<Real>& b, bool transpose_a,
                 bool transpose_b);

// Row-wise softmax over positions where mask != 0; inactive positions are
// exactly 0 and an all-inactive row is all zeros. Max-subtraction stabilized.
template <typename Real>
Tensor<Real> masked_softmax_rows(const Tensor<Real>& x, const Mask& active);
template <typename Real> Tensor<Real> softmax_rows(const Tensor<Real>& x);
// Single-row form.
template <typename Real>
Tensor<Real> masked_softmax(const Tensor<Real>& row, const Mask& active);

// Divides each row by its L2 norm. Zero rows throw ContractError.
template <typename Real> Tensor<Real> l2_normalize_rows(const Tensor<Real>& x);

// Per-position affine map over the trailing (channel) axis: x[..., Din] w[Din x Dout] + b.
template <typename Real>
Tensor<Real> conv1x1(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b);

// k x k convolution over x[B x H x W x C]; w is [k*k*C x Cout] in (ky, kx, c) order.
// `b` may be undefined (no bias).
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b,
                    std::size_t kernel, std::size_t stride, std::size_t pad);

// Mean over every axis except the trailing channel axis: F[T x H x W x D] -> [D].
template <typename Real> Tensor<Real> global_average_pool(const Tensor<Real>& x);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalization over all non-channel axes followed by gamma/beta.
// Training mode uses batch statistics and updates the running buffers in place
// (unbiased variance); evaluation mode uses the running buffers.
template <typename Real>
Tensor<Real> batch_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Tensor<Real>& running_mean,
                        Tensor<Real>& running_var, const BatchNormOptions& options);

// Mean over rows of -log softmax(logits)[target]. Targets out of range throw ContractError.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, const std::vector<std::size_t>& targets);

// Sum over elements of -[m log a + (1 - m) log(1 - a)] with a = clamp(p, eps, 1 - eps).
template <typename Real>
Tensor<Real> binary_cross_entropy_sum(const Tensor<Real>& probs, const Tensor<Real>& targets,
                                      Real clamp_eps);

}  // namespace iau
