#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

// Dense compute kernels. `parallel` is the production path (OpenMP over
// output rows, so results do not depend on the thread count); `reference`
// holds straightforward serial loops kept as test oracles.
namespace iau::kernels {

enum class Trans : bool { kNo = false, kYes = true };

// Geometry of a k x k convolution patch extraction over NHWC images.
struct PatchGeometry {
  std::size_t images = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t rows() const { return images * out_height() * out_width(); }
  std::size_t cols() const { return kernel * kernel * channels; }
};

// Multiply-accumulate counter for the calling thread. Every gemm adds m*n*k.
std::uint64_t mac_count();
void reset_mac_count();
void add_macs(std::uint64_t n);

namespace parallel {

// c[m x n] = op(a) * op(b) (+ c when accumulate). op(a) is m x k, op(b) is k x n;
// both inputs are stored row-major in their untransposed layout.
template <typename Real>
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a, Trans ta,
          std::span<const Real> b, Trans tb, std::span<Real> c, bool accumulate);

template <typename Real>
void im2col(const PatchGeometry& g, std::span<const Real> image, std::span<Real> columns);

// Scatter-add of patch columns back to image layout; `image` is accumulated into.
template <typename Real>
void col2im(const PatchGeometry& g, std::span<const Real> columns, std::span<Real> image);

}  // namespace parallel

namespace reference {

template <typename Real>
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a, Trans ta,
          std::span<const Real> b, Trans tb, std::span<Real> c, bool accumulate);

template <typename Real>
void im2col(const PatchGeometry& g, std::span<const Real> image, std::span<Real> columns);

template <typename Real>
void col2im(const PatchGeometry& g, std::span<const Real> columns, std::span<Real> image);

}  // namespace reference

}  // namespace iau::kernels
