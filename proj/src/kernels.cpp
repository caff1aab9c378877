#include "iau/kernels.hpp"

#include <vector>

namespace iau::kernels {

namespace {
thread_local std::uint64_t t_macs = 0;

template <typename Real>
std::vector<Real> transpose_copy(std::span<const Real> src, std::size_t rows, std::size_t cols) {
  std::vector<Real> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// Offset of patch entry (ky, kx, ch) for output pixel (img, oy, ox); -1 when in padding.
inline std::ptrdiff_t source_offset(const PatchGeometry& g, std::size_t img, std::size_t oy,
                                    std::size_t ox, std::size_t ky, std::size_t kx) {
  auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
  auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
  if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
      ix >= static_cast<std::ptrdiff_t>(g.width))
    return -1;
  return static_cast<std::ptrdiff_t>(((img * g.height + iy) * g.width + ix) * g.channels);
}
}  // namespace

std::uint64_t mac_count() { return t_macs; }
void reset_mac_count() { t_macs = 0; }
void add_macs(std::uint64_t n) { t_macs += n; }

namespace parallel {

template <typename Real>
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a, Trans ta,
          std::span<const Real> b, Trans tb, std::span<Real> c, bool accumulate) {
  add_macs(static_cast<std::uint64_t>(m) * n * k);
  std::vector<Real> a_buf;
  std::vector<Real> b_buf;
  const Real* ap = a.data();
  const Real* bp = b.data();
  if (ta == Trans::kYes) {
    a_buf = transpose_copy(a, k, m);
    ap = a_buf.data();
  }
  if (tb == Trans::kYes) {
    b_buf = transpose_copy(b, n, k);
    bp = b_buf.data();
  }
  Real* cp = c.data();
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    Real* crow = cp + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = Real(0);
    const Real* arow = ap + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Real>
void im2col(const PatchGeometry& g, std::span<const Real> image, std::span<Real> columns) {
  const auto oh = g.out_height(), ow = g.out_width(), cols = g.cols();
  const auto rows = static_cast<std::ptrdiff_t>(g.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const std::size_t img = r / (oh * ow), oy = (r / ow) % oh, ox = r % ow;
    Real* dst = columns.data() + r * cols;
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        auto off = source_offset(g, img, oy, ox, ky, kx);
        for (std::size_t ch = 0; ch < g.channels; ++ch)
          *dst++ = off < 0 ? Real(0) : image[off + ch];
      }
  }
}

template <typename Real>
void col2im(const PatchGeometry& g, std::span<const Real> columns, std::span<Real> image) {
  // Parallel over images: patches never cross image boundaries, so writes are disjoint.
  const auto oh = g.out_height(), ow = g.out_width(), cols = g.cols();
  const auto images = static_cast<std::ptrdiff_t>(g.images);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t img = 0; img < images; ++img) {
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const Real* src = columns.data() + ((img * oh + oy) * ow + ox) * cols;
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            auto off = source_offset(g, img, oy, ox, ky, kx);
            for (std::size_t ch = 0; ch < g.channels; ++ch, ++src)
              if (off >= 0) image[off + ch] += *src;
          }
      }
  }
}

}  // namespace parallel

namespace reference {

template <typename Real>
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a, Trans ta,
          std::span<const Real> b, Trans tb, std::span<Real> c, bool accumulate) {
  add_macs(static_cast<std::uint64_t>(m) * n * k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Real sum = 0;
      for (std::size_t p = 0; p < k; ++p) {
        Real av = ta == Trans::kYes ? a[p * m + i] : a[i * k + p];
        Real bv = tb == Trans::kYes ? b[j * k + p] : b[p * n + j];
        sum += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
    }
}

template <typename Real>
void im2col(const PatchGeometry& g, std::span<const Real> image, std::span<Real> columns) {
  std::size_t r = 0;
  for (std::size_t img = 0; img < g.images; ++img)
    for (std::size_t oy = 0; oy < g.out_height(); ++oy)
      for (std::size_t ox = 0; ox < g.out_width(); ++ox, ++r) {
        std::size_t c = 0;
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
          for (std::size_t kx = 0; kx < g.kernel; ++kx)
            for (std::size_t ch = 0; ch < g.channels; ++ch, ++c) {
              auto iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              auto ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                            ix < static_cast<long>(g.width);
              columns[r * g.cols() + c] =
                  inside ? image[((img * g.height + iy) * g.width + ix) * g.channels + ch] : Real(0);
            }
      }
}

template <typename Real>
void col2im(const PatchGeometry& g, std::span<const Real> columns, std::span<Real> image) {
  std::size_t r = 0;
  for (std::size_t img = 0; img < g.images; ++img)
    for (std::size_t oy = 0; oy < g.out_height(); ++oy)
      for (std::size_t ox = 0; ox < g.out_width(); ++ox, ++r) {
        std::size_t c = 0;
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
          for (std::size_t kx = 0; kx < g.kernel; ++kx)
            for (std::size_t ch = 0; ch < g.channels; ++ch, ++c) {
              auto iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              auto ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                  ix < static_cast<long>(g.width))
                image[((img * g.height + iy) * g.width + ix) * g.channels + ch] +=
                    columns[r * g.cols() + c];
            }
      }
}

}  // namespace reference

#define IAU_INSTANTIATE_KERNELS(NS, R)                                                         \
  template void NS::gemm<R>(std::size_t, std::size_t, std::size_t, std::span<const R>, Trans, \
                            std::span<const R>, Trans, std::span<R>, bool);                   \
  template void NS::im2col<R>(const PatchGeometry&, std::span<const R>, std::span<R>);        \
  template void NS::col2im<R>(const PatchGeometry&, std::span<const R>, std::span<R>);

IAU_INSTANTIATE_KERNELS(parallel, float)
IAU_INSTANTIATE_KERNELS(parallel, double)
IAU_INSTANTIATE_KERNELS(reference, float)
IAU_INSTANTIATE_KERNELS(reference, double)

}  // namespace iau::kernels
