#include "iau/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "iau/kernels.hpp"

namespace iau {

namespace {

using kernels::Trans;

template <typename Real, typename Fn>
inline void accumulate(const NodePtr<Real>& input, Fn&& fn) {
  if (input->requires_grad) fn(input->ensure_grad());
}

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                         to_string(b));
  }
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(s));
  }
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

template <typename Real>
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a, Trans ta,
          std::span<const Real> b, Trans tb, std::span<Real> c, bool accumulate_into) {
  kernels::parallel::gemm<Real>(m, n, k, a, ta, b, tb, c, accumulate_into);
}

template <typename Real, typename Fwd, typename Bwd>
Tensor<Real> unary(const char* op, const Tensor<Real>& x, Fwd fwd, Bwd bwd) {
  std::vector<Real> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  return make_result<Real>(op, x.shape(), std::move(out), {x}, [bwd](Node<Real>& self) {
    const auto& in = self.inputs[0];
    accumulate<Real>(in, [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += self.grad[i] * bwd(in->value[i], self.value[i]);
    });
  });
}

}  // namespace

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("add", a.shape(), b.shape());
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<Real>("add", a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    for (const auto& in : self.inputs)
      accumulate<Real>(in, [&](std::vector<Real>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
  });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("sub", a.shape(), b.shape());
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<Real>("sub", a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    accumulate<Real>(self.inputs[1], [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<Real>("mul", a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    const auto& x = self.inputs[0];
    const auto& y = self.inputs[1];
    accumulate<Real>(x, [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y->value[i];
    });
    accumulate<Real>(y, [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x->value[i];
    });
  });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor) {
  return unary<Real>(
      "scale", x, [factor](Real v) { return v * factor; },
      [factor](Real, Real) { return factor; });
}

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real offset) {
  return unary<Real>(
      "add_scalar", x, [offset](Real v) { return v + offset; }, [](Real, Real) { return Real(1); });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  return unary<Real>(
      "sigmoid", x,
      [](Real v) {
        // Branch keeps exp() argument non-positive.
        if (v >= 0) return Real(1) / (Real(1) + std::exp(-v));
        Real e = std::exp(v);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  return unary<Real>(
      "relu", x, [](Real v) { return v > 0 ? v : Real(0); },
      [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

template <typename Real>
Tensor<Real> absolute(const Tensor<Real>& x) {
  return unary<Real>(
      "abs", x, [](Real v) { return std::abs(v); },
      [](Real v, Real) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); });
}

template <typename Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
  const auto d = bias.numel();
  if (x.shape().back() != d) {
    throw DimensionError("add_bias: trailing axis of " + to_string(x.shape()) +
                         " does not match bias " + to_string(bias.shape()));
  }
  std::vector<Real> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % d];
  return make_result<Real>("add_bias", x.shape(), std::move(out), {x, bias}, [d](Node<Real>& self) {
    accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    accumulate<Real>(self.inputs[1], [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
    });
  });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real total = 0;
  for (auto v : x.data()) total += v;
  return make_result<Real>("sum", Shape{1}, {total}, {x}, [](Node<Real>& self) {
    accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
      for (auto& v : g) v += self.grad[0];
    });
  });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

template <typename Real>
Tensor<Real> mean_axis(const Tensor<Real>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("mean_axis: axis out of range for " + to_string(x.shape()));
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<Real> out(outer * inner, Real(0));
  auto xs = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xs[(o * n + k) * inner + i];
  const Real inv = Real(1) / static_cast<Real>(n);
  for (auto& v : out) v *= inv;
  return make_result<Real>("mean_axis", out_shape, std::move(out), {x},
                           [outer, inner, n, inv](Node<Real>& self) {
                             accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t k = 0; k < n; ++k)
                                   for (std::size_t i = 0; i < inner; ++i)
                                     g[(o * n + k) * inner + i] += self.grad[o * inner + i] * inv;
                             });
                           });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (iau::numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<Real> out(x.data().begin(), x.data().end());
  return make_result<Real>("reshape", std::move(shape), std::move(out), {x}, [](Node<Real>& self) {
    accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

template <typename Real>
Tensor<Real> permute(const Tensor<Real>& x, const std::vector<std::size_t>& axes) {
  const auto& s = x.shape();
  if (axes.size() != s.size()) throw DimensionError("permute: axes rank mismatch for " + to_string(s));
  std::vector<bool> used(axes.size(), false);
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= s.size() || used[axes[i]]) throw DimensionError("permute: invalid axis list");
    used[axes[i]] = true;
    out_shape[i] = s[axes[i]];
  }
  const auto in_strides = strides_of(s);
  // source offset for each output element
  std::vector<std::size_t> source(x.numel());
  std::vector<std::size_t> idx(axes.size(), 0);
  for (std::size_t flat = 0; flat < source.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < axes.size(); ++i) off += idx[i] * in_strides[axes[i]];
    source[flat] = off;
    for (std::size_t i = axes.size(); i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[source[i]];
  return make_result<Real>("permute", out_shape, std::move(out), {x},
                           [source = std::move(source)](Node<Real>& self) {
                             accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
                               for (std::size_t i = 0; i < source.size(); ++i)
                                 g[source[i]] += self.grad[i];
                             });
                           });
}

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const auto& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i])
        throw DimensionError("concat: shape mismatch " + to_string(first) + " vs " + to_string(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<Real> out(iau::numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.shape()[axis] * inner;
    offsets.push_back(offset);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().begin() + o * chunk, chunk, out.begin() + o * out_row + offset);
    offset += chunk;
  }
  return make_result<Real>(
      "concat", out_shape, std::move(out), parts,
      [outer, out_row, offsets = std::move(offsets)](Node<Real>& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          const auto& in = self.inputs[k];
          const std::size_t chunk = in->value.size() / outer;
          accumulate<Real>(in, [&](std::vector<Real>& g) {
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < chunk; ++i)
                g[o * chunk + i] += self.grad[o * out_row + offsets[k] + i];
          });
        }
      });
}

template <typename Real>
Tensor<Real> narrow(const Tensor<Real>& x, std::size_t start, std::size_t length) {
  const auto& s = x.shape();
  if (length == 0 || start + length > s[0]) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") outside " + to_string(s));
  }
  const std::size_t row = x.numel() / s[0];
  Shape out_shape = s;
  out_shape[0] = length;
  std::vector<Real> out(x.data().begin() + start * row, x.data().begin() + (start + length) * row);
  return make_result<Real>("narrow", out_shape, std::move(out), {x},
                           [offset = start * row](Node<Real>& self) {
                             accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[offset + i] += self.grad[i];
                             });
                           });
}

template <typename Real>
Tensor<Real> broadcast_to(const Tensor<Real>& x, const Shape& shape) {
  const auto& s = x.shape();
  if (s.size() != shape.size()) throw DimensionError("broadcast_to: rank mismatch " + to_string(s) + " -> " + to_string(shape));
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] != shape[i] && s[i] != 1)
      throw DimensionError("broadcast_to: cannot broadcast " + to_string(s) + " to " + to_string(shape));
  const auto in_strides = strides_of(s);
  std::vector<std::size_t> source(iau::numel(shape));
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < source.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (s[i] != 1) off += idx[i] * in_strides[i];
    source[flat] = off;
    for (std::size_t i = shape.size(); i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<Real> out(source.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[source[i]];
  return make_result<Real>("broadcast_to", shape, std::move(out), {x},
                           [source = std::move(source)](Node<Real>& self) {
                             accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
                               for (std::size_t i = 0; i < source.size(); ++i)
                                 g[source[i]] += self.grad[i];
                             });
                           });
}

template <typename Real>
Tensor<Real> gather_flat(const Tensor<Real>& x, const std::vector<std::ptrdiff_t>& index,
                         Shape shape) {
  if (iau::numel(shape) != index.size()) throw DimensionError("gather_flat: index count does not match shape " + to_string(shape));
  const auto n = static_cast<std::ptrdiff_t>(x.numel());
  std::vector<Real> out(index.size(), Real(0));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ContractError("gather_flat: index out of range");
    if (index[i] >= 0) out[i] = x.data()[index[i]];
  }
  return make_result<Real>("gather", std::move(shape), std::move(out), {x},
                           [index](Node<Real>& self) {
                             accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
                               for (std::size_t i = 0; i < index.size(); ++i)
                                 if (index[i] >= 0) g[index[i]] += self.grad[i];
                             });
                           });
}

template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, const std::vector<std::size_t>& rows) {
  require_rank("gather_rows", x.shape(), 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<std::ptrdiff_t> index;
  index.reserve(rows.size() * d);
  for (auto r : rows) {
    if (r >= n) throw ContractError("gather_rows: row " + std::to_string(r) + " out of range");
    for (std::size_t c = 0; c < d; ++c) index.push_back(static_cast<std::ptrdiff_t>(r * d + c));
  }
  return gather_flat(x, index, Shape{rows.size(), d});
}

template <typename Real>
Tensor<Real> bmm(const Tensor<Real>& a, const Tensor<Real>& b, bool transpose_a,
                 bool transpose_b) {
  require_rank("bmm", a.shape(), 3);
  require_rank("bmm", b.shape(), 3);
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("bmm: batch mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t m = transpose_a ? a.dim(2) : a.dim(1);
  const std::size_t k = transpose_a ? a.dim(1) : a.dim(2);
  const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions disagree for " + to_string(a.shape()) +
                         (transpose_a ? "^T" : "") + " and " + to_string(b.shape()) +
                         (transpose_b ? "^T" : ""));
  }
  const Trans ta = transpose_a ? Trans::kYes : Trans::kNo;
  const Trans tb = transpose_b ? Trans::kYes : Trans::kNo;
  std::vector<Real> out(batch * m * n);
  const std::size_t sa = m * k, sb = k * n, sc = m * n;
  for (std::size_t g = 0; g < batch; ++g) {
    gemm<Real>(m, n, k, a.data().subspan(g * sa, sa), ta, b.data().subspan(g * sb, sb), tb,
               std::span<Real>(out).subspan(g * sc, sc), false);
  }
  return make_result<Real>(
      "bmm", Shape{batch, m, n}, std::move(out), {a, b},
      [=](Node<Real>& self) {
        const auto& an = self.inputs[0];
        const auto& bn = self.inputs[1];
        std::span<const Real> dc(self.grad);
        std::span<const Real> av(an->value), bv(bn->value);
        accumulate<Real>(an, [&](std::vector<Real>& ga) {
          std::span<Real> gs(ga);
          for (std::size_t g = 0; g < batch; ++g) {
            auto dcg = dc.subspan(g * sc, sc);
            auto bg = bv.subspan(g * sb, sb);
            if (ta == Trans::kNo)
              gemm<Real>(m, k, n, dcg, Trans::kNo, bg, tb == Trans::kNo ? Trans::kYes : Trans::kNo,
                         gs.subspan(g * sa, sa), true);
            else
              gemm<Real>(k, m, n, bg, tb, dcg, Trans::kYes, gs.subspan(g * sa, sa), true);
          }
        });
        accumulate<Real>(bn, [&](std::vector<Real>& gb) {
          std::span<Real> gs(gb);
          for (std::size_t g = 0; g < batch; ++g) {
            auto dcg = dc.subspan(g * sc, sc);
            auto ag = av.subspan(g * sa, sa);
            if (tb == Trans::kNo)
              gemm<Real>(k, n, m, ag, ta == Trans::kNo ? Trans::kYes : Trans::kNo, dcg, Trans::kNo,
                         gs.subspan(g * sb, sb), true);
            else
              gemm<Real>(n, k, m, dcg, Trans::kYes, ag, ta, gs.subspan(g * sb, sb), true);
          }
        });
      });
}

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  auto out = bmm(reshape(a, Shape{1, a.dim(0), a.dim(1)}), reshape(b, Shape{1, b.dim(0), b.dim(1)}),
                 false, false);
  return reshape(out, Shape{a.dim(0), b.dim(1)});
}

template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_rank("matmul_nt", a.shape(), 2);
  require_rank("matmul_nt", b.shape(), 2);
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul: inner dimensions disagree for " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + "^T");
  }
  auto out = bmm(reshape(a, Shape{1, a.dim(0), a.dim(1)}), reshape(b, Shape{1, b.dim(0), b.dim(1)}),
                 false, true);
  return reshape(out, Shape{a.dim(0), b.dim(0)});
}

template <typename Real>
Tensor<Real> masked_softmax_rows(const Tensor<Real>& x, const Mask& active) {
  require_rank("masked_softmax_rows", x.shape(), 2);
  if (active.size() != x.numel()) throw DimensionError("masked_softmax: mask length does not match " + to_string(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<Real> out(x.numel(), Real(0));
  auto xs = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    Real row_max = -std::numeric_limits<Real>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (active[base + c]) row_max = std::max(row_max, xs[base + c]);
    if (row_max == -std::numeric_limits<Real>::infinity()) continue;
    Real total = 0;
    for (std::size_t c = 0; c < cols; ++c)
      if (active[base + c]) {
        out[base + c] = std::exp(xs[base + c] - row_max);
        total += out[base + c];
      }
    for (std::size_t c = 0; c < cols; ++c)
      if (active[base + c]) out[base + c] /= total;
  }
  return make_result<Real>("masked_softmax", x.shape(), std::move(out), {x},
                           [rows, cols](Node<Real>& self) {
                             accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const std::size_t base = r * cols;
                                 Real dot = 0;
                                 for (std::size_t c = 0; c < cols; ++c)
                                   dot += self.grad[base + c] * self.value[base + c];
                                 for (std::size_t c = 0; c < cols; ++c)
                                   g[base + c] += self.value[base + c] * (self.grad[base + c] - dot);
                               }
                             });
                           });
}

template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
  return masked_softmax_rows(x, Mask(x.numel(), 1));
}

template <typename Real>
Tensor<Real> masked_softmax(const Tensor<Real>& row, const Mask& active) {
  if (active.size() != row.numel()) throw DimensionError("masked_softmax: mask length does not match row length");
  return reshape(masked_softmax_rows(reshape(row, Shape{1, row.numel()}), active), row.shape());
}

template <typename Real>
Tensor<Real> l2_normalize_rows(const Tensor<Real>& x) {
  require_rank("l2_normalize_rows", x.shape(), 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<Real> norms(rows);
  std::vector<Real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    Real ss = 0;
    for (std::size_t c = 0; c < cols; ++c) ss += x.data()[r * cols + c] * x.data()[r * cols + c];
    if (ss == Real(0)) throw ContractError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    norms[r] = std::sqrt(ss);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.data()[r * cols + c] / norms[r];
  }
  return make_result<Real>("l2_normalize", x.shape(), std::move(out), {x},
                           [rows, cols, norms = std::move(norms)](Node<Real>& self) {
                             accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const std::size_t base = r * cols;
                                 Real dot = 0;
                                 for (std::size_t c = 0; c < cols; ++c)
                                   dot += self.grad[base + c] * self.value[base + c];
                                 for (std::size_t c = 0; c < cols; ++c)
                                   g[base + c] +=
                                       (self.grad[base + c] - self.value[base + c] * dot) / norms[r];
                               }
                             });
                           });
}

template <typename Real>
Tensor<Real> conv1x1(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
  require_rank("conv1x1 weight", w.shape(), 2);
  const std::size_t din = x.shape().back();
  if (w.dim(0) != din || b.numel() != w.dim(1)) {
    throw DimensionError("conv1x1: channel mismatch, input " + to_string(x.shape()) + ", weight " +
                         to_string(w.shape()) + ", bias " + to_string(b.shape()));
  }
  const std::size_t positions = x.numel() / din;
  auto y = add_bias(matmul(reshape(x, Shape{positions, din}), w), b);
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  return reshape(y, out_shape);
}

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b,
                    std::size_t kernel, std::size_t stride, std::size_t pad) {
  require_rank("conv2d", x.shape(), 4);
  require_rank("conv2d weight", w.shape(), 2);
  kernels::PatchGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel, stride, pad};
  const bool has_bias = b.defined();
  if (w.dim(0) != geo.cols() || (has_bias && b.numel() != w.dim(1))) {
    throw DimensionError("conv2d: channel mismatch, input " + to_string(x.shape()) + ", weight " +
                         to_string(w.shape()));
  }
  if (geo.height + 2 * pad < kernel || geo.width + 2 * pad < kernel)
    throw DimensionError("conv2d: kernel larger than padded input " + to_string(x.shape()));
  const std::size_t cout = w.dim(1);
  std::vector<Real> columns(geo.rows() * geo.cols());
  kernels::parallel::im2col<Real>(geo, x.data(), columns);
  std::vector<Real> out(geo.rows() * cout);
  gemm<Real>(geo.rows(), cout, geo.cols(), columns, Trans::kNo, w.data(), Trans::kNo, out, false);
  if (has_bias)
    for (std::size_t r = 0; r < geo.rows(); ++r)
      for (std::size_t c = 0; c < cout; ++c) out[r * cout + c] += b.data()[c];
  Shape out_shape{geo.images, geo.out_height(), geo.out_width(), cout};
  std::vector<Tensor<Real>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result<Real>(
      "conv2d", out_shape, std::move(out), inputs,
      [geo, cout, columns = std::move(columns)](Node<Real>& self) {
        const auto& xn = self.inputs[0];
        const auto& wn = self.inputs[1];
        const std::size_t rows = geo.rows(), cols = geo.cols();
        accumulate<Real>(wn, [&](std::vector<Real>& gw) {
          gemm<Real>(cols, cout, rows, columns, Trans::kYes, self.grad, Trans::kNo, gw, true);
        });
        if (self.inputs.size() > 2)
          accumulate<Real>(self.inputs[2], [&](std::vector<Real>& gb) {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cout; ++c) gb[c] += self.grad[r * cout + c];
          });
        accumulate<Real>(xn, [&](std::vector<Real>& gx) {
          std::vector<Real> dcols(rows * cols);
          gemm<Real>(rows, cols, cout, self.grad, Trans::kNo, wn->value, Trans::kYes, dcols, false);
          kernels::parallel::col2im<Real>(geo, dcols, gx);
        });
      });
}

template <typename Real>
Tensor<Real> global_average_pool(const Tensor<Real>& x) {
  const std::size_t d = x.shape().back();
  return mean_axis(reshape(x, Shape{x.numel() / d, d}), 0);
}

template <typename Real>
Tensor<Real> batch_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Tensor<Real>& running_mean,
                        Tensor<Real>& running_var, const BatchNormOptions& options) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d || running_mean.numel() != d ||
      running_var.numel() != d) {
    throw DimensionError("batch_norm: channel count " + std::to_string(d) +
                         " does not match parameters " + to_string(gamma.shape()));
  }
  const std::size_t m = x.numel() / d;
  auto xs = x.data();
  std::vector<Real> mu(d, Real(0)), inv_std(d);
  if (options.training) {
    std::vector<Real> var(d, Real(0));
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < d; ++c) mu[c] += xs[r * d + c];
    for (auto& v : mu) v /= static_cast<Real>(m);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        Real diff = xs[r * d + c] - mu[c];
        var[c] += diff * diff;
      }
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    const Real mom = static_cast<Real>(options.momentum);
    for (std::size_t c = 0; c < d; ++c) {
      Real biased = var[c] / static_cast<Real>(m);
      Real unbiased = m > 1 ? var[c] / static_cast<Real>(m - 1) : biased;
      inv_std[c] = Real(1) / std::sqrt(biased + static_cast<Real>(options.eps));
      rm[c] = (Real(1) - mom) * rm[c] + mom * mu[c];
      rv[c] = (Real(1) - mom) * rv[c] + mom * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < d; ++c) {
      mu[c] = running_mean.data()[c];
      inv_std[c] = Real(1) / std::sqrt(running_var.data()[c] + static_cast<Real>(options.eps));
    }
  }
  std::vector<Real> xhat(x.numel()), out(x.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t i = r * d + c;
      xhat[i] = (xs[i] - mu[c]) * inv_std[c];
      out[i] = gamma.data()[c] * xhat[i] + beta.data()[c];
    }
  const bool training = options.training;
  return make_result<Real>(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [m, d, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Real>& self) {
        const auto& xn = self.inputs[0];
        const auto& gn = self.inputs[1];
        const auto& bn = self.inputs[2];
        std::vector<Real> sum_dy(d, Real(0)), sum_dy_xhat(d, Real(0));
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < d; ++c) {
            sum_dy[c] += self.grad[r * d + c];
            sum_dy_xhat[c] += self.grad[r * d + c] * xhat[r * d + c];
          }
        accumulate<Real>(gn, [&](std::vector<Real>& g) {
          for (std::size_t c = 0; c < d; ++c) g[c] += sum_dy_xhat[c];
        });
        accumulate<Real>(bn, [&](std::vector<Real>& g) {
          for (std::size_t c = 0; c < d; ++c) g[c] += sum_dy[c];
        });
        accumulate<Real>(xn, [&](std::vector<Real>& g) {
          const auto& gamma_v = gn->value;
          const Real inv_m = Real(1) / static_cast<Real>(m);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              const std::size_t i = r * d + c;
              if (training)
                g[i] += gamma_v[c] * inv_std[c] *
                        (self.grad[i] - inv_m * sum_dy[c] - xhat[i] * inv_m * sum_dy_xhat[c]);
              else
                g[i] += gamma_v[c] * inv_std[c] * self.grad[i];
            }
        });
      });
}

template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, const std::vector<std::size_t>& targets) {
  require_rank("cross_entropy", logits.shape(), 2);
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (targets.size() != b) throw DimensionError("cross_entropy: target count does not match batch");
  std::vector<Real> probs(b * k);
  Real loss = 0;
  for (std::size_t r = 0; r < b; ++r) {
    if (targets[r] >= k) {
      throw ContractError("cross_entropy: target " + std::to_string(targets[r]) +
                          " out of range for " + std::to_string(k) + " classes");
    }
    const Real* row = logits.data().data() + r * k;
    Real mx = *std::max_element(row, row + k);
    Real total = 0;
    for (std::size_t c = 0; c < k; ++c) total += std::exp(row[c] - mx);
    const Real lse = mx + std::log(total);
    loss += lse - row[targets[r]];
    for (std::size_t c = 0; c < k; ++c) probs[r * k + c] = std::exp(row[c] - lse);
  }
  loss /= static_cast<Real>(b);
  return make_result<Real>("cross_entropy", Shape{1}, {loss}, {logits},
                           [b, k, targets, probs = std::move(probs)](Node<Real>& self) {
                             accumulate<Real>(self.inputs[0], [&](std::vector<Real>& g) {
                               const Real s = self.grad[0] / static_cast<Real>(b);
                               for (std::size_t r = 0; r < b; ++r)
                                 for (std::size_t c = 0; c < k; ++c)
                                   g[r * k + c] +=
                                       s * (probs[r * k + c] - (c == targets[r] ? Real(1) : Real(0)));
                             });
                           });
}

template <typename Real>
Tensor<Real> binary_cross_entropy_sum(const Tensor<Real>& probs, const Tensor<Real>& targets,
                                      Real clamp_eps) {
  require_same_shape("binary_cross_entropy", probs.shape(), targets.shape());
  const Real lo = clamp_eps, hi = Real(1) - clamp_eps;
  Real loss = 0;
  auto ps = probs.data();
  auto ms = targets.data();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Real a = std::clamp(ps[i], lo, hi);
    loss -= ms[i] * std::log(a) + (Real(1) - ms[i]) * std::log(Real(1) - a);
  }
  return make_result<Real>("bce", Shape{1}, {loss}, {probs, targets}, [lo, hi](Node<Real>& self) {
    const auto& pn = self.inputs[0];
    const auto& mn = self.inputs[1];
    accumulate<Real>(pn, [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Real p = pn->value[i];
        if (p < lo || p > hi) continue;
        const Real t = mn->value[i];
        g[i] += self.grad[0] * (-t / p + (Real(1) - t) / (Real(1) - p));
      }
    });
    accumulate<Real>(mn, [&](std::vector<Real>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Real a = std::clamp(pn->value[i], lo, hi);
        g[i] += self.grad[0] * (std::log(Real(1) - a) - std::log(a));
      }
    });
  });
}

#define IAU_INSTANTIATE_OPS(R)                                                                    \
  template Tensor<R> add<R>(const Tensor<R>&, const Tensor<R>&);                                  \
  template Tensor<R> sub<R>(const Tensor<R>&, const Tensor<R>&);                                  \
  template Tensor<R> mul<R>(const Tensor<R>&, const Tensor<R>&);                                  \
  template Tensor<R> scale<R>(const Tensor<R>&, R);                                               \
  template Tensor<R> add_scalar<R>(const Tensor<R>&, R);                                          \
  template Tensor<R> sigmoid<R>(const Tensor<R>&);                                                \
  template Tensor<R> relu<R>(const Tensor<R>&);                                                   \
  template Tensor<R> absolute<R>(const Tensor<R>&);                                               \
  template Tensor<R> add_bias<R>(const Tensor<R>&, const Tensor<R>&);                             \
  template Tensor<R> sum<R>(const Tensor<R>&);                                                    \
  template Tensor<R> mean<R>(const Tensor<R>&);                                                   \
  template Tensor<R> mean_axis<R>(const Tensor<R>&, std::size_t);                                 \
  template Tensor<R> reshape<R>(const Tensor<R>&, Shape);                                         \
  template Tensor<R> permute<R>(const Tensor<R>&, const std::vector<std::size_t>&);               \
  template Tensor<R> concat<R>(const std::vector<Tensor<R>>&, std::size_t);                       \
  template Tensor<R> narrow<R>(const Tensor<R>&, std::size_t, std::size_t);                       \
  template Tensor<R> broadcast_to<R>(const Tensor<R>&, const Shape&);                             \
  template Tensor<R> gather_flat<R>(const Tensor<R>&, const std::vector<std::ptrdiff_t>&, Shape); \
  template Tensor<R> gather_rows<R>(const Tensor<R>&, const std::vector<std::size_t>&);           \
  template Tensor<R> matmul<R>(const Tensor<R>&, const Tensor<R>&);                               \
  template Tensor<R> matmul_nt<R>(const Tensor<R>&, const Tensor<R>&);                            \
  template Tensor<R> bmm<R>(const Tensor<R>&, const Tensor<R>&, bool, bool);                      \
  template Tensor<R> masked_softmax_rows<R>(const Tensor<R>&, const Mask&);                       \
  template Tensor<R> softmax_rows<R>(const Tensor<R>&);                                           \
  template Tensor<R> masked_softmax<R>(const Tensor<R>&, const Mask&);                            \
  template Tensor<R> l2_normalize_rows<R>(const Tensor<R>&);                                      \
  template Tensor<R> conv1x1<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&);            \
  template Tensor<R> conv2d<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&, std::size_t, \
                               std::size_t, std::size_t);                                         \
  template Tensor<R> global_average_pool<R>(const Tensor<R>&);                                    \
  template Tensor<R> batch_norm<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&,          \
                                   Tensor<R>&, Tensor<R>&, const BatchNormOptions&);              \
  template Tensor<R> cross_entropy<R>(const Tensor<R>&, const std::vector<std::size_t>&);         \
  template Tensor<R> binary_cross_entropy_sum<R>(const Tensor<R>&, const Tensor<R>&, R);

IAU_INSTANTIATE_OPS(float)
IAU_INSTANTIATE_OPS(double)

}  // namespace iau
