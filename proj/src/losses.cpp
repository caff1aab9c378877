#include "iau/losses.hpp"

#include <cmath>
#include <map>

namespace iau {

void LossWeights::validate() const {
  if (!(margin >= 0)) throw ConfigError("triplet margin must be >= 0");
  if (!(lambda1 >= 0) || !(lambda2 >= 0)) throw ConfigError("loss weights must be >= 0");
}

template <typename Real>
Tensor<Real> cosine_distance(const Tensor<Real>& f, const Tensor<Real>& g) {
  if (f.numel() != g.numel()) throw DimensionError("cosine_distance: length mismatch");
  const std::size_t d = f.numel();
  auto a = l2_normalize_rows(reshape(f, Shape{1, d}));
  auto b = l2_normalize_rows(reshape(g, Shape{1, d}));
  return add_scalar(scale(reshape(matmul_nt(a, b), Shape{1}), Real(-1)), Real(1));
}

template <typename Real>
Tensor<Real> cosine_distance_matrix(const Tensor<Real>& features) {
  auto unit = l2_normalize_rows(features);
  return add_scalar(scale(matmul_nt(unit, unit), Real(-1)), Real(1));
}

template <typename Real>
Tensor<Real> batch_hard_triplet(const Tensor<Real>& features, const std::vector<std::size_t>& labels,
                                Real margin) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw DimensionError("batch_hard_triplet: features " + to_string(features.shape()) +
                         " do not match " + std::to_string(labels.size()) + " labels");
  }
  std::map<std::size_t, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  const std::size_t k = counts.begin()->second;
  for (const auto& [label, c] : counts)
    if (c != k) throw ContractError("batch_hard_triplet: every class needs the same number of samples");
  if (counts.size() < 2) throw ContractError("batch_hard_triplet: need at least 2 classes (C >= 2)");
  if (k < 2) throw ContractError("batch_hard_triplet: need at least 2 samples per class (K >= 2)");

  const std::size_t b = labels.size();
  auto dist = cosine_distance_matrix(features);
  auto dv = dist.data();
  std::vector<std::ptrdiff_t> hardest_pos(b), hardest_neg(b);
  for (std::size_t a = 0; a < b; ++a) {
    std::ptrdiff_t pos = -1, neg = -1;
    for (std::size_t j = 0; j < b; ++j) {
      const auto idx = static_cast<std::ptrdiff_t>(a * b + j);
      if (labels[j] == labels[a]) {
        if (pos < 0 || dv[idx] > dv[pos]) pos = idx;
      } else if (neg < 0 || dv[idx] < dv[neg]) {
        neg = idx;
      }
    }
    hardest_pos[a] = pos;
    hardest_neg[a] = neg;
  }
  auto pos = gather_flat(dist, hardest_pos, Shape{b});
  auto neg = gather_flat(dist, hardest_neg, Shape{b});
  auto hinge = relu(add_scalar(sub(pos, neg), margin));
  return scale(sum(hinge), Real(1) / static_cast<Real>(b));
}

template <typename Real>
Tensor<Real> part_attention_bce(const Tensor<Real>& attention, const Tensor<Real>& masks,
                                std::size_t sequences) {
  if (attention.shape() != masks.shape()) {
    throw DimensionError("part_attention_bce: attention " + to_string(attention.shape()) +
                         " and masks " + to_string(masks.shape()) + " differ");
  }
  if (sequences == 0 || attention.numel() % sequences != 0) throw DimensionError("part_attention_bce: bad sequence count");
  const Real per_sequence = static_cast<Real>(attention.numel() / sequences);
  return scale(binary_cross_entropy_sum(attention, masks, static_cast<Real>(kBceClamp)),
               Real(1) / per_sequence);
}

template <typename Real>
Tensor<Real> total_loss(const Tensor<Real>& cls, const Tensor<Real>& tri, const Tensor<Real>& part,
                        const LossWeights& weights) {
  auto out = add(cls, scale(tri, static_cast<Real>(weights.lambda1)));
  return add(out, scale(part, static_cast<Real>(weights.lambda2)));
}

#define IAU_INSTANTIATE_LOSSES(R)                                                                \
  template Tensor<R> cosine_distance<R>(const Tensor<R>&, const Tensor<R>&);                     \
  template Tensor<R> cosine_distance_matrix<R>(const Tensor<R>&);                                \
  template Tensor<R> batch_hard_triplet<R>(const Tensor<R>&, const std::vector<std::size_t>&, R); \
  template Tensor<R> part_attention_bce<R>(const Tensor<R>&, const Tensor<R>&, std::size_t);     \
  template Tensor<R> total_loss<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&,         \
                                   const LossWeights&);

IAU_INSTANTIATE_LOSSES(float)
IAU_INSTANTIATE_LOSSES(double)

}  // namespace iau
