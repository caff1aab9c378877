#pragma once

#include <cstddef>
#include <vector>

#include "iau/ops.hpp"

namespace iau {

struct LossWeights {
  double lambda1 = 1.0;  // triplet
  double lambda2 = 0.5;  // part attention
  double margin = 0.3;

  void validate() const;
};

// Mean over the batch of -log softmax(logits)[target].
template <typename Real>
Tensor<Real> identity_loss(const Tensor<Real>& logits, const std::vector<std::size_t>& targets) {
  return cross_entropy(logits, targets);
}

// 1 - cos(f, g). Zero vectors throw ContractError.
template <typename Real>
Tensor<Real> cosine_distance(const Tensor<Real>& f, const Tensor<Real>& g);

// B x B matrix of cosine distances between the rows of f[B x D].
template <typename Real>
Tensor<Real> cosine_distance_matrix(const Tensor<Real>& features);

// Batch-hard triplet loss on cosine distance: for each anchor the farthest
// positive and nearest negative within the batch, hinge at `margin`, summed
// over anchors and divided by the batch size. Every label must occur the same
// number of times K >= 2 and at least 2 labels must be present.
template <typename Real>
Tensor<Real> batch_hard_triplet(const Tensor<Real>& features, const std::vector<std::size_t>& labels,
                                Real margin);

// Binary cross entropy between attention maps and part masks, both
// [B*T x H x W x N] for `sequences` sequences: the per-sequence mean over
// T*H*W*N positions, summed over sequences. Probabilities are clamped to
// [1e-6, 1 - 1e-6].
template <typename Real>
Tensor<Real> part_attention_bce(const Tensor<Real>& attention, const Tensor<Real>& masks,
                                std::size_t sequences);

inline constexpr double kBceClamp = 1e-6;

// L_cls + lambda1 L_tri + lambda2 L_p.
template <typename Real>
Tensor<Real> total_loss(const Tensor<Real>& cls, const Tensor<Real>& tri, const Tensor<Real>& part,
                        const LossWeights& weights);

}  // namespace iau
