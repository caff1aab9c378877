#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "iau/layers.hpp"
#include "iau/ops.hpp"

// Interaction-aggregation-update blocks. Feature maps are channel-last:
// a sequence is F[T x H x W x D]; part features are P[T x N x D]; the flat
// part index is i = t * N + n (frame-major).
namespace iau {

enum class PartMode { kAttention, kEqualPatch };
enum class Arrangement { kCiauStiau, kStiauCiau, kParallel };
// Which sub-blocks a block contains; single-module variants use one residual.
enum class BlockVariant { kFull, kStiauOnly, kCiauOnly };

std::string to_string(PartMode mode);
std::string to_string(Arrangement arrangement);
std::string to_string(BlockVariant variant);
PartMode parse_part_mode(const std::string& text);
Arrangement parse_arrangement(const std::string& text);
BlockVariant parse_block_variant(const std::string& text);

struct StiauOptions {
  std::size_t parts = 4;
  PartMode mode = PartMode::kAttention;
  // Diagonal (self) relations; they make each part relate to N + T - 1 parts.
  bool self_relations = true;
  // Cross-frame relations; false gives the spatial-only variant.
  bool temporal = true;
  // One relation projector for spatial and temporal interactions.
  bool share_relation = true;
};

template <typename Real>
struct AttentionParams {
  Tensor<Real> w_a;  // [D x N]
  Tensor<Real> b_a;  // [N]
};

template <typename Real>
struct StiauWeights {
  Tensor<Real> w_r;           // [2D]
  Tensor<Real> w_r_temporal;  // [2D], only when the projector is not shared
  Tensor<Real> w_pu;          // [2D x D]
  Tensor<Real> w_fu;          // [2D x D]
  AttentionParams<Real> attention;

  static StiauWeights make(std::size_t channels, const StiauOptions& options, std::mt19937_64& rng);
  void collect(const std::string& prefix, NamedTensors<Real>& params) const;
  const Tensor<Real>& temporal_projector() const { return w_r_temporal.defined() ? w_r_temporal : w_r; }
};

template <typename Real>
struct CiauWeights {
  Tensor<Real> w_cu;  // [D x D]
  Tensor<Real> b_cu;  // [D]

  static CiauWeights make(std::size_t channels, std::mt19937_64& rng);
  void collect(const std::string& prefix, NamedTensors<Real>& params) const;
};

template <typename Real>
struct PartDivision {
  Tensor<Real> attention;  // A[T x H x W x N]
  Tensor<Real> parts;      // P[T x N x D]
};

// Attention mode: A = sigmoid(conv1x1(F)), p_ij = sum_hw A_ihwj f_ihw / (HW).
// Equal-patch mode: N = 4 horizontal strips, each average pooled; H must be even.
template <typename Real>
PartDivision<Real> part_division(const Tensor<Real>& features, const AttentionParams<Real>* params,
                                 std::size_t parts, PartMode mode);

// S[T x N x N], (S_t)_jk = w_r . [|p_tj - p_tk|, u]. Diagonal entries are
// evaluated only when `include_self`; otherwise they are 0.
template <typename Real>
Tensor<Real> spatial_interaction(const Tensor<Real>& parts, const Tensor<Real>& global,
                                 const Tensor<Real>& w_r, bool include_self = true);

// Temporal maps [N x T x T], (T_n)_jk = w_r . [|p_jn - p_kn|, u] for j != k.
// The diagonal is 0 (same-frame relations come from S). Undefined for T = 1.
template <typename Real>
Tensor<Real> temporal_interaction(const Tensor<Real>& parts, const Tensor<Real>& global,
                                  const Tensor<Real>& w_r);

struct FlatPart {
  std::size_t frame;
  std::size_t part;
};
inline FlatPart unflatten_part(std::size_t flat, std::size_t parts) {
  return {flat / parts, flat % parts};
}
inline std::size_t flatten_part(std::size_t frame, std::size_t part, std::size_t parts) {
  return frame * parts + part;
}

// TN x TN mask of positions allowed to be nonzero.
Mask relation_structure(std::size_t frames, std::size_t parts, bool self_relations = true,
                        bool temporal = true);

template <typename Real>
struct RelationMaps {
  Tensor<Real> spatial;     // [T x N x N]
  Tensor<Real> temporal;    // [N x T x T], undefined when absent
  Tensor<Real> assembled;   // R [TN x TN]
  Tensor<Real> normalized;  // R_norm [TN x TN]
  Mask structure;           // TN x TN
};

// R from S (same frame) and temporal maps (same part, other frame); 0 elsewhere.
// `temporal` may be undefined only when T = 1 or temporal relations are off.
template <typename Real>
RelationMaps<Real> assemble_relation(const Tensor<Real>& spatial, const Tensor<Real>& temporal,
                                     std::size_t frames, std::size_t parts,
                                     bool self_relations = true);

// Masked row softmax over the structure; fills `normalized`.
template <typename Real>
void normalize_relation(RelationMaps<Real>& maps);

// Z_S = R_norm P, returned as [T x N x D].
template <typename Real>
Tensor<Real> aggregate(const Tensor<Real>& normalized, const Tensor<Real>& parts);

// p_hat_ij = W_pu^T [p_ij, z_ij].
template <typename Real>
Tensor<Real> part_update(const Tensor<Real>& parts, const Tensor<Real>& context,
                         const Tensor<Real>& w_pu);

// E_S[T x D], E_S_t = W_fu^T [mean_j p_hat_tj, u].
template <typename Real>
Tensor<Real> frame_update(const Tensor<Real>& updated_parts, const Tensor<Real>& global,
                          const Tensor<Real>& w_fu);

// Replicates each frame's D-vector over H x W.
template <typename Real>
Tensor<Real> broadcast_frames(const Tensor<Real>& frame_features, std::size_t height,
                              std::size_t width);

template <typename Real>
struct StiauTrace {
  Tensor<Real> attention;
  Tensor<Real> parts;
  Tensor<Real> global;
  RelationMaps<Real> relations;
  Tensor<Real> context;
  Tensor<Real> updated_parts;
  Tensor<Real> frame_features;
  Tensor<Real> output;  // E_S broadcast to T x H x W x D
};

template <typename Real>
StiauTrace<Real> stiau_forward(const Tensor<Real>& features, const StiauWeights<Real>& weights,
                               const StiauOptions& options);

// Spatial-only path for single frames: no temporal branch is evaluated.
template <typename Real>
StiauTrace<Real> siau_forward(const Tensor<Real>& features, const StiauWeights<Real>& weights,
                              const StiauOptions& options);

// F permuted and reshaped to [TD x HW].
template <typename Real>
Tensor<Real> channel_matrix(const Tensor<Real>& features);

// Gram matrix of channel_matrix(F), [TD x TD].
template <typename Real>
Tensor<Real> channel_gram(const Tensor<Real>& features);

// C = row softmax of the channel Gram matrix.
template <typename Real>
Tensor<Real> channel_interaction(const Tensor<Real>& features);

// Z_C = C F, reshaped and permuted back to T x H x W x D.
template <typename Real>
Tensor<Real> channel_aggregate(const Tensor<Real>& relation, const Tensor<Real>& features);

// E_C = W_cu * Z_C + b_cu (1x1 convolution).
template <typename Real>
Tensor<Real> channel_update(const Tensor<Real>& aggregated, const Tensor<Real>& w_cu,
                            const Tensor<Real>& b_cu);

template <typename Real>
struct CiauTrace {
  Tensor<Real> gram;
  Tensor<Real> relation;
  Tensor<Real> aggregated;
  Tensor<Real> output;
};

template <typename Real>
CiauTrace<Real> ciau_forward(const Tensor<Real>& features, const CiauWeights<Real>& weights);

struct IauBlockOptions {
  Arrangement arrangement = Arrangement::kCiauStiau;
  BlockVariant variant = BlockVariant::kFull;
  StiauOptions stiau;
  bool training = true;
};

template <typename Real>
struct IauBlockWeights {
  StiauWeights<Real> stiau;
  CiauWeights<Real> ciau;
  // First and second residual BN; the parallel arrangement and the
  // single-module variants use only `bn_first`. Unused modules stay undefined.
  BatchNormLayer<Real> bn_first;
  BatchNormLayer<Real> bn_second;

  // BN gamma starts at 0 so a fresh block is an identity residual.
  static IauBlockWeights make(std::size_t channels, const IauBlockOptions& options,
                              std::mt19937_64& rng);
  void collect(const std::string& prefix, const IauBlockOptions& options,
               NamedTensors<Real>& params, NamedTensors<Real>& buffers) const;
};

template <typename Real>
struct IauBlockOutput {
  Tensor<Real> output;     // same shape as the input
  Tensor<Real> attention;  // [B*T x H x W x N]
  std::vector<StiauTrace<Real>> stiau;
  std::vector<CiauTrace<Real>> ciau;
};

// x is [B*T x H x W x D] holding B sequences of `frames` frames each. BN runs
// over the whole batch; the modules run per sequence.
template <typename Real>
IauBlockOutput<Real> iau_block_forward(const Tensor<Real>& x, std::size_t frames,
                                       IauBlockWeights<Real>& weights,
                                       const IauBlockOptions& options);

enum class BlockKind { kIau, kNonlocalShape, kSeShape };

struct StageDims {
  std::size_t frames = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t channels = 1;
  std::size_t parts = 4;
};

struct OpCount {
  std::uint64_t interaction_macs = 0;
  std::uint64_t total_macs = 0;
  std::uint64_t params = 0;
  std::uint64_t stiau_params = 0;
  std::uint64_t ciau_params = 0;
  std::uint64_t bn_params = 0;
};

// Closed-form multiply-accumulate and parameter counts. For kIau the
// interaction cost is T N (N + T - 1) 2D; the non-local shape is (THW)^2 D;
// the SE shape uses a reduction ratio of 16.
OpCount count_ops_and_params(const StageDims& dims, BlockKind kind,
                             Arrangement arrangement = Arrangement::kCiauStiau,
                             bool share_relation = true);
OpCount count_ops_and_params(const StageDims& dims, const IauBlockOptions& options);

// Non-local style dense affinity over all T*H*W positions, [THW x THW].
template <typename Real>
Tensor<Real> nonlocal_affinity(const Tensor<Real>& features);

// Multiply-accumulates executed by the STIAU interaction step (spatial and
// temporal relations) on a random input of the given dims.
std::uint64_t measure_stiau_interaction_macs(const StageDims& dims, std::uint64_t seed = 7);
// Multiply-accumulates executed by nonlocal_affinity on a random input.
std::uint64_t measure_nonlocal_interaction_macs(const StageDims& dims, std::uint64_t seed = 7);

}  // namespace iau
