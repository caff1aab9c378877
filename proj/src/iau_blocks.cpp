#include "iau/iau_blocks.hpp"

#include <algorithm>

#include "iau/kernels.hpp"

namespace iau {

std::string to_string(PartMode mode) {
  return mode == PartMode::kAttention ? "attention" : "equal_patch";
}

std::string to_string(Arrangement arrangement) {
  switch (arrangement) {
    case Arrangement::kCiauStiau:
      return "ciau_stiau";
    case Arrangement::kStiauCiau:
      return "stiau_ciau";
    case Arrangement::kParallel:
      return "parallel";
  }
  return "?";
}

PartMode parse_part_mode(const std::string& text) {
  if (text == "attention") return PartMode::kAttention;
  if (text == "equal_patch") return PartMode::kEqualPatch;
  throw ConfigError("unknown part-division mode '" + text + "' (attention|equal_patch)");
}

Arrangement parse_arrangement(const std::string& text) {
  if (text == "ciau_stiau") return Arrangement::kCiauStiau;
  if (text == "stiau_ciau") return Arrangement::kStiauCiau;
  if (text == "parallel") return Arrangement::kParallel;
  throw ConfigError("unknown IAU arrangement '" + text + "' (ciau_stiau|stiau_ciau|parallel)");
}

std::string to_string(BlockVariant variant) {
  switch (variant) {
    case BlockVariant::kFull:
      return "full";
    case BlockVariant::kStiauOnly:
      return "stiau_only";
    case BlockVariant::kCiauOnly:
      return "ciau_only";
  }
  return "?";
}

BlockVariant parse_block_variant(const std::string& text) {
  if (text == "full") return BlockVariant::kFull;
  if (text == "stiau_only") return BlockVariant::kStiauOnly;
  if (text == "ciau_only") return BlockVariant::kCiauOnly;
  throw ConfigError("unknown IAU block variant '" + text + "' (full|stiau_only|ciau_only)");
}

template <typename Real>
StiauWeights<Real> StiauWeights<Real>::make(std::size_t channels, const StiauOptions& options,
                                            std::mt19937_64& rng) {
  const std::size_t d = channels, n = options.parts;
  StiauWeights w;
  w.w_r = uniform_fan_in<Real>({2 * d}, 2 * d, rng);
  if (!options.share_relation) w.w_r_temporal = uniform_fan_in<Real>({2 * d}, 2 * d, rng);
  w.w_pu = uniform_fan_in<Real>({2 * d, d}, 2 * d, rng);
  w.w_fu = uniform_fan_in<Real>({2 * d, d}, 2 * d, rng);
  if (options.mode == PartMode::kAttention) {
    w.attention.w_a = uniform_fan_in<Real>({d, n}, d, rng);
    w.attention.b_a = Tensor<Real>::zeros({n}, true);
  }
  return w;
}

template <typename Real>
void StiauWeights<Real>::collect(const std::string& prefix, NamedTensors<Real>& params) const {
  params.emplace_back(prefix + ".w_r", w_r);
  if (w_r_temporal.defined()) params.emplace_back(prefix + ".w_r_temporal", w_r_temporal);
  if (attention.w_a.defined()) {
    params.emplace_back(prefix + ".w_a", attention.w_a);
    params.emplace_back(prefix + ".b_a", attention.b_a);
  }
  params.emplace_back(prefix + ".w_pu", w_pu);
  params.emplace_back(prefix + ".w_fu", w_fu);
}

template <typename Real>
CiauWeights<Real> CiauWeights<Real>::make(std::size_t channels, std::mt19937_64& rng) {
  return {uniform_fan_in<Real>({channels, channels}, channels, rng),
          Tensor<Real>::zeros({channels}, true)};
}

template <typename Real>
void CiauWeights<Real>::collect(const std::string& prefix, NamedTensors<Real>& params) const {
  params.emplace_back(prefix + ".w_cu", w_cu);
  params.emplace_back(prefix + ".b_cu", b_cu);
}

namespace {

void require_sequence(const Shape& s) {
  if (s.size() != 4) throw DimensionError("expected a T x H x W x D feature map, got " + to_string(s));
}

// One relation scalar per (a, b) pair: w_r . [|x_a - x_b|, u].
template <typename Real>
Tensor<Real> relation_scores(const Tensor<Real>& rows, const Tensor<Real>& global,
                             const Tensor<Real>& w_r, const std::vector<std::size_t>& first,
                             const std::vector<std::size_t>& second) {
  const std::size_t d = rows.dim(1);
  if (global.numel() != d || w_r.numel() != 2 * d) {
    throw DimensionError("relation projector expects u of " + std::to_string(d) + " and w_r of " +
                         std::to_string(2 * d) + " values, got " + to_string(global.shape()) +
                         " and " + to_string(w_r.shape()));
  }
  auto diff = absolute(sub(gather_rows(rows, first), gather_rows(rows, second)));
  auto u = broadcast_to(reshape(global, Shape{1, d}), Shape{first.size(), d});
  auto features = concat<Real>({diff, u}, 1);
  return matmul(features, reshape(w_r, Shape{2 * d, 1}));
}

}  // namespace

template <typename Real>
PartDivision<Real> part_division(const Tensor<Real>& features, const AttentionParams<Real>* params,
                                 std::size_t parts, PartMode mode) {
  require_sequence(features.shape());
  const std::size_t t = features.dim(0), h = features.dim(1), w = features.dim(2),
                    d = features.dim(3);
  if (parts < 2) throw ConfigError("part division needs at least 2 parts");
  auto flat = reshape(features, Shape{t, h * w, d});
  PartDivision<Real> out;
  if (mode == PartMode::kAttention) {
    if (params == nullptr || !params->w_a.defined()) {
      throw ConfigError("attention part division requires attention parameters");
    }
    if (params->w_a.dim(1) != parts) throw DimensionError("attention weights produce " + std::to_string(params->w_a.dim(1)) + " maps, expected " + std::to_string(parts));
    out.attention = sigmoid(conv1x1(features, params->w_a, params->b_a));
    auto a = reshape(out.attention, Shape{t, h * w, parts});
    out.parts = scale(bmm(a, flat, true, false), Real(1) / static_cast<Real>(h * w));
    return out;
  }
  if (parts != 4) throw ConfigError("equal_patch part division requires N = 4, got " + std::to_string(parts));
  if (h % 2 != 0) throw ConfigError("equal_patch part division requires an even height, got " + std::to_string(h));
  if (h < parts) throw ConfigError("equal_patch part division requires height >= N");
  std::vector<Real> strip(t * h * w * parts, Real(0));
  std::vector<Real> weights(t * h * w * parts, Real(0));
  for (std::size_t k = 0; k < parts; ++k) {
    const std::size_t lo = k * h / parts, hi = (k + 1) * h / parts;
    const Real inv_area = Real(1) / static_cast<Real>((hi - lo) * w);
    for (std::size_t f = 0; f < t; ++f)
      for (std::size_t y = lo; y < hi; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t i = ((f * h + y) * w + x) * parts + k;
          strip[i] = Real(1);
          weights[i] = inv_area;
        }
  }
  out.attention = Tensor<Real>(Shape{t, h, w, parts}, std::move(strip));
  Tensor<Real> pool(Shape{t, h * w, parts}, std::move(weights));
  out.parts = bmm(pool, flat, true, false);
  return out;
}

template <typename Real>
Tensor<Real> spatial_interaction(const Tensor<Real>& parts, const Tensor<Real>& global,
                                 const Tensor<Real>& w_r, bool include_self) {
  if (parts.rank() != 3) throw DimensionError("part features must be T x N x D, got " + to_string(parts.shape()));
  const std::size_t t = parts.dim(0), n = parts.dim(1), d = parts.dim(2);
  std::vector<std::size_t> first, second;
  std::vector<std::ptrdiff_t> index(t * n * n, -1);
  for (std::size_t f = 0; f < t; ++f)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) {
        if (j == k && !include_self) continue;
        index[(f * n + j) * n + k] = static_cast<std::ptrdiff_t>(first.size());
        first.push_back(f * n + j);
        second.push_back(f * n + k);
      }
  auto scores = relation_scores(reshape(parts, Shape{t * n, d}), global, w_r, first, second);
  return gather_flat(scores, index, Shape{t, n, n});
}

template <typename Real>
Tensor<Real> temporal_interaction(const Tensor<Real>& parts, const Tensor<Real>& global,
                                  const Tensor<Real>& w_r) {
  if (parts.rank() != 3) throw DimensionError("part features must be T x N x D, got " + to_string(parts.shape()));
  const std::size_t t = parts.dim(0), n = parts.dim(1), d = parts.dim(2);
  if (t < 2) return {};
  std::vector<std::size_t> first, second;
  std::vector<std::ptrdiff_t> index(n * t * t, -1);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t k = 0; k < t; ++k) {
        if (j == k) continue;
        index[(p * t + j) * t + k] = static_cast<std::ptrdiff_t>(first.size());
        first.push_back(j * n + p);
        second.push_back(k * n + p);
      }
  auto scores = relation_scores(reshape(parts, Shape{t * n, d}), global, w_r, first, second);
  return gather_flat(scores, index, Shape{n, t, t});
}

Mask relation_structure(std::size_t frames, std::size_t parts, bool self_relations,
                        bool temporal) {
  const std::size_t m = frames * parts;
  Mask mask(m * m, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const auto a = unflatten_part(i, parts), b = unflatten_part(j, parts);
      bool active = false;
      if (a.frame == b.frame) active = a.part != b.part || self_relations;
      else if (a.part == b.part) active = temporal;
      mask[i * m + j] = active ? 1 : 0;
    }
  return mask;
}

template <typename Real>
RelationMaps<Real> assemble_relation(const Tensor<Real>& spatial, const Tensor<Real>& temporal,
                                     std::size_t frames, std::size_t parts, bool self_relations) {
  if (spatial.shape() != Shape{frames, parts, parts}) {
    throw ContractError("assemble_relation: expected " + std::to_string(frames) +
                        " spatial maps of " + std::to_string(parts) + "x" + std::to_string(parts) +
                        ", got " + to_string(spatial.shape()));
  }
  const bool has_temporal = temporal.defined();
  if (has_temporal && temporal.shape() != Shape{parts, frames, frames}) {
    throw ContractError("assemble_relation: expected " + std::to_string(parts) +
                        " temporal maps of " + std::to_string(frames) + "x" +
                        std::to_string(frames) + ", got " + to_string(temporal.shape()));
  }
  if (has_temporal && frames < 2) throw ContractError("assemble_relation: temporal maps given for a single frame");
  RelationMaps<Real> maps;
  maps.spatial = spatial;
  maps.temporal = temporal;
  maps.structure = relation_structure(frames, parts, self_relations, has_temporal);
  const std::size_t m = frames * parts;
  const auto spatial_size = static_cast<std::ptrdiff_t>(spatial.numel());
  std::vector<std::ptrdiff_t> index(m * m, -1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (!maps.structure[i * m + j]) continue;
      const auto a = unflatten_part(i, parts), b = unflatten_part(j, parts);
      if (a.frame == b.frame)
        index[i * m + j] = static_cast<std::ptrdiff_t>((a.frame * parts + a.part) * parts + b.part);
      else
        index[i * m + j] =
            spatial_size + static_cast<std::ptrdiff_t>((a.part * frames + a.frame) * frames + b.frame);
    }
  Tensor<Real> source = reshape(spatial, Shape{spatial.numel()});
  if (has_temporal) source = concat<Real>({source, reshape(temporal, Shape{temporal.numel()})}, 0);
  maps.assembled = gather_flat(source, index, Shape{m, m});
  return maps;
}

template <typename Real>
void normalize_relation(RelationMaps<Real>& maps) {
  maps.normalized = masked_softmax_rows(maps.assembled, maps.structure);
}

template <typename Real>
Tensor<Real> aggregate(const Tensor<Real>& normalized, const Tensor<Real>& parts) {
  if (parts.rank() != 3) throw DimensionError("part features must be T x N x D, got " + to_string(parts.shape()));
  const std::size_t t = parts.dim(0), n = parts.dim(1), d = parts.dim(2);
  auto z = matmul(normalized, reshape(parts, Shape{t * n, d}));
  return reshape(z, Shape{t, n, d});
}

template <typename Real>
Tensor<Real> part_update(const Tensor<Real>& parts, const Tensor<Real>& context,
                         const Tensor<Real>& w_pu) {
  if (parts.shape() != context.shape()) throw DimensionError("part_update: P and Z_S shapes differ");
  const std::size_t t = parts.dim(0), n = parts.dim(1), d = parts.dim(2);
  auto joined = reshape(concat<Real>({parts, context}, 2), Shape{t * n, 2 * d});
  return reshape(matmul(joined, w_pu), Shape{t, n, w_pu.dim(1)});
}

template <typename Real>
Tensor<Real> frame_update(const Tensor<Real>& updated_parts, const Tensor<Real>& global,
                          const Tensor<Real>& w_fu) {
  const std::size_t t = updated_parts.dim(0), d = updated_parts.dim(2);
  if (global.numel() != d) throw DimensionError("frame_update: u does not match part channels");
  auto frame_mean = mean_axis(updated_parts, 1);
  auto u = broadcast_to(reshape(global, Shape{1, d}), Shape{t, d});
  return matmul(concat<Real>({frame_mean, u}, 1), w_fu);
}

template <typename Real>
Tensor<Real> broadcast_frames(const Tensor<Real>& frame_features, std::size_t height,
                              std::size_t width) {
  const std::size_t t = frame_features.dim(0), d = frame_features.dim(1);
  return broadcast_to(reshape(frame_features, Shape{t, 1, 1, d}), Shape{t, height, width, d});
}

template <typename Real>
StiauTrace<Real> stiau_forward(const Tensor<Real>& features, const StiauWeights<Real>& weights,
                               const StiauOptions& options) {
  require_sequence(features.shape());
  const std::size_t t = features.dim(0), h = features.dim(1), w = features.dim(2);
  StiauTrace<Real> trace;
  auto division = part_division(features, &weights.attention, options.parts, options.mode);
  trace.attention = division.attention;
  trace.parts = division.parts;
  trace.global = global_average_pool(features);
  auto spatial = spatial_interaction(trace.parts, trace.global, weights.w_r, options.self_relations);
  Tensor<Real> temporal;
  if (options.temporal && t > 1)
    temporal = temporal_interaction(trace.parts, trace.global, weights.temporal_projector());
  trace.relations = assemble_relation(spatial, temporal, t, options.parts, options.self_relations);
  normalize_relation(trace.relations);
  trace.context = aggregate(trace.relations.normalized, trace.parts);
  trace.updated_parts = part_update(trace.parts, trace.context, weights.w_pu);
  trace.frame_features = frame_update(trace.updated_parts, trace.global, weights.w_fu);
  trace.output = broadcast_frames(trace.frame_features, h, w);
  return trace;
}

template <typename Real>
StiauTrace<Real> siau_forward(const Tensor<Real>& features, const StiauWeights<Real>& weights,
                              const StiauOptions& options) {
  require_sequence(features.shape());
  const std::size_t t = features.dim(0), h = features.dim(1), w = features.dim(2),
                    n = options.parts;
  StiauTrace<Real> trace;
  auto division = part_division(features, &weights.attention, n, options.mode);
  trace.attention = division.attention;
  trace.parts = division.parts;
  trace.global = global_average_pool(features);
  auto spatial = spatial_interaction(trace.parts, trace.global, weights.w_r, options.self_relations);
  // Each frame's N x N map is normalized and applied on its own.
  Mask frame_mask;
  const Mask one = relation_structure(1, n, options.self_relations, false);
  for (std::size_t f = 0; f < t; ++f) frame_mask.insert(frame_mask.end(), one.begin(), one.end());
  trace.relations.spatial = spatial;
  trace.relations.structure = one;
  trace.relations.assembled = reshape(spatial, Shape{t * n, n});
  trace.relations.normalized = masked_softmax_rows(trace.relations.assembled, frame_mask);
  trace.context = bmm(reshape(trace.relations.normalized, Shape{t, n, n}), trace.parts, false, false);
  trace.updated_parts = part_update(trace.parts, trace.context, weights.w_pu);
  trace.frame_features = frame_update(trace.updated_parts, trace.global, weights.w_fu);
  trace.output = broadcast_frames(trace.frame_features, h, w);
  return trace;
}

template <typename Real>
Tensor<Real> channel_matrix(const Tensor<Real>& features) {
  require_sequence(features.shape());
  const std::size_t t = features.dim(0), h = features.dim(1), w = features.dim(2),
                    d = features.dim(3);
  return reshape(permute(features, {0, 3, 1, 2}), Shape{t * d, h * w});
}

template <typename Real>
Tensor<Real> channel_gram(const Tensor<Real>& features) {
  auto x = channel_matrix(features);
  return matmul_nt(x, x);
}

template <typename Real>
Tensor<Real> channel_interaction(const Tensor<Real>& features) {
  return softmax_rows(channel_gram(features));
}

template <typename Real>
Tensor<Real> channel_aggregate(const Tensor<Real>& relation, const Tensor<Real>& features) {
  require_sequence(features.shape());
  const std::size_t t = features.dim(0), h = features.dim(1), w = features.dim(2),
                    d = features.dim(3);
  if (relation.shape() != Shape{t * d, t * d}) {
    throw DimensionError("channel_aggregate: relation " + to_string(relation.shape()) +
                         " does not match " + to_string(features.shape()));
  }
  auto z = matmul(relation, channel_matrix(features));
  return permute(reshape(z, Shape{t, d, h, w}), {0, 2, 3, 1});
}

template <typename Real>
Tensor<Real> channel_update(const Tensor<Real>& aggregated, const Tensor<Real>& w_cu,
                            const Tensor<Real>& b_cu) {
  return conv1x1(aggregated, w_cu, b_cu);
}

template <typename Real>
CiauTrace<Real> ciau_forward(const Tensor<Real>& features, const CiauWeights<Real>& weights) {
  CiauTrace<Real> trace;
  auto x = channel_matrix(features);
  trace.gram = matmul_nt(x, x);
  trace.relation = softmax_rows(trace.gram);
  trace.aggregated = channel_aggregate(trace.relation, features);
  trace.output = channel_update(trace.aggregated, weights.w_cu, weights.b_cu);
  return trace;
}

namespace {
bool has_stiau(const IauBlockOptions& o) { return o.variant != BlockVariant::kCiauOnly; }
bool has_ciau(const IauBlockOptions& o) { return o.variant != BlockVariant::kStiauOnly; }
bool has_second_bn(const IauBlockOptions& o) {
  return o.variant == BlockVariant::kFull && o.arrangement != Arrangement::kParallel;
}
}  // namespace

template <typename Real>
IauBlockWeights<Real> IauBlockWeights<Real>::make(std::size_t channels,
                                                  const IauBlockOptions& options,
                                                  std::mt19937_64& rng) {
  // Both modules are always drawn so every variant sees the same initial values.
  IauBlockWeights w;
  w.stiau = StiauWeights<Real>::make(channels, options.stiau, rng);
  w.ciau = CiauWeights<Real>::make(channels, rng);
  if (!has_stiau(options)) w.stiau = {};
  if (!has_ciau(options)) w.ciau = {};
  w.bn_first = BatchNormLayer<Real>::make(channels, Real(0));
  if (has_second_bn(options)) w.bn_second = BatchNormLayer<Real>::make(channels, Real(0));
  return w;
}

template <typename Real>
void IauBlockWeights<Real>::collect(const std::string& prefix, const IauBlockOptions& options,
                                    NamedTensors<Real>& params, NamedTensors<Real>& buffers) const {
  if (has_stiau(options)) stiau.collect(prefix + ".stiau", params);
  if (has_ciau(options)) ciau.collect(prefix + ".ciau", params);
  bn_first.collect(prefix + ".bn_first", params, buffers);
  if (has_second_bn(options)) bn_second.collect(prefix + ".bn_second", params, buffers);
}

template <typename Real>
IauBlockOutput<Real> iau_block_forward(const Tensor<Real>& x, std::size_t frames,
                                       IauBlockWeights<Real>& weights,
                                       const IauBlockOptions& options) {
  require_sequence(x.shape());
  if (frames == 0 || x.dim(0) % frames != 0) {
    throw DimensionError("iau_block_forward: leading axis " + std::to_string(x.dim(0)) +
                         " is not a multiple of T = " + std::to_string(frames));
  }
  const std::size_t sequences = x.dim(0) / frames;
  IauBlockOutput<Real> out;
  std::vector<Tensor<Real>> attention;

  auto run_ciau = [&](const Tensor<Real>& in) {
    std::vector<Tensor<Real>> pieces;
    for (std::size_t b = 0; b < sequences; ++b) {
      out.ciau.push_back(ciau_forward(narrow(in, b * frames, frames), weights.ciau));
      pieces.push_back(out.ciau.back().output);
    }
    return concat(pieces, 0);
  };
  auto run_stiau = [&](const Tensor<Real>& in) {
    std::vector<Tensor<Real>> pieces;
    for (std::size_t b = 0; b < sequences; ++b) {
      out.stiau.push_back(stiau_forward(narrow(in, b * frames, frames), weights.stiau, options.stiau));
      pieces.push_back(out.stiau.back().output);
      attention.push_back(out.stiau.back().attention);
    }
    return concat(pieces, 0);
  };
  auto residual = [&](BatchNormLayer<Real>& bn, const Tensor<Real>& e, const Tensor<Real>& in) {
    return add(bn.forward(e, options.training), in);
  };

  if (options.variant == BlockVariant::kStiauOnly) {
    out.output = residual(weights.bn_first, run_stiau(x), x);
  } else if (options.variant == BlockVariant::kCiauOnly) {
    out.output = residual(weights.bn_first, run_ciau(x), x);
  } else {
    switch (options.arrangement) {
      case Arrangement::kCiauStiau: {
        auto y1 = residual(weights.bn_first, run_ciau(x), x);
        out.output = residual(weights.bn_second, run_stiau(y1), y1);
        break;
      }
      case Arrangement::kStiauCiau: {
        auto y1 = residual(weights.bn_first, run_stiau(x), x);
        out.output = residual(weights.bn_second, run_ciau(y1), y1);
        break;
      }
      case Arrangement::kParallel:
        out.output = residual(weights.bn_first, add(run_ciau(x), run_stiau(x)), x);
        break;
    }
  }
  if (!attention.empty()) out.attention = concat(attention, 0);
  return out;
}

OpCount count_ops_and_params(const StageDims& dims, BlockKind kind, Arrangement arrangement,
                             bool share_relation) {
  const std::uint64_t t = dims.frames, h = dims.height, w = dims.width, d = dims.channels,
                      n = dims.parts;
  if (!t || !h || !w || !d || !n) throw ConfigError("count_ops_and_params: dimensions must be positive");
  const std::uint64_t positions = t * h * w;
  OpCount c;
  switch (kind) {
    case BlockKind::kIau: {
      c.stiau_params = 2 * d + (share_relation ? 0 : 2 * d) + d * n + n + 2 * (2 * d * d);
      c.ciau_params = d * d + d;
      c.bn_params = (arrangement == Arrangement::kParallel ? 1 : 2) * 2 * d;
      c.params = c.stiau_params + c.ciau_params + c.bn_params;
      c.interaction_macs = t * n * (n + t - 1) * 2 * d;
      const std::uint64_t td = t * d, tn = t * n;
      c.total_macs = positions * d * n          // attention conv
                     + positions * n * d        // attention pooling
                     + c.interaction_macs       // relations
                     + tn * tn * d              // aggregation
                     + tn * 2 * d * d           // part update
                     + t * 2 * d * d            // frame update
                     + 2 * td * td * h * w      // channel Gram and aggregation
                     + positions * d * d;       // channel update
      break;
    }
    case BlockKind::kNonlocalShape: {
      c.params = 4 * (d * d + d) + 2 * d;
      c.interaction_macs = positions * positions * d;
      c.total_macs = 4 * positions * d * d + 2 * c.interaction_macs;
      break;
    }
    case BlockKind::kSeShape: {
      const std::uint64_t r = std::max<std::uint64_t>(1, d / 16);
      c.params = d * r + r + r * d + d;
      c.interaction_macs = 2 * d * r;
      c.total_macs = positions * d + c.interaction_macs + positions * d;
      break;
    }
  }
  return c;
}

OpCount count_ops_and_params(const StageDims& dims, const IauBlockOptions& options) {
  OpCount c = count_ops_and_params(dims, BlockKind::kIau, options.arrangement,
                                   options.stiau.share_relation);
  if (options.stiau.mode == PartMode::kEqualPatch) c.stiau_params -= dims.channels * dims.parts + dims.parts;
  if (options.variant == BlockVariant::kFull) {
    c.params = c.stiau_params + c.ciau_params + c.bn_params;
    return c;
  }
  c.bn_params = 2 * dims.channels;
  if (options.variant == BlockVariant::kStiauOnly) c.ciau_params = 0;
  else {
    c.stiau_params = 0;
    c.interaction_macs = 0;
  }
  c.params = c.stiau_params + c.ciau_params + c.bn_params;
  return c;
}

template <typename Real>
Tensor<Real> nonlocal_affinity(const Tensor<Real>& features) {
  require_sequence(features.shape());
  const std::size_t d = features.dim(3);
  auto x = reshape(features, Shape{features.numel() / d, d});
  return matmul_nt(x, x);
}

namespace {
TensorF random_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return TensorF(std::move(shape), std::move(v));
}
}  // namespace

std::uint64_t measure_stiau_interaction_macs(const StageDims& dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NoGradGuard guard;
  auto parts = random_tensor({dims.frames, dims.parts, dims.channels}, rng);
  auto global = random_tensor({dims.channels}, rng);
  auto w_r = random_tensor({2 * dims.channels}, rng);
  kernels::reset_mac_count();
  auto s = spatial_interaction(parts, global, w_r, true);
  auto tt = temporal_interaction(parts, global, w_r);
  return kernels::mac_count();
}

std::uint64_t measure_nonlocal_interaction_macs(const StageDims& dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NoGradGuard guard;
  auto f = random_tensor({dims.frames, dims.height, dims.width, dims.channels}, rng);
  kernels::reset_mac_count();
  auto affinity = nonlocal_affinity(f);
  return kernels::mac_count();
}

#define IAU_INSTANTIATE_BLOCKS(R)                                                                  \
  template struct StiauWeights<R>;                                                                 \
  template struct CiauWeights<R>;                                                                  \
  template struct IauBlockWeights<R>;                                                              \
  template PartDivision<R> part_division<R>(const Tensor<R>&, const AttentionParams<R>*,           \
                                            std::size_t, PartMode);                                \
  template Tensor<R> spatial_interaction<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&,  \
                                            bool);                                                 \
  template Tensor<R> temporal_interaction<R>(const Tensor<R>&, const Tensor<R>&,                   \
                                             const Tensor<R>&);                                    \
  template RelationMaps<R> assemble_relation<R>(const Tensor<R>&, const Tensor<R>&, std::size_t,   \
                                                std::size_t, bool);                                \
  template void normalize_relation<R>(RelationMaps<R>&);                                           \
  template Tensor<R> aggregate<R>(const Tensor<R>&, const Tensor<R>&);                             \
  template Tensor<R> part_update<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&);         \
  template Tensor<R> frame_update<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&);        \
  template Tensor<R> broadcast_frames<R>(const Tensor<R>&, std::size_t, std::size_t);              \
  template StiauTrace<R> stiau_forward<R>(const Tensor<R>&, const StiauWeights<R>&,                \
                                          const StiauOptions&);                                    \
  template StiauTrace<R> siau_forward<R>(const Tensor<R>&, const StiauWeights<R>&,                 \
                                         const StiauOptions&);                                     \
  template Tensor<R> channel_matrix<R>(const Tensor<R>&);                                          \
  template Tensor<R> channel_gram<R>(const Tensor<R>&);                                            \
  template Tensor<R> channel_interaction<R>(const Tensor<R>&);                                     \
  template Tensor<R> channel_aggregate<R>(const Tensor<R>&, const Tensor<R>&);                     \
  template Tensor<R> channel_update<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&);      \
  template CiauTrace<R> ciau_forward<R>(const Tensor<R>&, const CiauWeights<R>&);                  \
  template IauBlockOutput<R> iau_block_forward<R>(const Tensor<R>&, std::size_t,                   \
                                                  IauBlockWeights<R>&, const IauBlockOptions&);    \
  template Tensor<R> nonlocal_affinity<R>(const Tensor<R>&);

IAU_INSTANTIATE_BLOCKS(float)
IAU_INSTANTIATE_BLOCKS(double)

}  // namespace iau
