#include "iau/verification.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <random>

#include "iau/losses.hpp"
#include "iau/model.hpp"

namespace iau::verify {

namespace {

TensorD uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return TensorD(std::move(shape), std::move(v), true);
}

}  // namespace

std::vector<std::size_t> sample_coords(std::size_t size, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> all(size);
  std::iota(all.begin(), all.end(), 0);
  if (count == 0 || count >= size) return all;
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

double worst_error(const std::vector<GradCheckEntry>& entries) {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.result.max_rel_error);
  return worst;
}

std::vector<GradCheckEntry> check_ops(const SuiteOptions& options, int trials) {
  std::mt19937_64 rng(options.seed);
  std::vector<GradCheckEntry> out;
  using Fn = std::function<TensorD(const TensorD&)>;
  for (int trial = 0; trial < trials; ++trial) {
    auto other = uniform({3, 4}, rng);
    auto square = uniform({4, 4}, rng);
    auto bias = uniform({4}, rng);
    auto beta = uniform({4}, rng);
    auto kernel = uniform({9, 2}, rng);
    auto kernel_bias = uniform({2}, rng);
    auto masks = uniform({3, 4}, rng, 0.0, 1.0);
    for (auto* t : {&other, &square, &bias, &beta, &kernel, &kernel_bias, &masks}) t->set_requires_grad(false);
    auto rm = TensorD::zeros({4});
    auto rv = TensorD::full({4}, 1.0);
    Mask mask(12, 1);
    mask[static_cast<std::size_t>(trial) % 12] = 0;
    std::vector<TensorD> heads;
    for (int i = 0; i < 4; ++i) heads.push_back(uniform({3, 4}, rng));
    auto head = [&](const TensorD& y) { return sum(mul(y, heads[0])); };
    auto conv_head = uniform({1, 3, 4, 2}, rng);
    auto conv_head_strided = uniform({1, 2, 2, 2}, rng);
    std::vector<std::pair<std::string, Fn>> cases = {
        {"add", [&](const TensorD& x) { return head(add(x, other)); }},
        {"sub", [&](const TensorD& x) { return head(sub(other, x)); }},
        {"mul", [&](const TensorD& x) { return head(mul(x, x)); }},
        {"scale", [&](const TensorD& x) { return head(scale(x, 1.7)); }},
        {"add_scalar", [&](const TensorD& x) { return head(mul(add_scalar(x, 0.5), x)); }},
        {"sigmoid", [&](const TensorD& x) { return head(sigmoid(x)); }},
        {"relu", [&](const TensorD& x) { return head(relu(x)); }},
        {"absolute", [&](const TensorD& x) { return head(absolute(x)); }},
        {"add_bias", [&](const TensorD& x) { return head(mul(add_bias(x, bias), x)); }},
        {"mean", [&](const TensorD& x) { return mean(mul(x, x)); }},
        {"mean_axis", [&](const TensorD& x) { return sum(mul(mean_axis(mul(x, x), 0), bias)); }},
        {"reshape", [&](const TensorD& x) { return head(reshape(mul(x, x), {3, 4})); }},
        {"permute", [&](const TensorD& x) {
           return head(reshape(permute(reshape(x, {3, 2, 2}), {2, 0, 1}), {3, 4}));
         }},
        {"concat", [&](const TensorD& x) {
           return sum(mul(concat<double>({x, other}, 1), concat<double>({heads[0], heads[1]}, 1)));
         }},
        {"narrow", [&](const TensorD& x) { return sum(mul(narrow(x, 1, 2), narrow(heads[0], 0, 2))); }},
        {"broadcast_to", [&](const TensorD& x) { return head(broadcast_to(narrow(x, 0, 1), {3, 4})); }},
        {"gather_rows", [&](const TensorD& x) { return head(gather_rows(x, {2, 0, 2})); }},
        {"gather_flat", [&](const TensorD& x) {
           auto picked = gather_flat(x, {0, -1, 5, 5, 11, 3}, {2, 3});
           return sum(mul(picked, reshape(narrow(reshape(heads[1], {6, 2}), 0, 3), {2, 3})));
         }},
        {"matmul", [&](const TensorD& x) { return head(matmul(x, square)); }},
        {"matmul_nt", [&](const TensorD& x) { return sum(mul(matmul_nt(x, x), matmul_nt(other, heads[1]))); }},
        {"bmm", [&](const TensorD& x) {
           auto x3 = reshape(x, {1, 3, 4});
           auto o3 = reshape(other, {1, 3, 4});
           auto s3 = reshape(square, {1, 4, 4});
           auto tn = sum(mul(bmm(x3, o3, true, false), s3));
           auto nt = sum(mul(bmm(x3, s3, false, true), o3));
           auto nn = sum(mul(bmm(x3, s3, false, false), o3));
           auto tt = sum(mul(bmm(s3, x3, true, true), reshape(matmul_nt(square, other).detach(), {1, 4, 3})));
           return add(add(tn, nt), add(nn, tt));
         }},
        {"masked_softmax_rows", [&](const TensorD& x) { return head(masked_softmax_rows(x, mask)); }},
        {"softmax_rows", [&](const TensorD& x) { return head(softmax_rows(x)); }},
        {"l2_normalize_rows", [&](const TensorD& x) { return head(l2_normalize_rows(x)); }},
        {"conv1x1", [&](const TensorD& x) { return head(conv1x1(x, square, bias)); }},
        {"conv2d", [&](const TensorD& x) {
           return sum(mul(conv2d(reshape(x, {1, 3, 4, 1}), kernel, kernel_bias, 3, 1, 1), conv_head));
         }},
        {"conv2d_stride2", [&](const TensorD& x) {
           return sum(mul(conv2d(reshape(x, {1, 3, 4, 1}), kernel, kernel_bias, 3, 2, 1), conv_head_strided));
         }},
        {"global_average_pool", [&](const TensorD& x) {
           return sum(mul(global_average_pool(reshape(mul(x, x), {1, 3, 1, 4})), bias));
         }},
        {"batch_norm", [&](const TensorD& x) { return head(batch_norm(x, bias, beta, rm, rv, {})); }},
        {"cross_entropy", [&](const TensorD& x) { return cross_entropy(x, {1, 3, 0}); }},
        {"binary_cross_entropy", [&](const TensorD& x) {
           return binary_cross_entropy_sum(sigmoid(x), masks, 1e-6);
         }},
    };
    for (auto& [name, fn] : cases) {
      auto x = uniform({3, 4}, rng);
      out.push_back({"op", name, finite_diff_check(fn, x, options.step)});
    }
  }
  return out;
}

std::vector<GradCheckEntry> check_block(const SuiteOptions& options, Arrangement arrangement,
                                        PartMode mode, BlockVariant variant) {
  std::mt19937_64 rng(options.seed);
  constexpr std::size_t kSequences = 2, kFrames = 3, kHeight = 4, kWidth = 3, kChannels = 4;
  IauBlockOptions block;
  block.arrangement = arrangement;
  block.variant = variant;
  block.stiau.mode = mode;
  block.stiau.parts = mode == PartMode::kEqualPatch ? 4 : 2;
  auto weights = IauBlockWeights<double>::make(kChannels, block, rng);
  for (auto* bn : {&weights.bn_first, &weights.bn_second}) {
    if (!bn->gamma.defined()) continue;
    bn->gamma = uniform({kChannels}, rng, 0.5, 1.5);
    bn->beta = uniform({kChannels}, rng, -0.5, 0.5);
    bn->running_mean = uniform({kChannels}, rng, -0.5, 0.5);
    bn->running_var = uniform({kChannels}, rng, 0.5, 2.0);
  }
  block.training = options.bn_training;
  auto x = uniform({kSequences * kFrames, kHeight, kWidth, kChannels}, rng);
  auto head = uniform(x.shape(), rng);
  head.set_requires_grad(false);
  auto loss = [&] { return sum(mul(iau_block_forward(x, kFrames, weights, block).output, head)); };

  NamedTensors<double> params, buffers;
  weights.collect("block", block, params, buffers);
  params.emplace_back("input", x);
  std::vector<GradCheckEntry> out;
  std::uint64_t salt = 0;
  for (auto& [name, tensor] : params) {
    if (options.bn_training && name == "block.ciau.b_cu") continue;
    auto coords = sample_coords(tensor.numel(), options.coords_per_param, options.seed + ++salt);
    // With one projector the u half adds the same constant to every active
    // entry of a relation row, which the row softmax cancels.
    if (name == "block.stiau.w_r" && block.stiau.share_relation)
      std::erase_if(coords, [&](std::size_t i) { return i >= kChannels; });
    out.push_back({"block", name, check_gradient(loss, tensor, options.step, coords)});
  }
  return out;
}

std::vector<GradCheckEntry> check_model(const SuiteOptions& options, Arrangement arrangement,
                                        PartMode mode) {
  std::mt19937_64 rng(options.seed);
  ModelConfig config;
  config.stages = {{4, 1, 2, false}, {6, 2, 2, true}};
  config.parts = mode == PartMode::kEqualPatch ? 4 : 2;
  config.frames = 2;
  config.num_ids = 2;
  config.image_height = 8;
  config.image_width = 6;
  config.part_mode = mode;
  config.arrangement = arrangement;
  auto model = ModelD::build(config, options.seed);
  for (auto& [name, t] : model.parameters())
    if (name.find(".iau.bn_") != std::string::npos && name.ends_with(".gamma"))
      std::ranges::copy(uniform(t.shape(), rng, 0.5, 1.5).data(), t.mutable_data().begin());
  for (auto& [name, t] : model.buffers()) {
    auto fill = name.ends_with("running_var") ? uniform(t.shape(), rng, 0.5, 2.0) : uniform(t.shape(), rng, -0.3, 0.3);
    std::ranges::copy(fill.data(), t.mutable_data().begin());
  }
  constexpr std::size_t kBatch = 4;
  const std::vector<std::size_t> labels = {0, 0, 1, 1};
  auto input = uniform({kBatch, config.frames, config.image_height, config.image_width, 3}, rng, 0.0, 1.0);
  const auto dims = iau_stage_dims(config).at(1);
  TensorD masks;
  if (mode == PartMode::kAttention)
    masks = uniform({kBatch * config.frames, dims.height, dims.width, config.parts}, rng, 0.0, 1.0);
  const LossWeights weights;
  auto loss = [&] {
    auto out = model.forward(input, options.bn_training);
    auto cls = identity_loss(out.logits, labels);
    auto tri = batch_hard_triplet(out.embeddings, labels, weights.margin);
    auto part = mode == PartMode::kAttention ? part_attention_bce(out.attention.at(0), masks, kBatch)
                                             : TensorD::scalar(0.0);
    return total_loss(cls, tri, part, weights);
  };

  NamedTensors<double> params = model.parameters();
  params.emplace_back("input", input);
  input.set_requires_grad(true);
  std::vector<GradCheckEntry> out;
  std::uint64_t salt = 0;
  for (auto& [name, tensor] : params) {
    if (options.bn_training && name.ends_with(".ciau.b_cu")) continue;
    auto coords = sample_coords(tensor.numel(), options.coords_per_param, options.seed + ++salt);
    if (name.ends_with(".stiau.w_r") && config.share_relation)
      std::erase_if(coords, [&](std::size_t i) { return i >= dims.channels; });
    GradCheckResult combined;
    for (auto i : coords) {
      GradCheckResult best;
      best.max_rel_error = std::numeric_limits<double>::infinity();
      for (double h : options.model_steps) {
        auto r = check_gradient(loss, tensor, h, {i});
        if (r.max_rel_error < best.max_rel_error) best = r;
      }
      best.worst_index = i;
      combined = worst_of(combined, best);
    }
    combined.checked = coords.size();
    out.push_back({"model", name, combined});
  }
  return out;
}

}  // namespace iau::verify
