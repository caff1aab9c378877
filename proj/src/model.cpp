#include "iau/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "iau/tensor_io.hpp"

namespace iau {

namespace {

std::size_t conv_out(std::size_t size, std::size_t stride) { return (size + 2 - 3) / stride + 1; }

std::size_t pooled_channels(const ModelConfig& c) { return c.stages.back().channels; }

std::size_t embedding_size(const ModelConfig& c) {
  return c.embedding_dim == 0 ? pooled_channels(c) : c.embedding_dim;
}

std::mt19937_64 iau_stream(std::uint64_t seed, std::size_t stage) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage), 0x1a5u};
  return std::mt19937_64(seq);
}

}  // namespace

std::vector<StageDims> iau_stage_dims(const ModelConfig& config) {
  std::vector<StageDims> out;
  std::size_t h = config.image_height, w = config.image_width;
  for (const auto& s : config.stages) {
    h = conv_out(h, s.downsample);
    w = conv_out(w, s.downsample);
    out.push_back({config.frames, h, w, s.channels, config.parts});
  }
  return out;
}

std::size_t backbone_param_count(const ModelConfig& config) {
  std::size_t total = 0, cin = 3;
  for (const auto& s : config.stages) {
    for (std::size_t b = 0; b < s.blocks; ++b) {
      total += 9 * cin * s.channels + 2 * s.channels;
      cin = s.channels;
    }
  }
  const std::size_t pooled = pooled_channels(config), emb = embedding_size(config);
  if (config.embedding_dim != 0) total += pooled * emb + emb;
  total += emb * config.num_ids + config.num_ids;
  return total;
}

std::size_t census_param_count(const ModelConfig& config) {
  std::size_t total = backbone_param_count(config);
  const auto dims = iau_stage_dims(config);
  const auto options = config.block_options(true);
  for (std::size_t i = 0; i < config.stages.size(); ++i)
    if (config.stages[i].iau) total += count_ops_and_params(dims[i], options).params;
  return total;
}

template <typename Real>
Model<Real> Model<Real>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  std::mt19937_64 rng(seed);
  std::size_t cin = 3;
  const auto options = config.block_options(true);
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const auto& spec = config.stages[s];
    std::vector<ConvGroup<Real>> groups;
    for (std::size_t b = 0; b < spec.blocks; ++b) {
      ConvGroup<Real> g;
      // He-style uniform bound sqrt(6 / fan_in).
      g.weight = uniform_fan_in<Real>({9 * cin, spec.channels}, 9 * cin, rng, std::sqrt(6.0));
      g.bn = BatchNormLayer<Real>::make(spec.channels, Real(1));
      g.stride = b == 0 ? spec.downsample : 1;
      groups.push_back(std::move(g));
      cin = spec.channels;
    }
    m.stages_.push_back(std::move(groups));
    if (spec.iau) {
      auto stream = iau_stream(seed, s);
      m.iau_.emplace_back(IauBlockWeights<Real>::make(spec.channels, options, stream));
    } else {
      m.iau_.emplace_back();
    }
  }
  const std::size_t pooled = pooled_channels(config), emb = embedding_size(config);
  if (config.embedding_dim != 0) {
    m.embed_w_ = uniform_fan_in<Real>({pooled, emb}, pooled, rng);
    m.embed_b_ = Tensor<Real>::zeros({emb}, true);
  }
  m.cls_w_ = uniform_fan_in<Real>({emb, config.num_ids}, emb, rng);
  m.cls_b_ = Tensor<Real>::zeros({config.num_ids}, true);
  return m;
}

template <typename Real>
ModelOutput<Real> Model<Real>::forward(const Tensor<Real>& batch, bool training) {
  const auto& c = config_;
  if (batch.rank() != 5 || batch.dim(1) != c.frames || batch.dim(2) != c.image_height ||
      batch.dim(3) != c.image_width || batch.dim(4) != 3) {
    throw DimensionError("model input must be [B x " + std::to_string(c.frames) + " x " +
                         std::to_string(c.image_height) + " x " + std::to_string(c.image_width) +
                         " x 3], got " + to_string(batch.shape()));
  }
  const std::size_t b = batch.dim(0), t = c.frames;
  ModelOutput<Real> out;
  auto x = reshape(batch, Shape{b * t, c.image_height, c.image_width, 3});
  const auto options = c.block_options(training);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    auto& groups = stages_[s];
    for (std::size_t g = 0; g < groups.size(); ++g) {
      // The IAU block sits ahead of the last group, or after the only one.
      const bool insert_before = iau_[s] && groups.size() > 1 && g + 1 == groups.size();
      if (insert_before) {
        auto block = iau_block_forward(x, t, *iau_[s], options);
        x = block.output;
        out.iau_stages.push_back(s);
        out.attention.push_back(block.attention);
        out.blocks.push_back(std::move(block));
      }
      auto& group = groups[g];
      x = relu(group.bn.forward(conv2d(x, group.weight, Tensor<Real>(), 3, group.stride, 1), training));
    }
    if (iau_[s] && groups.size() == 1) {
      auto block = iau_block_forward(x, t, *iau_[s], options);
      x = block.output;
      out.iau_stages.push_back(s);
      out.attention.push_back(block.attention);
      out.blocks.push_back(std::move(block));
    }
  }
  // Spatial pooling per frame, then temporal average pooling.
  const std::size_t d = x.dim(3), hw = x.dim(1) * x.dim(2);
  auto frame_features = mean_axis(reshape(x, Shape{b * t, hw, d}), 1);
  auto pooled = mean_axis(reshape(frame_features, Shape{b, t, d}), 1);
  out.embeddings = c.embedding_dim == 0 ? pooled : add_bias(matmul(pooled, embed_w_), embed_b_);
  out.logits = add_bias(matmul(out.embeddings, cls_w_), cls_b_);
  return out;
}

template <typename Real>
NamedTensors<Real> Model<Real>::parameters() const {
  NamedTensors<Real> params, buffers;
  const auto options = config_.block_options(true);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string prefix = "stage" + std::to_string(s);
    for (std::size_t g = 0; g < stages_[s].size(); ++g) {
      const std::string gp = prefix + ".conv" + std::to_string(g);
      params.emplace_back(gp + ".weight", stages_[s][g].weight);
      stages_[s][g].bn.collect(gp + ".bn", params, buffers);
    }
    if (iau_[s]) iau_[s]->collect(prefix + ".iau", options, params, buffers);
  }
  if (embed_w_.defined()) {
    params.emplace_back("embed.weight", embed_w_);
    params.emplace_back("embed.bias", embed_b_);
  }
  params.emplace_back("classifier.weight", cls_w_);
  params.emplace_back("classifier.bias", cls_b_);
  return params;
}

template <typename Real>
NamedTensors<Real> Model<Real>::buffers() const {
  NamedTensors<Real> params, buffers;
  const auto options = config_.block_options(true);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string prefix = "stage" + std::to_string(s);
    for (std::size_t g = 0; g < stages_[s].size(); ++g)
      stages_[s][g].bn.collect(prefix + ".conv" + std::to_string(g) + ".bn", params, buffers);
    if (iau_[s]) iau_[s]->collect(prefix + ".iau", options, params, buffers);
  }
  return buffers;
}

template <typename Real>
std::vector<Tensor<Real>> Model<Real>::parameter_list() const {
  std::vector<Tensor<Real>> out;
  for (auto& [name, t] : parameters()) out.push_back(t);
  return out;
}

template <typename Real>
std::size_t Model<Real>::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : parameters()) n += t.numel();
  return n;
}

template <typename Real>
template <typename Other>
void Model<Real>::copy_from(const Model<Other>& other) {
  auto copy = [](const NamedTensors<Other>& src, NamedTensors<Real> dst) {
    if (src.size() != dst.size()) throw ContractError("copy_from: models have different layouts");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape())
        throw ContractError("copy_from: mismatch at " + dst[i].first);
      auto from = src[i].second.data();
      auto to = dst[i].second.mutable_data();
      for (std::size_t k = 0; k < from.size(); ++k) to[k] = static_cast<Real>(from[k]);
    }
  };
  copy(other.parameters(), parameters());
  copy(other.buffers(), buffers());
}

template class Model<float>;
template class Model<double>;
template void Model<double>::copy_from<float>(const Model<float>&);
template void Model<float>::copy_from<double>(const Model<double>&);
template void Model<float>::copy_from<float>(const Model<float>&);

namespace {

constexpr char kMagic[4] = {'I', 'A', 'U', 'C'};

void write_bytes(std::ostream& out, const std::string& s) {
  io::write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_bytes(std::istream& in, std::size_t limit, const char* what) {
  const std::uint32_t n = io::read_u32(in, what);
  if (n > limit) throw FormatError(std::string("checkpoint: ") + what + " length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw FormatError(std::string("checkpoint: truncated ") + what);
  return s;
}

}  // namespace

void write_checkpoint(std::ostream& out, const ModelF& model, const RunConfig& run) {
  out.write(kMagic, 4);
  out.put(static_cast<char>(kCheckpointVersion));
  write_bytes(out, to_text(run));
  auto records = model.parameters();
  for (auto& b : model.buffers()) records.push_back(b);
  io::write_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, tensor] : records) {
    write_bytes(out, name);
    io::write_tensor(out, tensor);
  }
  if (!out) throw IoError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("checkpoint: bad magic (expected IAUC)");
  const int version = in.get();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  try {
    ck.run = parse_run_config(read_bytes(in, 1u << 20, "metadata"), "checkpoint metadata");
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid metadata: ") + e.what());
  }
  ModelF model = ModelF::build(ck.run.model, 0);
  std::map<std::string, Tensor<float>> targets;
  for (auto& [name, t] : model.parameters()) targets.emplace(name, t);
  for (auto& [name, t] : model.buffers()) targets.emplace(name, t);
  const std::uint32_t count = io::read_u32(in, "record count");
  if (count != targets.size())
    throw FormatError("checkpoint: " + std::to_string(count) + " records, model needs " + std::to_string(targets.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = read_bytes(in, 4096, "record name");
    auto it = targets.find(name);
    if (it == targets.end()) throw FormatError("checkpoint: unexpected record '" + name + "'");
    auto value = io::read_tensor(in);
    if (value.shape() != it->second.shape())
      throw FormatError("checkpoint: record '" + name + "' has shape " + to_string(value.shape()) +
                        ", expected " + to_string(it->second.shape()));
    auto dst = it->second.mutable_data();
    auto src = value.data();
    std::copy(src.begin(), src.end(), dst.begin());
    targets.erase(it);
  }
  ck.model = std::move(model);
  return ck;
}

void save_checkpoint(const ModelF& model, const RunConfig& run, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  write_checkpoint(out, model, run);
  out.close();
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace iau
