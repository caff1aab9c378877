#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "iau/config.hpp"
#include "iau/iau_blocks.hpp"
#include "iau/layers.hpp"

namespace iau {

// conv3x3 (no bias; BN follows) + BN + ReLU.
template <typename Real>
struct ConvGroup {
  Tensor<Real> weight;  // [9 Cin x Cout]
  BatchNormLayer<Real> bn;
  std::size_t stride = 1;
};

template <typename Real>
struct ModelOutput {
  Tensor<Real> logits;      // [B x num_ids]
  Tensor<Real> embeddings;  // [B x D_emb]
  // Per IAU stage (in stage order): attention maps [B*T x h x w x N] and traces.
  std::vector<std::size_t> iau_stages;
  std::vector<Tensor<Real>> attention;
  std::vector<IauBlockOutput<Real>> blocks;
};

// Feature-map dims entering each stage's IAU block (valid for stages with iau).
std::vector<StageDims> iau_stage_dims(const ModelConfig& config);

// Parameters outside IAU blocks: conv weights, backbone BN, embedding and classifier.
std::size_t backbone_param_count(const ModelConfig& config);

// Closed-form total: backbone plus count_ops_and_params for every IAU stage.
std::size_t census_param_count(const ModelConfig& config);

template <typename Real>
class Model {
 public:
  // Deterministic from `seed`. IAU weights draw from a separate stream so a
  // baseline and an IAU model with the same seed share the backbone init.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  // batch is [B x T x H x W x 3]. Sequences are processed jointly inside IAU blocks.
  ModelOutput<Real> forward(const Tensor<Real>& batch, bool training);

  NamedTensors<Real> parameters() const;
  NamedTensors<Real> buffers() const;
  std::vector<Tensor<Real>> parameter_list() const;
  std::size_t parameter_count() const;

  const ModelConfig& config() const { return config_; }
  // One entry per stage; empty for stages without IAU.
  std::vector<std::optional<IauBlockWeights<Real>>>& iau_blocks() { return iau_; }
  const std::vector<std::optional<IauBlockWeights<Real>>>& iau_blocks() const { return iau_; }

  // Copies every parameter and buffer value from `other` (same config), converting precision.
  template <typename Other>
  void copy_from(const Model<Other>& other);

 private:
  ModelConfig config_;
  std::vector<std::vector<ConvGroup<Real>>> stages_;
  std::vector<std::optional<IauBlockWeights<Real>>> iau_;
  Tensor<Real> embed_w_, embed_b_;
  Tensor<Real> cls_w_, cls_b_;

  template <typename Other>
  friend class Model;
};

using ModelF = Model<float>;
using ModelD = Model<double>;

// Checkpoint container: "IAUC", version byte, u32 metadata length and text
// (the run configuration), u32 record count, then per record u32 name length,
// name bytes and one tensor file.
inline constexpr std::uint8_t kCheckpointVersion = 1;

void save_checkpoint(const ModelF& model, const RunConfig& run, const std::string& path);

struct Checkpoint {
  RunConfig run;
  ModelF model;
};

// Throws FormatError on bad magic, version, truncation, missing or
// mis-shaped records; IoError when the file cannot be opened.
Checkpoint load_checkpoint(const std::string& path);
void write_checkpoint(std::ostream& out, const ModelF& model, const RunConfig& run);
Checkpoint read_checkpoint(std::istream& in);

}  // namespace iau
