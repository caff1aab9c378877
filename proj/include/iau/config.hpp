#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "iau/iau_blocks.hpp"
#include "iau/losses.hpp"

namespace iau {

struct StageSpec {
  std::size_t channels = 16;
  std::size_t downsample = 1;  // stride of the stage's first conv, 1 or 2
  std::size_t blocks = 2;      // conv3x3 + BN + ReLU groups
  bool iau = false;            // IAU block ahead of the stage's last group
};

struct ModelConfig {
  std::vector<StageSpec> stages;
  std::size_t parts = 4;
  std::size_t frames = 4;
  std::size_t embedding_dim = 0;  // 0: the pooled feature is the embedding
  std::size_t num_ids = 2;
  std::size_t image_height = 64;
  std::size_t image_width = 32;
  PartMode part_mode = PartMode::kAttention;
  Arrangement arrangement = Arrangement::kCiauStiau;
  BlockVariant variant = BlockVariant::kFull;
  bool share_relation = true;
  bool self_relations = true;
  bool temporal = true;

  // Four stages of 16/32/64/128 channels, two groups each, stride 2 entering
  // stages 2 and 3, IAU blocks in stages 2 and 3.
  static ModelConfig toy(std::size_t num_ids);
  void validate() const;
  IauBlockOptions block_options(bool training) const;
  bool has_iau() const;
};

enum class TrainMode { kImage, kVideo };

struct TrainConfig {
  TrainMode mode = TrainMode::kVideo;
  double lr = 3.5e-4;
  // Epochs between 10x learning-rate decays; unset means 20 (image) or 40 (video).
  std::optional<std::size_t> lr_step;
  double lr_decay = 0.1;
  std::size_t epochs = 200;
  std::size_t classes = 4;    // C identities per batch
  std::size_t per_class = 4;  // K sequences per identity
  std::size_t stride = 8;     // frame sampling stride
  std::size_t steps_per_epoch = 0;  // 0: one pass over the training identities
  LossWeights loss;

  std::size_t effective_lr_step() const;
  void validate() const;
};

struct DataConfig {
  std::size_t train_ids = 0;  // 0: every identity trains (used by overfit runs)
  std::size_t eval_clips = 4;
};

struct RunConfig {
  ModelConfig model = ModelConfig::toy(2);
  TrainConfig train;
  DataConfig data;
  std::uint64_t seed = 1;

  void validate() const;
};

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

// `key = value` lines; '#' starts a comment; blank lines are ignored.
std::vector<ConfigEntry> parse_entries(std::string_view text, const std::string& source = "config");

// Applies one dotted key. Unknown keys and malformed values throw ConfigError.
void apply_entry(RunConfig& config, const ConfigEntry& entry);

// Parses a full file; the first model.stages[...] key replaces the default stages.
RunConfig parse_run_config(std::string_view text, const std::string& source = "config");
RunConfig load_run_config(const std::string& path);

// Canonical text form; parse_run_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& config);

std::string to_string(TrainMode mode);

}  // namespace iau
