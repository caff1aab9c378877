#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "iau/tensor.hpp"

namespace iau::data {

inline constexpr std::size_t kBands = 4;  // head, upper body, lower body, shoes

struct GeneratorOptions {
  std::size_t ids = 8;
  std::size_t seqs_per_id = 4;
  std::size_t frames_per_seq = 16;
  std::size_t height = 64;
  std::size_t width = 32;
  std::size_t cameras = 2;
  double misdetect_prob = 0.2;
  double noise = 0.04;
  // Share of identities built as a band permutation of an earlier identity.
  double permuted_share = 0.5;
  std::uint64_t seed = 1;
};

struct Sequence {
  TensorF frames;  // [L x H x W x 3] in [0, 1]
  TensorF masks;   // [L x H x W x 4], one-hot on the person, 0 elsewhere
  std::size_t identity = 0;
  std::size_t camera = 0;
  std::vector<std::size_t> corrupted;  // mis-detected frame indices
  std::string path;                    // relative directory on disk
};

struct Dataset {
  std::vector<Sequence> sequences;
  std::size_t num_ids = 0;
  // Band colors per identity, [ids][band][rgb].
  std::vector<std::array<std::array<float, 3>, kBands>> signatures;

  std::size_t height() const { return sequences.front().frames.dim(1); }
  std::size_t width() const { return sequences.front().frames.dim(2); }
  std::size_t length(std::size_t seq) const { return sequences[seq].frames.dim(0); }
  // Sequence indices of one identity, in file order.
  std::vector<std::size_t> sequences_of(std::size_t identity) const;
};

Dataset generate_synthetic(const GeneratorOptions& options);

// Layout: <dir>/id_XXXX/seq_YY/{frames,masks}.iaut plus <dir>/manifest.txt
// with one line per sequence: identity camera path corrupted-indices
// (comma separated, '-' when none).
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Pure function of (num_ids, train_ids, seed). train_ids = 0 puts every identity in train.
Split split_identities(std::size_t num_ids, std::size_t train_ids, std::uint64_t seed);

struct BatchSpec {
  std::size_t classes = 4;    // C
  std::size_t per_class = 4;  // K
  std::size_t frames = 4;     // T
  std::size_t stride = 8;
};

struct Batch {
  TensorF frames;                       // [C*K x T x H x W x 3]
  TensorF masks;                        // [C*K*T x H x W x 4]
  std::vector<std::size_t> labels;      // class index within the sampler's identity list
  std::vector<std::size_t> identities;  // dataset identity
  std::vector<std::size_t> sequences;   // dataset sequence index
};

// Frame indices start, start + stride, ... wrapped modulo the sequence length.
std::vector<std::size_t> clip_indices(std::size_t length, std::size_t start, std::size_t frames,
                                      std::size_t stride);

// Stacks one clip per listed (sequence, start) pair.
Batch gather_clips(const Dataset& dataset, const std::vector<std::size_t>& sequences,
                   const std::vector<std::size_t>& starts, std::size_t frames, std::size_t stride);

// C x K identity-balanced batches. Identities are drawn from a reshuffled
// cycle over `identities` so appearance frequencies stay uniform; each
// identity contributes K sequences (without replacement when it has >= K).
class BatchSampler {
 public:
  BatchSampler(const Dataset& dataset, std::vector<std::size_t> identities, BatchSpec spec,
               std::uint64_t seed);
  Batch next();
  const std::vector<std::size_t>& identities() const { return identities_; }

 private:
  const Dataset& dataset_;
  std::vector<std::size_t> identities_;
  BatchSpec spec_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> cycle_;
  std::size_t cursor_ = 0;
};

// Area-average downsampling of masks [L x H x W x N] to [L x h x w x N]
// (general, fractional overlaps). Requires h <= H and w <= W.
TensorF resize_masks(const TensorF& masks, std::size_t height, std::size_t width);

}  // namespace iau::data
