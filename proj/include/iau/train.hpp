#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "iau/config.hpp"
#include "iau/data.hpp"
#include "iau/model.hpp"
#include "iau/optim.hpp"

namespace iau::train {

struct StepLosses {
  double cls = 0, tri = 0, part = 0, total = 0;
  double accuracy = 0;  // batch identity accuracy
};

struct EpochLosses {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  StepLosses mean;
};

struct TrainOptions {
  // Loss CSV and checkpoints are written here; empty writes nothing.
  std::filesystem::path out_dir;
  // Parameters whose name contains any of these are left out of the optimizer.
  std::vector<std::string> frozen;
  std::function<void(const EpochLosses&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLosses> history;
  std::size_t steps = 0;
  std::vector<std::filesystem::path> checkpoints;
};

// lr * decay^floor((epoch - 1) / step) for 1-based epochs.
double learning_rate(const TrainConfig& config, std::size_t epoch);

// Part-attention loss: BCE of each IAU stage's attention maps against the
// batch masks resized to that stage, averaged over stages. Zero when no stage
// produces attention maps.
TensorF part_loss(const ModelOutput<float>& out, const TensorF& masks, std::size_t sequences);

// One optimization step on `batch` (labels index the training identities).
// Throws NumericError when a loss is not finite.
StepLosses train_step(ModelF& model, Adam<float>& optimizer, const data::Batch& batch, const LossWeights& weights);

// Adam with staged decay over run.train.epochs epochs of C x K batches from
// `identities`. Writes loss.csv (epoch,L_cls,L_tri,L_p,L_all), a checkpoint at
// every decay boundary and checkpoint_final.iauc. A non-finite loss throws
// NumericError naming the epoch and step.
TrainResult train(ModelF& model, const data::Dataset& dataset, const std::vector<std::size_t>& identities,
                  const RunConfig& run, const TrainOptions& options = {});

// Share of clips (`clips` per sequence, BN in eval mode) whose arg-max logit is
// the index of the sequence's identity in `identities`.
double identity_accuracy(ModelF& model, const data::Dataset& dataset, const std::vector<std::size_t>& identities,
                         std::size_t stride, std::size_t clips);

}  // namespace iau::train
