#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iau/gradcheck.hpp"
#include "iau/iau_blocks.hpp"

// Finite-difference gradient suites shared by tests, the CLI and the
// acceptance runner. All run in double precision.
namespace iau::verify {

struct GradCheckEntry {
  std::string scope;  // "op", "block" or "model"
  std::string name;
  GradCheckResult result;
};

struct SuiteOptions {
  std::uint64_t seed = 17;
  double step = 1e-5;
  // The model suite checks each coordinate at every step of this ladder and
  // keeps the smallest error: gradients near 1e-7 are roundoff-limited at the
  // small steps, and a ReLU, max or |.| kink inside a stencil spoils only the
  // steps wide enough to reach it.
  std::vector<double> model_steps = {1e-6, 1e-5, 1e-4, 1e-3};
  // Coordinates sampled per parameter tensor; 0 checks every coordinate.
  std::size_t coords_per_param = 0;
  // Batch statistics in BN. With batch statistics a bias feeding a BN is an
  // exact null direction, so the default uses randomized running statistics.
  bool bn_training = false;
};

// Every differentiable op under a random weighted-sum head.
std::vector<GradCheckEntry> check_ops(const SuiteOptions& options, int trials = 1);

// Every trainable weight of one IAU block plus its input, with nonzero BN
// gamma so every path carries gradient. In training mode parameters whose
// gradient is identically zero (b_cu ahead of a BN) are skipped, and so is the
// u half of a shared relation projector in every mode.
std::vector<GradCheckEntry> check_block(const SuiteOptions& options,
                                        Arrangement arrangement = Arrangement::kCiauStiau,
                                        PartMode mode = PartMode::kAttention,
                                        BlockVariant variant = BlockVariant::kFull);

// Small two-stage model with an IAU block (the arrangement and part mode
// given), checked through the full objective: identity loss, batch-hard
// triplet and part-attention BCE. BN uses randomized running statistics
// unless `bn_training`.
std::vector<GradCheckEntry> check_model(const SuiteOptions& options,
                                        Arrangement arrangement = Arrangement::kCiauStiau,
                                        PartMode mode = PartMode::kAttention);

double worst_error(const std::vector<GradCheckEntry>& entries);

std::vector<std::size_t> sample_coords(std::size_t size, std::size_t count, std::uint64_t seed);

}  // namespace iau::verify
