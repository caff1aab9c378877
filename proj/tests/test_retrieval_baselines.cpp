#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "iau/eval.hpp"
#include "iau/train.hpp"

using namespace iau;

namespace {

data::Dataset small_dataset(std::size_t ids, std::uint64_t seed) {
  data::GeneratorOptions o;
  o.ids = ids;
  o.seqs_per_id = 4;
  o.frames_per_seq = 16;
  o.height = 32;
  o.width = 16;
  o.seed = seed;
  return data::generate_synthetic(o);
}

RunConfig small_run(std::size_t ids) {
  RunConfig run;
  run.model = ModelConfig::toy(ids);
  run.model.image_height = 32;
  run.model.image_width = 16;
  for (std::size_t i = 0; i < run.model.stages.size(); ++i) run.model.stages[i].channels = std::size_t(8) << i;
  return run;
}

eval::RetrievalResult retrieve(ModelF& model, const data::Dataset& ds, const std::vector<std::size_t>& ids,
                               const RunConfig& run) {
  auto p = eval::make_protocol(ds, ids);
  auto q = eval::embed_sequences(model, ds, p.queries, run.train.stride, run.data.eval_clips);
  auto g = eval::embed_sequences(model, ds, p.gallery, run.train.stride, run.data.eval_clips);
  return eval::evaluate(q, g, eval::labels_of(ds, p.queries), eval::labels_of(ds, p.gallery));
}

}  // namespace

TEST_CASE("untrained model retrieves at chance level") {
  spdlog::set_level(spdlog::level::warn);
  auto ds = small_dataset(8, 21);
  std::vector<std::size_t> ids(8);
  std::iota(ids.begin(), ids.end(), 0);
  auto run = small_run(8);
  auto model = ModelF::build(run.model, 21);
  auto result = retrieve(model, ds, ids, run);

  // Chance level: mAP of uniformly shuffled rankings of the same candidate lists.
  auto rel = eval::relevance(result.rankings, eval::labels_of(ds, eval::make_protocol(ds, ids).queries),
                             eval::labels_of(ds, eval::make_protocol(ds, ids).gallery));
  std::mt19937_64 rng(5);
  std::vector<double> samples;
  for (int trial = 0; trial < 2000; ++trial) {
    auto shuffled = rel;
    for (auto& row : shuffled) std::shuffle(row.begin(), row.end(), rng);
    samples.push_back(eval::mean_average_precision(shuffled).map);
  }
  const double mu = std::accumulate(samples.begin(), samples.end(), 0.0) / samples.size();
  double var = 0;
  for (double s : samples) var += (s - mu) * (s - mu);
  const double sigma = std::sqrt(var / (samples.size() - 1));
  INFO("untrained mAP ", result.map, ", chance ", mu, " +- ", sigma);
  CHECK(std::abs(result.map - mu) <= 3 * sigma);
}

TEST_CASE("overfit model retrieves its training identities") {
  spdlog::set_level(spdlog::level::warn);
  constexpr std::size_t kIds = 8;
  auto ds = small_dataset(kIds, 5);
  std::vector<std::size_t> ids(kIds);
  std::iota(ids.begin(), ids.end(), 0);
  auto run = small_run(kIds);
  run.train.epochs = 200;
  run.train.lr_step = 200;
  auto model = ModelF::build(run.model, 5);
  train::train(model, ds, ids, run);
  const double accuracy = train::identity_accuracy(model, ds, ids, run.train.stride, run.data.eval_clips);
  const double map = retrieve(model, ds, ids, run).map;
  INFO("training accuracy ", accuracy, ", mAP ", map);
  CHECK(accuracy >= 0.99);
  CHECK(map > 0.95);
}
