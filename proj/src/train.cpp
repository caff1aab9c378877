#include "iau/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "iau/error.hpp"
#include "iau/losses.hpp"

namespace iau::train {

double learning_rate(const TrainConfig& config, std::size_t epoch) {
  const auto stage = (std::max<std::size_t>(epoch, 1) - 1) / config.effective_lr_step();
  return config.lr * std::pow(config.lr_decay, static_cast<double>(stage));
}

TensorF part_loss(const ModelOutput<float>& out, const TensorF& masks, std::size_t sequences) {
  std::vector<TensorF> terms;
  for (const auto& attention : out.attention) {
    if (!attention.defined()) continue;
    if (attention.dim(3) != masks.dim(3))
      throw ConfigError("part supervision needs model.parts = " + std::to_string(masks.dim(3)) +
                        " (one per mask band), got " + std::to_string(attention.dim(3)));
    auto resized = data::resize_masks(masks, attention.dim(1), attention.dim(2));
    terms.push_back(part_attention_bce(attention, resized, sequences));
  }
  if (terms.empty()) return TensorF::scalar(0.0f);
  auto acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 1.0f / static_cast<float>(terms.size()));
}

StepLosses train_step(ModelF& model, Adam<float>& optimizer, const data::Batch& batch, const LossWeights& weights) {
  auto out = model.forward(batch.frames, true);
  auto cls = identity_loss(out.logits, batch.labels);
  auto tri = batch_hard_triplet(out.embeddings, batch.labels, static_cast<float>(weights.margin));
  auto part = weights.lambda2 > 0 ? part_loss(out, batch.masks, batch.labels.size()) : TensorF::scalar(0.0f);
  auto total = total_loss(cls, tri, part, weights);
  StepLosses s{cls.item(), tri.item(), part.item(), total.item(), 0.0};
  if (!std::isfinite(s.total)) throw NumericError("non-finite loss " + std::to_string(s.total));
  const std::size_t b = batch.labels.size(), k = out.logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b; ++i) {
    auto row = out.logits.data().subspan(i * k, k);
    correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == batch.labels[i];
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(b);
  optimizer.zero_grad();
  backward(total);
  optimizer.step();
  return s;
}

namespace {

void append_csv(std::ofstream& out, const EpochLosses& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.8g,%.8g,%.8g,%.8g\n", e.epoch, e.mean.cls, e.mean.tri, e.mean.part, e.mean.total);
  out << buf << std::flush;
}

}  // namespace

TrainResult train(ModelF& model, const data::Dataset& dataset, const std::vector<std::size_t>& identities,
                  const RunConfig& run, const TrainOptions& options) {
  run.validate();
  const auto& tc = run.train;
  if (identities.size() > model.config().num_ids)
    throw ConfigError("model.num_ids = " + std::to_string(model.config().num_ids) + " is smaller than the " +
                      std::to_string(identities.size()) + " training identities");
  if (tc.loss.lambda2 > 0 && model.config().part_mode == PartMode::kAttention && model.config().parts != data::kBands)
    throw ConfigError("train.lambda2 > 0 needs one attention map per mask band: model.parts must be " +
                      std::to_string(data::kBands));

  std::vector<Tensor<float>> trainable;
  for (auto& [name, t] : model.parameters()) {
    const bool frozen = std::any_of(options.frozen.begin(), options.frozen.end(),
                                    [&](const std::string& f) { return name.find(f) != std::string::npos; });
    if (!frozen) trainable.push_back(t);
  }
  Adam<float> optimizer(trainable, AdamOptions{tc.lr});
  data::BatchSampler sampler(dataset, identities, {tc.classes, tc.per_class, model.config().frames, tc.stride}, run.seed);
  const std::size_t steps_per_epoch =
      tc.steps_per_epoch ? tc.steps_per_epoch : (identities.size() + tc.classes - 1) / tc.classes;

  std::ofstream csv;
  if (!options.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.out_dir, ec);
    if (ec) throw IoError("cannot create '" + options.out_dir.string() + "': " + ec.message());
    csv.open(options.out_dir / "loss.csv");
    if (!csv) throw IoError("cannot write '" + (options.out_dir / "loss.csv").string() + "'");
    csv << "epoch,L_cls,L_tri,L_p,L_all\n";
  }

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    optimizer.set_lr(learning_rate(tc, epoch));
    EpochLosses e;
    e.epoch = epoch;
    e.lr = optimizer.lr();
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      StepLosses s;
      try {
        s = train_step(model, optimizer, sampler.next(), tc.loss);
      } catch (const NumericError& err) {
        spdlog::error("numerical failure at epoch {} step {}: {}", epoch, step + 1, err.what());
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(step + 1) + ": " + err.what());
      }
      spdlog::debug("epoch {} step {} loss {:.6f} (cls {:.6f} tri {:.6f} part {:.6f})", epoch, step + 1, s.total,
                    s.cls, s.tri, s.part);
      e.mean.cls += s.cls;
      e.mean.tri += s.tri;
      e.mean.part += s.part;
      e.mean.total += s.total;
      e.mean.accuracy += s.accuracy;
      ++result.steps;
    }
    const double n = static_cast<double>(steps_per_epoch);
    e.mean.cls /= n;
    e.mean.tri /= n;
    e.mean.part /= n;
    e.mean.total /= n;
    e.mean.accuracy /= n;
    result.history.push_back(e);
    if (csv.is_open()) append_csv(csv, e);
    spdlog::info("epoch {}/{} lr {:.3g} loss {:.5f} cls {:.5f} tri {:.5f} part {:.5f} acc {:.3f}", epoch, tc.epochs,
                 e.lr, e.mean.total, e.mean.cls, e.mean.tri, e.mean.part, e.mean.accuracy);
    if (options.on_epoch) options.on_epoch(e);

    if (!options.out_dir.empty()) {
      std::filesystem::path path;
      if (epoch == tc.epochs)
        path = options.out_dir / "checkpoint_final.iauc";
      else if (epoch % tc.effective_lr_step() == 0)
        path = options.out_dir / ("checkpoint_epoch" + std::to_string(epoch) + ".iauc");
      if (!path.empty()) {
        save_checkpoint(model, run, path.string());
        result.checkpoints.push_back(path);
        spdlog::info("wrote {}", path.string());
      }
    }
  }
  return result;
}

double identity_accuracy(ModelF& model, const data::Dataset& dataset, const std::vector<std::size_t>& identities,
                         std::size_t stride, std::size_t clips) {
  NoGradGuard no_grad;
  const std::size_t t = model.config().frames;
  std::size_t correct = 0, total = 0;
  for (std::size_t label = 0; label < identities.size(); ++label) {
    for (auto s : dataset.sequences_of(identities[label])) {
      const std::size_t len = dataset.length(s);
      std::vector<std::size_t> seqs(clips, s), starts;
      for (std::size_t c = 0; c < clips; ++c) starts.push_back(c * len / clips);
      auto batch = data::gather_clips(dataset, seqs, starts, t, stride);
      auto logits = model.forward(batch.frames, false).logits;
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < clips; ++i) {
        auto row = logits.data().subspan(i * k, k);
        correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == label;
        ++total;
      }
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace iau::train
