#include "iau/cli.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "iau/config.hpp"
#include "iau/data.hpp"
#include "iau/error.hpp"
#include "iau/eval.hpp"
#include "iau/tensor_io.hpp"
#include "iau/train.hpp"
#include "iau/verification.hpp"

namespace iau::cli {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void configure_logging() {
  // Logs go to stderr; stdout carries command results.
  static const auto logger = [] {
    auto l = spdlog::stderr_color_mt("iau");
    l->set_pattern("[%l] %v");
    spdlog::set_default_logger(l);
    return l;
  }();
  const char* env = std::getenv("IAU_LOG_LEVEL");
  const std::string level = env ? env : "info";
  if (level == "error")
    logger->set_level(spdlog::level::err);
  else if (level == "debug")
    logger->set_level(spdlog::level::debug);
  else {
    logger->set_level(spdlog::level::info);
    if (level != "info") spdlog::warn("IAU_LOG_LEVEL='{}' is not one of error, info, debug; using info", level);
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

// --- gen ---------------------------------------------------------------------

struct GenArgs {
  std::string out;
  long long ids = 8, seqs = 4, frames = 16, height = 64, width = 32;
  double misdetect = 0.2;
  std::uint64_t seed = 1;
};

int cmd_gen(const GenArgs& a) {
  auto positive = [](long long v, const char* flag) {
    if (v <= 0) throw UsageError(std::string(flag) + " must be positive, got " + std::to_string(v));
  };
  positive(a.ids, "--ids");
  positive(a.seqs, "--seqs-per-id");
  positive(a.frames, "--frames");
  positive(a.height, "--height");
  positive(a.width, "--width");
  if (a.height < 8 || a.width < 4) throw UsageError("--height must be >= 8 and --width >= 4");
  if (a.misdetect < 0 || a.misdetect > 1) throw UsageError("--misdetect must lie in [0, 1]");
  data::GeneratorOptions o;
  o.ids = static_cast<std::size_t>(a.ids);
  o.seqs_per_id = static_cast<std::size_t>(a.seqs);
  o.frames_per_seq = static_cast<std::size_t>(a.frames);
  o.height = static_cast<std::size_t>(a.height);
  o.width = static_cast<std::size_t>(a.width);
  o.misdetect_prob = a.misdetect;
  o.seed = a.seed;
  auto ds = data::generate_synthetic(o);
  data::save_dataset(ds, a.out);
  std::size_t corrupted = 0;
  for (auto& s : ds.sequences) corrupted += s.corrupted.size();
  std::cout << "identities " << o.ids << "\nsequences " << ds.sequences.size() << "\nframes "
            << ds.sequences.size() * o.frames_per_seq << "\nmis-detected frames " << corrupted << "\nwritten to "
            << a.out << "\n";
  return kOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out, mode;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const TrainArgs& a, const data::Dataset& ds) {
  RunConfig run;
  std::vector<ConfigEntry> entries;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw IoError("cannot read config '" + a.config + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    run = parse_run_config(text, a.config);
  }
  std::size_t n = 0;
  for (const auto& o : a.overrides) {
    auto eq = o.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + o + "'");
    apply_entry(run, {o.substr(0, eq), o.substr(eq + 1), ++n});
  }
  if (!a.mode.empty()) {
    if (a.mode == "image") {
      run.train.mode = TrainMode::kImage;
      run.model.frames = 1;
    } else if (a.mode == "video") {
      run.train.mode = TrainMode::kVideo;
    } else {
      throw UsageError("--mode must be image or video, got '" + a.mode + "'");
    }
  }
  if (a.seed) run.seed = *a.seed;
  run.model.image_height = ds.height();
  run.model.image_width = ds.width();
  const auto split = data::split_identities(ds.num_ids, run.data.train_ids, run.seed);
  run.model.num_ids = split.train.size();
  run.validate();
  return run;
}

int cmd_train(const TrainArgs& a) {
  auto ds = data::load_dataset(a.data);
  auto run = resolve_config(a, ds);
  ensure_dir(a.out);
  {
    std::ofstream cfg(fs::path(a.out) / "config.txt");
    if (!cfg) throw IoError("cannot write '" + (fs::path(a.out) / "config.txt").string() + "'");
    cfg << to_text(run);
  }
  const auto split = data::split_identities(ds.num_ids, run.data.train_ids, run.seed);
  spdlog::info("training {} mode on {} identities ({} held out), T={} stride={} epochs={}", to_string(run.train.mode),
               split.train.size(), split.test.size(), run.model.frames, run.train.stride, run.train.epochs);
  auto model = ModelF::build(run.model, run.seed);
  spdlog::info("model parameters: {}", model.parameter_count());
  train::TrainOptions options;
  options.out_dir = a.out;
  auto result = train::train(model, ds, split.train, run, options);
  const auto& last = result.history.back();
  std::cout << "epochs " << last.epoch << "\nsteps " << result.steps << "\nfinal loss " << last.mean.total
            << "\ncheckpoint " << result.checkpoints.back().string() << "\n";
  return kOk;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, out, split = "test";
};

int cmd_eval(const EvalArgs& a) {
  if (a.split != "test" && a.split != "train") throw UsageError("--split must be test or train");
  auto ck = load_checkpoint(a.checkpoint);
  auto ds = data::load_dataset(a.data);
  if (ds.height() != ck.run.model.image_height || ds.width() != ck.run.model.image_width)
    throw UsageError("dataset frames are " + std::to_string(ds.height()) + "x" + std::to_string(ds.width()) +
                     ", checkpoint expects " + std::to_string(ck.run.model.image_height) + "x" +
                     std::to_string(ck.run.model.image_width));
  const auto split = data::split_identities(ds.num_ids, ck.run.data.train_ids, ck.run.seed);
  const auto& ids = a.split == "test" ? split.test : split.train;
  if (ids.empty()) throw UsageError("the " + a.split + " split is empty (data.train_ids = " + std::to_string(ck.run.data.train_ids) + ")");
  auto protocol = eval::make_protocol(ds, ids);
  auto q = eval::embed_sequences(ck.model, ds, protocol.queries, ck.run.train.stride, ck.run.data.eval_clips);
  auto g = eval::embed_sequences(ck.model, ds, protocol.gallery, ck.run.train.stride, ck.run.data.eval_clips);
  auto result = eval::evaluate(q, g, eval::labels_of(ds, protocol.queries), eval::labels_of(ds, protocol.gallery));
  if (!result.ap.excluded.empty())
    spdlog::warn("{} queries have no cross-camera match and are excluded", result.ap.excluded.size());
  ensure_dir(a.out);
  eval::write_metrics_csv(fs::path(a.out) / "metrics.csv", result);
  std::printf("mAP %.4f\nCMC-1 %.4f\nCMC-5 %.4f\nCMC-10 %.4f\nqueries %zu (excluded %zu)\n", result.map,
              result.cmc[0], result.cmc[4], result.cmc[9], result.ap.evaluated.size(), result.ap.excluded.size());
  return kOk;
}

// --- gradcheck ---------------------------------------------------------------

struct GradcheckArgs {
  std::string scope = "all";
  int trials = 1;
  double tol = 1e-4;
  std::uint64_t seed = 17;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (a.trials < 1) throw UsageError("--trials must be >= 1");
  if (!(a.tol > 0)) throw UsageError("--tol must be positive");
  std::vector<verify::GradCheckEntry> entries;
  verify::SuiteOptions options;
  options.seed = a.seed;
  const bool all = a.scope == "all";
  if (all || a.scope == "op") {
    auto e = verify::check_ops(options, a.trials);
    entries.insert(entries.end(), e.begin(), e.end());
  }
  for (int t = 0; t < a.trials; ++t) {
    options.seed = a.seed + static_cast<std::uint64_t>(t);
    for (auto arrangement : {Arrangement::kCiauStiau, Arrangement::kStiauCiau, Arrangement::kParallel}) {
      const std::string tag = "[" + to_string(arrangement) + "] ";
      if (all || a.scope == "block")
        for (auto& e : verify::check_block(options, arrangement)) entries.push_back({e.scope, tag + e.name, e.result});
      if (all || a.scope == "model")
        for (auto& e : verify::check_model(options, arrangement)) entries.push_back({e.scope, tag + e.name, e.result});
    }
    if (all || a.scope == "block") {
      for (auto& e : verify::check_block(options, Arrangement::kCiauStiau, PartMode::kEqualPatch))
        entries.push_back({e.scope, "[equal_patch] " + e.name, e.result});
      for (auto variant : {BlockVariant::kStiauOnly, BlockVariant::kCiauOnly})
        for (auto& e : verify::check_block(options, Arrangement::kCiauStiau, PartMode::kAttention, variant))
          entries.push_back({e.scope, "[" + to_string(variant) + "] " + e.name, e.result});
    }
  }
  if (entries.empty()) throw UsageError("--scope must be op, block, model or all, got '" + a.scope + "'");

  const verify::GradCheckEntry* worst = &entries.front();
  std::size_t failed = 0;
  for (const auto& e : entries) {
    spdlog::debug("{} {} rel {:.3e} ({} coords)", e.scope, e.name, e.result.max_rel_error, e.result.checked);
    if (e.result.max_rel_error > worst->result.max_rel_error) worst = &e;
    if (e.result.max_rel_error >= a.tol) {
      ++failed;
      spdlog::error("{} {} relative error {:.3e} at index {} (analytic {:.6e}, numeric {:.6e})", e.scope, e.name,
                    e.result.max_rel_error, e.result.worst_index, e.result.analytic, e.result.numeric);
    }
  }
  std::printf("checks %zu\nfailed %zu\nworst %s %s %.3e\n", entries.size(), failed, worst->scope.c_str(),
              worst->name.c_str(), worst->result.max_rel_error);
  if (failed)
    throw VerificationFailure(worst->scope + " " + worst->name + " relative error " +
                              std::to_string(worst->result.max_rel_error) + " exceeds " + std::to_string(a.tol));
  return kOk;
}

// --- inspect -----------------------------------------------------------------

struct InspectArgs {
  std::string checkpoint, sequence, out;
  std::size_t start = 0;
};

int cmd_inspect(const InspectArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  fs::path seq = a.sequence;
  if (fs::is_directory(seq)) seq /= "frames.iaut";
  auto frames = io::load_tensor(seq);
  if (frames.rank() != 4 || frames.dim(1) != ck.run.model.image_height || frames.dim(2) != ck.run.model.image_width ||
      frames.dim(3) != 3)
    throw UsageError("sequence '" + seq.string() + "' has shape " + to_string(frames.shape()) + ", checkpoint expects [L x " +
                     std::to_string(ck.run.model.image_height) + " x " + std::to_string(ck.run.model.image_width) + " x 3]");
  const std::size_t len = frames.dim(0), t = ck.run.model.frames, frame = frames.numel() / len;
  std::vector<float> clip;
  for (auto i : data::clip_indices(len, a.start % len, t, ck.run.train.stride))
    clip.insert(clip.end(), frames.data().begin() + i * frame, frames.data().begin() + (i + 1) * frame);
  TensorF clip_tensor({t, frames.dim(1), frames.dim(2), 3}, std::move(clip));
  for (const auto& path : eval::dump_diagnostics(ck.model, clip_tensor, a.out)) std::cout << path.string() << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  configure_logging();
  CLI::App app{"IAU network toolkit: synthetic data, training, retrieval evaluation and verification", "iaunet"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic pedestrian-sequence dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--ids", gen.ids, "Number of identities");
  g->add_option("--seqs-per-id", gen.seqs, "Sequences per identity");
  g->add_option("--frames", gen.frames, "Frames per sequence");
  g->add_option("--height", gen.height, "Frame height");
  g->add_option("--width", gen.width, "Frame width");
  g->add_option("--misdetect", gen.misdetect, "Per-frame mis-detection probability");
  g->add_option("--seed", gen.seed, "Random seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model on a generated dataset");
  t->add_option("--config", tr.config, "Config file (dotted key = value lines)");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--mode", tr.mode, "image or video");
  t->add_option("--seed", tr.seed, "Random seed (overrides the config)");
  t->add_option("--set", tr.overrides, "Config override key=value (repeatable)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Retrieval metrics of a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--split", ev.split, "Identities to evaluate: test or train");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c->add_option("--scope", gc.scope, "op, block, model or all");
  c->add_option("--trials", gc.trials, "Random trials");
  c->add_option("--tol", gc.tol, "Relative error tolerance");
  c->add_option("--seed", gc.seed, "Random seed");

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "Dump attention and relation maps for one sequence");
  i->add_option("--checkpoint", in.checkpoint, "Checkpoint file")->required();
  i->add_option("--sequence", in.sequence, "Sequence directory or frames.iaut file")->required();
  i->add_option("--out", in.out, "Output directory")->required();
  i->add_option("--start", in.start, "First frame of the clip");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen(gen);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (c->parsed()) return cmd_gradcheck(gc);
    if (i->parsed()) return cmd_inspect(in);
  } catch (const UsageError& err) {
    spdlog::error("{}", err.what());
    return kUsage;
  } catch (const ConfigError& err) {
    spdlog::error("configuration: {}", err.what());
    return kUsage;
  } catch (const DimensionError& err) {
    spdlog::error("{}", err.what());
    return kUsage;
  } catch (const IoError& err) {
    spdlog::error("I/O: {}", err.what());
    return kIo;
  } catch (const FormatError& err) {
    spdlog::error("I/O: {}", err.what());
    return kIo;
  } catch (const NumericError& err) {
    spdlog::error("numerical failure: {}", err.what());
    return kNumeric;
  } catch (const VerificationFailure& err) {
    spdlog::error("verification failed: {}", err.what());
    return kVerification;
  } catch (const std::exception& err) {
    spdlog::error("internal error: {}", err.what());
    return 1;
  }
  return kUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace iau::cli
