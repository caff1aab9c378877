#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include "iau/eval.hpp"
#include "iau/model.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const fs::path& scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "iau_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Result cli(const std::string& args, const std::string& env = "") {
  const auto out = scratch() / "stdout.txt", err = scratch() / "stderr.txt";
  const std::string cmd = env + " " + IAUNET_PATH + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::size_t count_lines(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

const fs::path& small_dataset() {
  static const fs::path dir = [] {
    auto d = scratch() / "data_small";
    auto r = cli("gen --out " + d.string() + " --ids 4 --seqs-per-id 2 --frames 8 --height 16 --width 8 --seed 3");
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

const char* kTinyConfig =
    "# tiny model\n"
    "model.parts = 4\n"
    "model.stages[0].channels = 4\n"
    "model.stages[0].blocks = 1\n"
    "model.stages[1].channels = 8\n"
    "model.stages[1].downsample = 2\n"
    "model.stages[1].blocks = 1\n"
    "model.stages[1].iau = true\n"
    "train.epochs = 2\n"
    "train.lr_step = 1\n"
    "train.batch.classes = 2\n"
    "train.batch.per_class = 2\n";

fs::path write_config(const std::string& name, const std::string& text) {
  auto p = scratch() / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_CASE("gen writes the dataset layout deterministically") {
  auto a = scratch() / "gen_a", b = scratch() / "gen_b";
  auto r = cli("gen --out " + a.string() + " --ids 8 --seqs-per-id 4 --frames 16 --seed 5");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("sequences 32") != std::string::npos);
  std::size_t dirs = 0;
  for (auto& id_dir : fs::directory_iterator(a))
    if (id_dir.is_directory())
      for (auto& seq_dir : fs::directory_iterator(id_dir))
        dirs += fs::exists(seq_dir.path() / "frames.iaut") && fs::exists(seq_dir.path() / "masks.iaut");
  CHECK(dirs == 32);
  CHECK(count_lines(slurp(a / "manifest.txt")) == 33);
  REQUIRE(cli("gen --out " + b.string() + " --ids 8 --seqs-per-id 4 --frames 16 --seed 5").code == 0);
  CHECK(std::hash<std::string>{}(slurp(a / "manifest.txt")) == std::hash<std::string>{}(slurp(b / "manifest.txt")));
  CHECK(slurp(a / "id_0003/seq_02/frames.iaut") == slurp(b / "id_0003/seq_02/frames.iaut"));
}

TEST_CASE("gen rejects invalid arguments with exit code 2") {
  auto r = cli("gen --out " + (scratch() / "gen_bad").string() + " --ids 0");
  CHECK(r.code == 2);
  CHECK(r.err.find("--ids") != std::string::npos);
  CHECK(cli("gen --out " + (scratch() / "gen_bad").string() + " --ids seven").code == 2);
  CHECK(cli("gen --ids 3").code == 2);
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
}

TEST_CASE("gen reports unwritable output with exit code 3") {
  auto blocker = scratch() / "not_a_dir";
  std::ofstream(blocker) << "x";
  CHECK(cli("gen --out " + (blocker / "sub").string() + " --ids 2").code == 3);
}

TEST_CASE("train writes losses, config and checkpoints") {
  auto cfg = write_config("tiny.cfg", kTinyConfig);
  auto out = scratch() / "train_video";
  auto r = cli("train --config " + cfg.string() + " --data " + small_dataset().string() + " --out " + out.string() + " --seed 2");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto csv = slurp(out / "loss.csv");
  CHECK(csv.rfind("epoch,L_cls,L_tri,L_p,L_all\n", 0) == 0);
  CHECK(count_lines(csv) == 3);
  CHECK(fs::exists(out / "checkpoint_epoch1.iauc"));
  CHECK(fs::exists(out / "checkpoint_final.iauc"));
  auto config = slurp(out / "config.txt");
  // Unset values take the defaults: lambdas 1 and 0.5, margin 0.3, T = 4 at stride 8.
  CHECK(config.find("train.lambda1 = 1\n") != std::string::npos);
  CHECK(config.find("train.lambda2 = 0.5\n") != std::string::npos);
  CHECK(config.find("train.margin = 0.29999999999999999\n") != std::string::npos);
  CHECK(config.find("model.frames = 4\n") != std::string::npos);
  CHECK(config.find("train.stride = 8\n") != std::string::npos);
  CHECK(config.find("train.mode = video\n") != std::string::npos);
  CHECK(config.find("seed = 2\n") != std::string::npos);

  // Same inputs, same bytes.
  auto again = scratch() / "train_video_again";
  REQUIRE(cli("train --config " + cfg.string() + " --data " + small_dataset().string() + " --out " + again.string() + " --seed 2").code == 0);
  CHECK(slurp(out / "checkpoint_final.iauc") == slurp(again / "checkpoint_final.iauc"));
  CHECK(slurp(out / "loss.csv") == slurp(again / "loss.csv"));
}

TEST_CASE("train image mode forces single frames") {
  auto cfg = write_config("tiny.cfg", kTinyConfig);
  auto out = scratch() / "train_image";
  auto r = cli("train --config " + cfg.string() + " --data " + small_dataset().string() + " --out " + out.string() + " --mode image");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto config = slurp(out / "config.txt");
  CHECK(config.find("model.frames = 1\n") != std::string::npos);
  CHECK(config.find("train.mode = image\n") != std::string::npos);
  // Image mode decays every 20 epochs unless configured.
  auto ck = iau::load_checkpoint((out / "checkpoint_final.iauc").string());
  CHECK(ck.model.config().frames == 1);
}

TEST_CASE("train rejects bad configuration with exit code 2") {
  const std::string data = " --data " + small_dataset().string() + " --out " + (scratch() / "train_bad").string();
  auto unknown = write_config("unknown.cfg", std::string(kTinyConfig) + "train.learning_rate = 3\n");
  auto r = cli("train --config " + unknown.string() + data);
  CHECK(r.code == 2);
  CHECK(r.err.find("train.learning_rate") != std::string::npos);
  CHECK(cli("train --config " + write_config("k1.cfg", std::string(kTinyConfig) + "train.batch.per_class = 1\n").string() + data).code == 2);
  CHECK(cli("train --config " + write_config("nparts.cfg", std::string(kTinyConfig) + "model.parts = 3\n").string() + data).code == 2);
  CHECK(cli("train --config " + write_config("tiny.cfg", kTinyConfig).string() + data + " --mode audio").code == 2);
  CHECK(cli("train --config " + write_config("tiny.cfg", kTinyConfig).string() + data + " --set train.lr").code == 2);
  CHECK(cli("train --config " + (scratch() / "missing.cfg").string() + data).code == 3);
  CHECK(cli("train --data " + (scratch() / "no_data").string() + " --out " + (scratch() / "x").string()).code == 3);
}

TEST_CASE("a diverging run exits with code 4") {
  auto cfg = write_config("diverge.cfg", std::string(kTinyConfig) + "train.lr = 1e30\ntrain.epochs = 20\n");
  auto r = cli("train --config " + cfg.string() + " --data " + small_dataset().string() + " --out " + (scratch() / "diverge").string());
  CHECK(r.code == 4);
  CHECK(r.err.find("step") != std::string::npos);
}

TEST_CASE("eval writes four metrics") {
  auto out = scratch() / "eval_out";
  auto ck = scratch() / "train_video" / "checkpoint_final.iauc";
  REQUIRE(fs::exists(ck));
  auto r = cli("eval --checkpoint " + ck.string() + " --data " + small_dataset().string() + " --out " + out.string() + " --split train");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto metrics = slurp(out / "metrics.csv");
  CHECK(count_lines(metrics) == 5);
  CHECK(metrics.rfind("metric,value\nmap,", 0) == 0);
  CHECK(r.out.find("mAP ") != std::string::npos);
  CHECK(r.out.find("CMC-10 ") != std::string::npos);
  // No held-out identities when data.train_ids = 0.
  CHECK(cli("eval --checkpoint " + ck.string() + " --data " + small_dataset().string() + " --out " + out.string()).code == 2);
  CHECK(cli("eval --checkpoint " + (scratch() / "nope.iauc").string() + " --data " + small_dataset().string() + " --out " + out.string()).code == 3);
  auto garbage = scratch() / "garbage.iauc";
  std::ofstream(garbage) << "not a checkpoint";
  CHECK(cli("eval --checkpoint " + garbage.string() + " --data " + small_dataset().string() + " --out " + out.string()).code == 3);
}

TEST_CASE("gradcheck scopes") {
  auto op = cli("gradcheck --scope op --trials 1");
  CHECK(op.code == 0);
  CHECK(op.out.find("failed 0") != std::string::npos);
  auto block = cli("gradcheck --scope block --trials 1 --seed 4");
  CHECK(block.code == 0);
  auto strict = cli("gradcheck --scope op --trials 1 --tol 1e-30");
  CHECK(strict.code == 5);
  CHECK(strict.err.find("relative error") != std::string::npos);
  CHECK(cli("gradcheck --scope everything").code == 2);
}

TEST_CASE("inspect dumps maps for one sequence") {
  auto ck = scratch() / "train_video" / "checkpoint_final.iauc";
  auto out = scratch() / "inspect_out";
  auto seq = small_dataset() / "id_0001" / "seq_00";
  auto r = cli("inspect --checkpoint " + ck.string() + " --sequence " + seq.string() + " --out " + out.string());
  REQUIRE_MESSAGE(r.code == 0, r.err);
  // T = 4 frames, N = 4 parts: per frame one combined CSV and N part planes.
  std::size_t part_planes = 0;
  for (auto& f : fs::directory_iterator(out)) {
    auto name = f.path().filename().string();
    part_planes += name.find("_attention_t") != std::string::npos && name.find("_p") != std::string::npos;
  }
  CHECK(part_planes == 4 * 4);
  auto relation = slurp(out / "stage1_relation.csv");
  CHECK(count_lines(relation) == 16);
  CHECK(std::count(relation.begin(), relation.begin() + relation.find('\n'), ',') == 15);
  CHECK(count_lines(r.out) == static_cast<std::size_t>(std::distance(fs::directory_iterator(out), fs::directory_iterator())));

  std::map<std::string, std::string> first;
  for (auto& f : fs::directory_iterator(out)) first[f.path().string()] = slurp(f.path());
  REQUIRE(cli("inspect --checkpoint " + ck.string() + " --sequence " + seq.string() + " --out " + out.string()).code == 0);
  for (auto& [path, bytes] : first) CHECK(slurp(path) == bytes);

  CHECK(cli("inspect --checkpoint " + (scratch() / "none.iauc").string() + " --sequence " + seq.string() + " --out " + out.string()).code == 3);
  CHECK(cli("inspect --checkpoint " + ck.string() + " --sequence " + (scratch() / "none").string() + " --out " + out.string()).code == 3);
}

TEST_CASE("log level comes from the environment") {
  auto cfg = write_config("tiny.cfg", kTinyConfig);
  const std::string args = "train --config " + cfg.string() + " --data " + small_dataset().string() + " --out " + (scratch() / "quiet").string();
  auto quiet = cli(args, "IAU_LOG_LEVEL=error");
  CHECK(quiet.code == 0);
  CHECK(quiet.err.empty());
  auto chatty = cli(args, "IAU_LOG_LEVEL=debug");
  CHECK(chatty.err.find("step 1 loss") != std::string::npos);
}
