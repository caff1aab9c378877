#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "iau/error.hpp"
#include "iau/eval.hpp"
#include "iau/tensor_io.hpp"
#include "test_util.hpp"

using namespace iau;
using namespace iau::eval;
using iau::test::random_tensor;
namespace fs = std::filesystem;

namespace {

Labels labels(std::vector<std::size_t> ids, std::vector<std::size_t> cams) { return {std::move(ids), std::move(cams)}; }

// AP by enumerating every relevant item and counting relevant items at or above it.
double oracle_ap(const std::vector<bool>& rel) {
  double sum = 0;
  std::size_t relevant = 0;
  for (std::size_t i = 0; i < rel.size(); ++i) {
    if (!rel[i]) continue;
    ++relevant;
    std::size_t above = 0;
    for (std::size_t j = 0; j <= i; ++j) above += rel[j];
    sum += static_cast<double>(above) / static_cast<double>(i + 1);
  }
  return relevant ? sum / relevant : -1.0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::vector<double>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_CASE("own vector ranks first when the camera differs") {
  std::mt19937_64 rng(1);
  auto gallery = random_tensor<double>({6, 5}, rng);
  std::vector<double> q(gallery.data().begin() + 15, gallery.data().begin() + 20);
  TensorD query({1, 5}, q);
  auto r = rank_gallery(query, gallery, labels({3}, {1}), labels({0, 1, 2, 3, 4, 5}, {0, 0, 0, 0, 0, 0}));
  CHECK(r[0].front() == 3);
  // Same identity and camera: excluded.
  auto ex = rank_gallery(query, gallery, labels({3}, {0}), labels({0, 1, 2, 3, 4, 5}, {0, 0, 0, 0, 0, 0}));
  CHECK(std::find(ex[0].begin(), ex[0].end(), 3) == ex[0].end());
  CHECK(ex[0].size() == 5);
}

TEST_CASE("exact ties keep ascending gallery order") {
  TensorD gallery({4, 2}, {1, 0, 0, 1, 2, 0, 0, 3});
  TensorD query({1, 2}, {1, 0});
  auto r = rank_gallery(query, gallery, labels({9}, {0}), labels({0, 1, 2, 3}, {1, 1, 1, 1}));
  CHECK(r[0] == std::vector<std::size_t>{0, 2, 1, 3});
}

TEST_CASE("ranking matches a full-sort oracle") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_tensor<double>({5, 4}, rng);
    auto g = random_tensor<double>({8, 4}, rng);
    Labels ql, gl;
    for (int i = 0; i < 5; ++i) ql.identities.push_back(rng() % 3), ql.cameras.push_back(rng() % 2);
    for (int i = 0; i < 8; ++i) gl.identities.push_back(rng() % 3), gl.cameras.push_back(rng() % 2);
    auto r = rank_gallery(q, g, ql, gl);
    for (std::size_t i = 0; i < 5; ++i) {
      std::vector<std::pair<double, std::size_t>> keyed;
      for (std::size_t j = 0; j < 8; ++j) {
        if (gl.identities[j] == ql.identities[i] && gl.cameras[j] == ql.cameras[i]) continue;
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t d = 0; d < 4; ++d) {
          ab += q.data()[i * 4 + d] * g.data()[j * 4 + d];
          aa += q.data()[i * 4 + d] * q.data()[i * 4 + d];
          bb += g.data()[j * 4 + d] * g.data()[j * 4 + d];
        }
        keyed.emplace_back(-ab / std::sqrt(aa * bb), j);
      }
      std::sort(keyed.begin(), keyed.end());
      std::vector<std::size_t> expect;
      for (auto& [k, j] : keyed) expect.push_back(j);
      CHECK(r[i] == expect);
    }
  }
}

TEST_CASE("zero-norm embeddings are a contract violation") {
  TensorD g({2, 2}, {1, 0, 0, 0});
  TensorD q({1, 2}, {1, 1});
  CHECK_THROWS_AS(rank_gallery(q, g, labels({0}, {0}), labels({1, 2}, {0, 0})), ContractError);
  CHECK_THROWS_AS(rank_gallery(TensorD({1, 2}, {0, 0}), TensorD({1, 2}, {1, 0}), labels({0}, {0}), labels({1}, {0})), ContractError);
}

TEST_CASE("average precision examples") {
  CHECK(mean_average_precision({{true, true, false, false}}).map == 1.0);
  CHECK(mean_average_precision({{true, false, true}}).map == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  for (std::size_t k = 1; k <= 6; ++k) {
    std::vector<bool> row(6, false);
    row[k - 1] = true;
    CHECK(mean_average_precision({row}).map == doctest::Approx(1.0 / k).epsilon(1e-12));
  }
  auto r = mean_average_precision({{false, false}, {true, false}});
  CHECK(r.excluded == std::vector<std::size_t>{0});
  CHECK(r.evaluated == std::vector<std::size_t>{1});
  CHECK(r.map == 1.0);
}

TEST_CASE("cmc examples") {
  CHECK(cmc_curve({{false, true, false, false}}, 4) == std::vector<double>{0, 1, 1, 1});
  CHECK(cmc_curve({{true, true}, {true, false}}, 2) == std::vector<double>{1, 1});
  CHECK_THROWS_AS(cmc_curve({{true}}, 2), ContractError);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<bool>> rel(1 + rng() % 6, std::vector<bool>(10));
    for (auto& row : rel)
      for (std::size_t i = 0; i < row.size(); ++i) row[i] = rng() % 4 == 0;
    auto cmc = cmc_curve(rel, 10);
    for (std::size_t k = 1; k < cmc.size(); ++k) CHECK(cmc[k] >= cmc[k - 1]);
    for (double v : cmc) CHECK((v >= 0 && v <= 1));
  }
}

TEST_CASE("metrics match exhaustive oracles on small retrieval sets") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nq = 1 + rng() % 5, ng = 2 + rng() % 15, d = 3;
    auto q = random_tensor<double>({nq, d}, rng);
    auto g = random_tensor<double>({ng, d}, rng);
    Labels ql, gl;
    for (std::size_t i = 0; i < nq; ++i) ql.identities.push_back(rng() % 3), ql.cameras.push_back(rng() % 2);
    for (std::size_t i = 0; i < ng; ++i) gl.identities.push_back(rng() % 3), gl.cameras.push_back(rng() % 2);
    auto result = evaluate(q, g, ql, gl, 10);
    auto rel = relevance(result.rankings, ql, gl);
    // Camera exclusion: no same-identity same-camera item is ranked.
    for (std::size_t i = 0; i < nq; ++i)
      for (auto j : result.rankings[i]) CHECK_FALSE((gl.identities[j] == ql.identities[i] && gl.cameras[j] == ql.cameras[i]));

    double sum = 0;
    std::size_t evaluated = 0;
    std::vector<double> cmc(10, 0.0);
    for (auto& row : rel) {
      double ap = oracle_ap(row);
      if (ap < 0) continue;
      sum += ap;
      ++evaluated;
      std::size_t first = 0;
      while (!row[first]) ++first;
      for (std::size_t k = 0; k < 10; ++k) cmc[k] += first <= k;
    }
    CHECK(result.ap.excluded.size() == nq - evaluated);
    if (evaluated == 0) continue;
    CHECK(result.map == doctest::Approx(sum / evaluated).epsilon(1e-9));
    for (std::size_t k = 0; k < 10; ++k) CHECK(result.cmc[k] == doctest::Approx(cmc[k] / evaluated).epsilon(1e-9));
  }
}

TEST_CASE("metrics csv has four rows") {
  RetrievalResult r;
  r.map = 0.5;
  r.cmc = {0.25, 0.5, 0.5, 0.75, 1, 1, 1, 1, 1, 1};
  auto path = fs::temp_directory_path() / "iau_metrics_test.csv";
  write_metrics_csv(path, r);
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "metric,value");
  CHECK(lines[1] == "map,0.500000");
  CHECK(lines[2] == "cmc_1,0.250000");
  CHECK(lines[3] == "cmc_5,1.000000");
  CHECK(lines[4] == "cmc_10,1.000000");
  fs::remove(path);
}

TEST_CASE("protocol and embeddings") {
  data::GeneratorOptions o;
  o.ids = 4;
  o.seqs_per_id = 4;
  o.frames_per_seq = 8;
  o.height = 16;
  o.width = 8;
  auto ds = data::generate_synthetic(o);
  auto p = make_protocol(ds, {1, 3});
  CHECK(p.queries.size() == 8);
  CHECK(p.gallery == p.queries);
  ModelConfig c;
  c.stages = {{4, 1, 1, false}, {6, 2, 1, true}};
  c.parts = 2;
  c.frames = 2;
  c.image_height = 16;
  c.image_width = 8;
  auto model = ModelF::build(c, 1);
  auto a = embed_sequences(model, ds, p.gallery, 4, 3);
  auto b = embed_sequences(model, ds, p.gallery, 4, 3);
  CHECK(a.shape() == Shape{8, 6});
  CHECK(test::bitwise_equal(a.data(), b.data()));
  // Clip averaging matches single-clip forwards.
  auto clips = data::gather_clips(ds, {p.gallery[0], p.gallery[0], p.gallery[0]}, {0, 2, 5}, 2, 4);
  NoGradGuard guard;
  auto e = model.forward(clips.frames, false).embeddings;
  for (std::size_t j = 0; j < 6; ++j) {
    float mean = (e.data()[j] + e.data()[6 + j] + e.data()[12 + j]) / 3.0f;
    CHECK(a.data()[j] == doctest::Approx(mean).epsilon(1e-5));
  }
}

TEST_CASE("diagnostic dump") {
  ModelConfig c;
  c.stages = {{4, 1, 1, false}, {20, 2, 2, true}};
  c.parts = 3;
  c.frames = 4;
  c.image_height = 16;
  c.image_width = 8;
  auto model = ModelF::build(c, 2);
  for (auto& b : model.iau_blocks())
    if (b) std::ranges::fill(b->bn_first.gamma.mutable_data(), 1.0f);
  std::mt19937_64 rng(4);
  auto clip = random_tensor<float>({4, 16, 8, 3}, rng, 0, 1);
  auto dir = fs::temp_directory_path() / "iau_dump_test";
  fs::remove_all(dir);
  auto files = dump_diagnostics(model, clip, dir);

  // Per frame: one (h*w) x N CSV and N planes.
  std::size_t attention_csvs = 0;
  for (auto& f : files) attention_csvs += f.filename().string().find("_attention_t") != std::string::npos;
  CHECK(attention_csvs == 4 * (1 + 3));
  auto att = read_csv(dir / "stage1_attention_t0.csv");
  CHECK(att.size() == 8 * 4);
  CHECK(att[0].size() == 3);
  auto plane = read_csv(dir / "stage1_attention_t2_p1.csv");
  CHECK(plane.size() == 8);
  CHECK(plane[0].size() == 4);

  auto rel = read_csv(dir / "stage1_relation.csv");
  REQUIRE(rel.size() == 12);
  auto r = io::load_tensor(dir / "stage1_relation.iaut");
  auto structure = relation_structure(4, 3);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(rel[i].size() == 12);
    double s = 0;
    for (std::size_t j = 0; j < 12; ++j) {
      s += r.data()[i * 12 + j];
      if (!structure[i * 12 + j]) CHECK(r.data()[i * 12 + j] == 0.0f);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  auto channel = io::load_tensor(dir / "stage1_channel.iaut");
  CHECK(channel.shape() == Shape{40, 40});
  for (std::size_t i = 0; i < 40; ++i) CHECK(read_csv(dir / "stage1_channel.csv")[i].size() == 40);

  // Round trip against in-memory values.
  NoGradGuard guard;
  Shape shape = {1, 4, 16, 8, 3};
  auto out = model.forward(TensorF(shape, {clip.data().begin(), clip.data().end()}), false);
  CHECK(test::bitwise_equal(io::load_tensor(dir / "stage1_attention.iaut").data(), out.blocks[0].stiau[0].attention.data()));
  CHECK(test::bitwise_equal(r.data(), out.blocks[0].stiau[0].relations.normalized.data()));
  CHECK(test::bitwise_equal(io::load_tensor(dir / "stage1_spatial.iaut").data(), out.blocks[0].stiau[0].relations.spatial.data()));

  // Idempotent.
  std::vector<std::string> first;
  for (auto& f : files) first.push_back(slurp(f));
  auto again = dump_diagnostics(model, clip, dir);
  REQUIRE(again == files);
  for (std::size_t i = 0; i < files.size(); ++i) CHECK(slurp(files[i]) == first[i]);
  fs::remove_all(dir);
}

TEST_CASE("channel map subsampling") {
  CHECK(subsample_indices(40, 64).size() == 40);
  CHECK(subsample_indices(128, 64).size() == 64);
  CHECK(subsample_indices(130, 64).size() <= 64);
  CHECK(subsample_indices(512, 64) == [] {
    std::vector<std::size_t> v;
    for (std::size_t i = 0; i < 512; i += 8) v.push_back(i);
    return v;
  }());
}
