#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <map>
#include <set>

#include "iau/config.hpp"
#include "iau/data.hpp"
#include "iau/error.hpp"
#include "test_util.hpp"

using namespace iau;
using namespace iau::data;
using iau::test::bitwise_equal;
namespace fs = std::filesystem;

namespace {

GeneratorOptions small(std::uint64_t seed = 1) {
  GeneratorOptions o;
  o.ids = 6;
  o.seqs_per_id = 3;
  o.frames_per_seq = 8;
  o.height = 32;
  o.width = 16;
  o.seed = seed;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("iau_test_data_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  auto a = generate_synthetic(small(3));
  auto b = generate_synthetic(small(3));
  auto c = generate_synthetic(small(4));
  REQUIRE(a.sequences.size() == 18);
  for (std::size_t i = 0; i < a.sequences.size(); ++i) {
    CHECK(bitwise_equal(a.sequences[i].frames.data(), b.sequences[i].frames.data()));
    CHECK(bitwise_equal(a.sequences[i].masks.data(), b.sequences[i].masks.data()));
    CHECK(a.sequences[i].corrupted == b.sequences[i].corrupted);
  }
  CHECK_FALSE(bitwise_equal(a.sequences[0].frames.data(), c.sequences[0].frames.data()));

  auto d1 = scratch("det1"), d2 = scratch("det2");
  save_dataset(a, d1);
  save_dataset(b, d2);
  CHECK(slurp(d1 / "manifest.txt") == slurp(d2 / "manifest.txt"));
  for (auto& s : a.sequences) {
    CHECK(slurp(d1 / s.path / "frames.iaut") == slurp(d2 / s.path / "frames.iaut"));
    CHECK(slurp(d1 / s.path / "masks.iaut") == slurp(d2 / s.path / "masks.iaut"));
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("frames lie in [0,1] and masks are one-hot on the person") {
  auto ds = generate_synthetic(small());
  for (auto& s : ds.sequences) {
    CHECK(s.frames.shape() == Shape{8, 32, 16, 3});
    CHECK(s.masks.shape() == Shape{8, 32, 16, kBands});
    for (float v : s.frames.data()) REQUIRE((v >= 0.0f && v <= 1.0f));
    auto m = s.masks.data();
    for (std::size_t px = 0; px < m.size() / kBands; ++px) {
      float total = 0;
      for (std::size_t k = 0; k < kBands; ++k) {
        REQUIRE((m[px * kBands + k] == 0.0f || m[px * kBands + k] == 1.0f));
        total += m[px * kBands + k];
      }
      REQUIRE(total <= 1.0f);
    }
  }
}

TEST_CASE("mask sums equal band areas counted from the image") {
  auto o = small(5);
  o.noise = 0.0;
  o.cameras = 1;
  o.misdetect_prob = 0.0;
  auto ds = generate_synthetic(o);
  for (auto& s : ds.sequences) {
    const std::size_t len = s.frames.dim(0), px = s.frames.dim(1) * s.frames.dim(2);
    for (std::size_t f = 0; f < len; ++f) {
      auto img = s.frames.data().subspan(f * px * 3, px * 3);
      auto mask = s.masks.data().subspan(f * px * kBands, px * kBands);
      // Without noise every pixel of a band has one color; bands sharing a
      // color are compared jointly.
      std::map<std::array<float, 3>, std::pair<std::size_t, std::size_t>> by_color;
      std::array<std::size_t, kBands> area{};
      for (std::size_t p = 0; p < px; ++p)
        for (std::size_t k = 0; k < kBands; ++k)
          if (mask[p * kBands + k] == 1.0f) {
            ++area[k];
            by_color[{img[p * 3], img[p * 3 + 1], img[p * 3 + 2]}];
          }
      for (std::size_t k = 0; k < kBands; ++k) {
        float sum = 0;
        for (std::size_t p = 0; p < px; ++p) sum += mask[p * kBands + k];
        CHECK(sum == static_cast<float>(area[k]));
        REQUIRE(area[k] > 0);
      }
      for (std::size_t p = 0; p < px; ++p) {
        auto it = by_color.find({img[p * 3], img[p * 3 + 1], img[p * 3 + 2]});
        if (it != by_color.end()) ++it->second.first;
      }
      for (std::size_t p = 0; p < px; ++p)
        for (std::size_t k = 0; k < kBands; ++k)
          if (mask[p * kBands + k] == 1.0f) ++by_color[{img[p * 3], img[p * 3 + 1], img[p * 3 + 2]}].second;
      for (auto& [color, counts] : by_color) CHECK(counts.first == counts.second);
    }
  }
}

TEST_CASE("identities differ by at least 0.2 in some band channel") {
  auto o = small(2);
  o.ids = 40;
  o.seqs_per_id = 1;
  o.frames_per_seq = 1;
  auto ds = generate_synthetic(o);
  REQUIRE(ds.signatures.size() == 40);
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t j = i + 1; j < 40; ++j) {
      float best = 0;
      for (std::size_t k = 0; k < kBands; ++k)
        for (std::size_t c = 0; c < 3; ++c)
          best = std::max(best, std::abs(ds.signatures[i][k][c] - ds.signatures[j][k][c]));
      CHECK(best >= 0.2f);
    }
}

TEST_CASE("mis-detections occur near the configured rate and are flagged") {
  auto o = small(8);
  o.ids = 8;
  o.seqs_per_id = 4;
  o.frames_per_seq = 16;
  auto ds = generate_synthetic(o);
  std::size_t flagged = 0, frames = 0;
  for (auto& s : ds.sequences) {
    flagged += s.corrupted.size();
    frames += s.frames.dim(0);
    for (auto f : s.corrupted) CHECK(f < s.frames.dim(0));
  }
  const double expect = 0.2 * frames, sigma = std::sqrt(frames * 0.2 * 0.8);
  CHECK(std::abs(flagged - expect) < 3 * sigma);
  // Cameras alternate per sequence.
  CHECK(ds.sequences[0].camera == 0);
  CHECK(ds.sequences[1].camera == 1);
}

TEST_CASE("dataset save and load round trip") {
  auto o = small(6);
  o.ids = 8;
  o.seqs_per_id = 4;
  o.frames_per_seq = 16;
  auto ds = generate_synthetic(o);
  auto dir = scratch("roundtrip");
  save_dataset(ds, dir);
  std::size_t dirs = 0;
  for (auto& id_dir : fs::directory_iterator(dir))
    if (id_dir.is_directory())
      for (auto& seq_dir : fs::directory_iterator(id_dir)) dirs += seq_dir.is_directory();
  CHECK(dirs == 32);
  auto back = load_dataset(dir);
  REQUIRE(back.sequences.size() == ds.sequences.size());
  CHECK(back.num_ids == 8);
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    CHECK(back.sequences[i].identity == ds.sequences[i].identity);
    CHECK(back.sequences[i].camera == ds.sequences[i].camera);
    CHECK(back.sequences[i].corrupted == ds.sequences[i].corrupted);
    CHECK(bitwise_equal(back.sequences[i].frames.data(), ds.sequences[i].frames.data()));
    CHECK(bitwise_equal(back.sequences[i].masks.data(), ds.sequences[i].masks.data()));
  }

  std::ofstream(dir / "manifest.txt", std::ios::app) << "3 0\n";
  CHECK_THROWS_AS(load_dataset(dir), FormatError);
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_dataset(dir), IoError);
}

TEST_CASE("identity split is a pure function of the seed") {
  auto a = split_identities(24, 16, 3);
  auto b = split_identities(24, 16, 3);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  CHECK(a.train.size() == 16);
  CHECK(a.test.size() == 8);
  std::set<std::size_t> all(a.train.begin(), a.train.end());
  all.insert(a.test.begin(), a.test.end());
  CHECK(all.size() == 24);
  CHECK(split_identities(24, 16, 4).train != a.train);
  CHECK(split_identities(5, 0, 1).train.size() == 5);
  CHECK_THROWS_AS(split_identities(5, 6, 1), ConfigError);
}

TEST_CASE("clip indices wrap inside short sequences") {
  CHECK(clip_indices(32, 0, 4, 8) == std::vector<std::size_t>{0, 8, 16, 24});
  CHECK(clip_indices(10, 7, 4, 8) == std::vector<std::size_t>{7, 5, 3, 1});
  for (std::size_t len = 1; len < 20; ++len)
    for (std::size_t start = 0; start < len; ++start)
      for (auto i : clip_indices(len, start, 4, 8)) REQUIRE(i < len);
}

TEST_CASE("sampler emits C x K batches") {
  auto o = small(9);
  o.ids = 10;
  o.seqs_per_id = 4;
  auto ds = generate_synthetic(o);
  std::vector<std::size_t> ids = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  BatchSampler sampler(ds, ids, {4, 4, 4, 8}, 1);
  BatchSampler twin(ds, ids, {4, 4, 4, 8}, 1);
  for (int n = 0; n < 20; ++n) {
    auto b = sampler.next();
    auto t = twin.next();
    CHECK(b.sequences == t.sequences);
    CHECK(bitwise_equal(b.frames.data(), t.frames.data()));
    CHECK(b.frames.shape() == Shape{16, 4, 32, 16, 3});
    CHECK(b.masks.shape() == Shape{64, 32, 16, kBands});
    std::map<std::size_t, int> per_identity;
    for (std::size_t i = 0; i < 16; ++i) {
      ++per_identity[b.identities[i]];
      CHECK(ids[b.labels[i]] == b.identities[i]);
      CHECK(ds.sequences[b.sequences[i]].identity == b.identities[i]);
    }
    CHECK(per_identity.size() == 4);
    for (auto& [id, count] : per_identity) CHECK(count == 4);
    // Four distinct sequences of each identity (it has exactly four).
    std::set<std::size_t> seqs(b.sequences.begin(), b.sequences.end());
    CHECK(seqs.size() == 16);
  }
}

TEST_CASE("sampler identity frequencies are uniform over 1000 batches") {
  auto o = small(10);
  o.ids = 10;
  o.seqs_per_id = 2;
  o.frames_per_seq = 2;
  o.height = 8;
  o.width = 4;
  auto ds = generate_synthetic(o);
  std::vector<std::size_t> ids(10);
  std::iota(ids.begin(), ids.end(), 0);
  BatchSampler sampler(ds, ids, {4, 2, 1, 1}, 5);
  std::vector<double> counts(10, 0);
  const int batches = 1000;
  for (int n = 0; n < batches; ++n) {
    auto b = sampler.next();
    for (std::size_t i = 0; i < b.identities.size(); i += 2) counts[b.identities[i]] += 1;
  }
  const double draws = batches * 4.0, p = 0.1;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (double c : counts) CHECK(std::abs(c - draws * p) < 3 * sigma);
}

TEST_CASE("unsatisfiable batch specs are rejected") {
  auto ds = generate_synthetic(small());
  CHECK_THROWS_AS(BatchSampler(ds, {0, 1, 2}, {4, 4, 4, 8}, 1), ConfigError);
  CHECK_THROWS_AS(BatchSampler(ds, {0, 1, 2}, {2, 0, 4, 8}, 1), ConfigError);
  TrainConfig train;
  train.per_class = 1;
  CHECK_THROWS_AS(train.validate(), ConfigError);
}

TEST_CASE("area-average mask resize") {
  SUBCASE("constant channel stays constant") {
    TensorF ones = TensorF::full({2, 16, 8, 1}, 1.0f);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 4}, {5, 3}, {7, 7}, {1, 1}}) {
      auto r = resize_masks(ones, h, w);
      CHECK(r.shape() == Shape{2, h, w, 1});
      for (float v : r.data()) CHECK(v == doctest::Approx(1.0f).epsilon(1e-6));
    }
  }
  SUBCASE("2x2 to 1x1") {
    auto r = resize_masks(TensorF({1, 2, 2, 1}, {1, 1, 0, 0}), 1, 1);
    CHECK(r.data()[0] == doctest::Approx(0.5f));
  }
  SUBCASE("checkerboard halves to 0.5") {
    std::vector<float> board(8 * 8);
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) board[y * 8 + x] = static_cast<float>((x + y) % 2);
    auto r = resize_masks(TensorF({1, 8, 8, 1}, board), 4, 4);
    for (float v : r.data()) CHECK(v == doctest::Approx(0.5f));
  }
  SUBCASE("integer factors equal block means") {
    std::mt19937_64 rng(1);
    auto m = test::random_tensor<float>({1, 6, 9, 2}, rng, 0, 1);
    auto r = resize_masks(m, 2, 3);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t c = 0; c < 2; ++c) {
          double acc = 0;
          for (std::size_t y = 3 * i; y < 3 * i + 3; ++y)
            for (std::size_t x = 3 * j; x < 3 * j + 3; ++x) acc += m.data()[(y * 9 + x) * 2 + c];
          CHECK(r.data()[(i * 3 + j) * 2 + c] == doctest::Approx(acc / 9).epsilon(1e-6));
        }
  }
  SUBCASE("upsampling is rejected") {
    CHECK_THROWS_AS(resize_masks(TensorF::zeros({1, 2, 2, 1}), 3, 2), DimensionError);
  }
}
