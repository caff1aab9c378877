#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "iau/gradcheck.hpp"
#include "iau/losses.hpp"
#include "test_util.hpp"

using namespace iau;
using iau::test::random_tensor;

namespace {

// Rows of the lower Cholesky factor of a Gram matrix realize vectors with that Gram matrix.
TensorD vectors_from_gram(const std::vector<double>& g, std::size_t n) {
  std::vector<double> l(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = g[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = i == j ? std::sqrt(s) : s / l[j * n + j];
    }
  return TensorD({n, n}, l);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Hinge terms from exhaustive enumeration of every (anchor, positive, negative) triple.
double exhaustive_triplet_sum(const TensorD& f, const std::vector<std::size_t>& labels, double margin) {
  const std::size_t b = labels.size(), d = f.dim(1);
  auto row = [&](std::size_t i) { return f.data().subspan(i * d, d); };
  double total = 0;
  for (std::size_t a = 0; a < b; ++a) {
    double worst = 0;
    bool first = true;
    for (std::size_t p = 0; p < b; ++p) {
      if (labels[p] != labels[a]) continue;
      for (std::size_t n = 0; n < b; ++n) {
        if (labels[n] == labels[a]) continue;
        double term = margin + (1 - cosine(row(a), row(p))) - (1 - cosine(row(a), row(n)));
        if (first || term > worst) worst = term;
        first = false;
      }
    }
    total += std::max(0.0, worst);
  }
  return total;
}

}  // namespace

TEST_CASE("cross entropy examples") {
  CHECK(std::abs(cross_entropy(TensorD::zeros({1, 10}), {3}).item() - 2.302585) < 1e-6);
  std::vector<double> sat(5, 0.0);
  sat[2] = 30.0;
  CHECK(cross_entropy(TensorD({1, 5}, sat), {2}).item() < 1e-9);
  CHECK(std::abs(cross_entropy(TensorD({1, 2}, {2, 0}), {0}).item() - std::log1p(std::exp(-2.0))) < 1e-12);
  CHECK(std::abs(cross_entropy(TensorD({1, 2}, {2, 0}), {0}).item() - 0.126928) < 1e-6);
  CHECK_THROWS_AS(cross_entropy(TensorD({1, 2}, {2, 0}), {2}), ContractError);
  CHECK(identity_loss(TensorD::zeros({2, 4}), {0, 1}).item() == doctest::Approx(std::log(4.0)));
}

TEST_CASE("cross entropy decreases as the target logit grows (property)") {
  std::mt19937_64 rng(1);
  auto base = random_tensor<double>({1, 6}, rng);
  double prev = 1e9;
  for (int step = 0; step < 50; ++step) {
    auto x = base.detach();
    x.mutable_data()[4] += 0.5 * step;
    const double l = cross_entropy(x, {4}).item();
    CHECK(l < prev);
    CHECK(l >= 0);
    prev = l;
  }
}

TEST_CASE("cosine distance") {
  TensorD f({3}, {1, 2, 3});
  CHECK(std::abs(cosine_distance(f, f).item()) < 1e-12);
  CHECK(cosine_distance(TensorD({2}, {1, 0}), TensorD({2}, {0, 3})).item() == doctest::Approx(1.0));
  CHECK(cosine_distance(f, TensorD({3}, {-1, -2, -3})).item() == doctest::Approx(2.0));
  CHECK_THROWS_AS(cosine_distance(f, TensorD::zeros({3})), ContractError);
}

TEST_CASE("batch-hard triplet examples") {
  // Two identical-per-class directions far apart: margin satisfied.
  TensorD sep({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  CHECK(batch_hard_triplet(sep, {0, 0, 1, 1}, 0.3).item() == 0.0);

  // Positive cosine 0.8 (distance 0.2), every cross cosine 0.7 (distance 0.3).
  std::vector<double> g{1, .8, .7, .7, .8, 1, .7, .7, .7, .7, 1, .8, .7, .7, .8, 1};
  auto f = vectors_from_gram(g, 4);
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  auto dist = cosine_distance_matrix(f);
  CHECK(std::abs(dist.at({0, 1}) - 0.2) < 1e-12);
  CHECK(std::abs(dist.at({0, 2}) - 0.3) < 1e-12);
  CHECK(std::abs(exhaustive_triplet_sum(f, labels, 0.3) - 0.8) < 1e-12);
  // Summed hinge is 0.8; the loss divides by B = C K = 4.
  const double loss = batch_hard_triplet(f, labels, 0.3).item();
  CHECK(std::abs(loss * 4 - 0.8) < 1e-12);
  CHECK(std::abs(loss - 0.2) < 1e-12);

  CHECK_THROWS_AS(batch_hard_triplet(f, {0, 0, 0, 0}, 0.3), ContractError);
  CHECK_THROWS_AS(batch_hard_triplet(f, {0, 1, 2, 3}, 0.3), ContractError);
  CHECK_THROWS_AS(batch_hard_triplet(f, {0, 0, 0, 1}, 0.3), ContractError);
}

TEST_CASE("batch-hard triplet equals the exhaustive oracle (property)") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<std::size_t> cd(2, 4), kd(2, 4);
    const std::size_t c = cd(rng), k = kd(rng);
    if (c * k > 16) continue;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < k; ++j) labels.push_back(i * 3 + 1);
    std::shuffle(labels.begin(), labels.end(), rng);
    auto f = random_tensor<double>({c * k, 5}, rng);
    const double m = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double loss = batch_hard_triplet(f, labels, m).item();
    CHECK(loss >= 0);
    CHECK(std::abs(loss - exhaustive_triplet_sum(f, labels, m) / double(c * k)) < 1e-6);
  }
}

TEST_CASE("part attention BCE") {
  std::mt19937_64 rng(3);
  auto m = random_tensor<double>({2 * 3, 4, 2, 2}, rng, 0, 1);
  auto half = TensorD::full(m.shape(), 0.5);
  CHECK(std::abs(part_attention_bce(half, m, 2).item() - 2 * std::log(2.0)) < 1e-12);

  std::bernoulli_distribution coin(0.5);
  std::vector<double> bits(48);
  for (auto& b : bits) b = coin(rng);
  TensorD mb({3, 4, 2, 2}, bits);
  CHECK(part_attention_bce(mb, mb, 1).item() < 2e-5);

  // Perturbing A away from M increases the loss.
  std::vector<double> mid(48);
  for (auto& v : mid) v = std::uniform_real_distribution<double>(0.2, 0.8)(rng);
  TensorD mm({3, 4, 2, 2}, mid);
  const double at_target = part_attention_bce(mm, mm, 1).item();
  for (double delta : {-0.1, 0.1}) {
    auto a = add_scalar(mm, delta).detach();
    CHECK(part_attention_bce(a, mm, 1).item() > at_target);
  }
  CHECK_THROWS_AS(part_attention_bce(mm, half, 1), DimensionError);
}

TEST_CASE("total loss") {
  LossWeights w;
  CHECK(w.lambda1 == 1.0);
  CHECK(w.lambda2 == 0.5);
  CHECK(w.margin == 0.3);
  auto t = total_loss(TensorD::scalar(2.0), TensorD::scalar(0.4), TensorD::scalar(0.6), w);
  CHECK(std::abs(t.item() - 2.7) < 1e-12);
  LossWeights zero{0, 0, 0.3};
  CHECK(total_loss(TensorD::scalar(2.0), TensorD::scalar(0.4), TensorD::scalar(0.6), zero).item() == 2.0);
  CHECK(total_loss(TensorD::scalar(0), TensorD::scalar(0), TensorD::scalar(0), w).item() == 0.0);
  CHECK_THROWS_AS((LossWeights{-1, 0.5, 0.3}.validate()), ConfigError);
  CHECK_THROWS_AS((LossWeights{1, 0.5, -0.3}.validate()), ConfigError);
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto masks = random_tensor<double>({2, 3, 2, 2}, rng, 0, 1);
    auto ce = finite_diff_check([](const TensorD& x) { return cross_entropy(x, {0, 2, 1}); },
                                random_tensor<double>({3, 4}, rng, -3, 3), 1e-6);
    CHECK(ce.max_rel_error < 1e-4);
    auto tri = finite_diff_check(
        [](const TensorD& x) { return batch_hard_triplet(x, {0, 0, 1, 1, 2, 2}, 0.3); },
        random_tensor<double>({6, 5}, rng), 1e-6);
    CHECK(tri.max_rel_error < 1e-4);
    auto bce = finite_diff_check(
        [&](const TensorD& x) { return part_attention_bce(sigmoid(x), masks, 2); },
        random_tensor<double>({2, 3, 2, 2}, rng, -3, 3), 1e-6);
    CHECK(bce.max_rel_error < 1e-4);
  }
}
