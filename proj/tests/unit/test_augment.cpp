#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "support.hpp"
#include "transferlab/augment.hpp"
#include "transferlab/errors.hpp"

using namespace tlab;

namespace {

// Kolmogorov-Smirnov statistic of a sample against U(0, 1).
double ks_uniform(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    d = std::max({d, (i + 1) / n - xs[i], xs[i] - i / n});
  }
  return d;
}

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

}  // namespace

TEST_CASE("interpolation endpoints and midpoint") {
  const Vec a = v2(0, 0);
  const Vec b = v2(1, 1);
  CHECK(interpolate(a, b, 0.0) == a);
  CHECK(interpolate(a, b, 1.0) == b);
  CHECK(interpolate(a, b, 0.25) == v2(0.25, 0.25));
  // The literal listing form weights x_a by lambda.
  CHECK(interpolate(a, b, 0.25, InterpolationConvention::WeightOnA) == v2(0.75, 0.75));
  CHECK_THROWS_AS(interpolate(a, Vec::Zero(3), 0.5), DimensionMismatch);
}

TEST_CASE("impersonation pool counts for |D| = 100, m = 10") {
  const Dataset ds = gen_synthetic(1, 10, 10, 8);
  REQUIRE(ds.size() == 100);
  const auto aug = augment_dataset(ds, PoiPair{2, 5}, AugmentOptions{10, 3});
  REQUIRE(aug.pairs.size() == 100);
  CHECK(aug.tuples.size() == 1000);

  std::size_t cross = 0;
  for (std::size_t p = 0; p < aug.pairs.size(); ++p) {
    const auto& pair = aug.pairs[p];
    const Identity a = ds.samples[pair.index_a].identity;
    const Identity b = ds.samples[pair.index_b].identity;
    if (pair.pool == PairPool::SubjectVictim) {
      ++cross;
      CHECK(a == 2);
      CHECK(b == 5);
    } else {
      CHECK((a == 2 || a == 5));
      CHECK((b != 2 && b != 5));
    }
    // Pair-major layout: every pair yields exactly m tuples with its own endpoints.
    for (std::uint32_t j = 0; j < aug.m; ++j) {
      const auto& t = aug.tuples[p * aug.m + j];
      CHECK(t.index_a == pair.index_a);
      CHECK(t.index_b == pair.index_b);
      CHECK(t.a == a);
      CHECK(t.b == b);
    }
  }
  CHECK(cross == 10);
}

TEST_CASE("dodging draws every pair from the subject and the rest") {
  const Dataset ds = gen_synthetic(2, 6, 10, 8);
  const auto aug = augment_dataset(ds, PoiPair{4, 4}, AugmentOptions{10, 1});
  CHECK(aug.pairs.size() == ds.size());
  for (const auto& t : aug.tuples) {
    CHECK(t.a == 4);
    CHECK(t.b != 4);
  }
  for (const auto& p : aug.pairs) CHECK(p.pool == PairPool::PoiRest);
}

TEST_CASE("interpolated points lie on their segment") {
  const Dataset ds = gen_synthetic(3, 5, 4, 8);
  const auto aug = augment_dataset(ds, PoiPair{0, 1}, AugmentOptions{4, 9});
  for (const auto& t : aug.tuples) {
    CHECK(t.lambda >= 0.0);
    CHECK(t.lambda <= 1.0);
    const Vec expect = (1 - t.lambda) * aug.x_a(t) + t.lambda * aug.x_b(t);
    CHECK((t.x_interp - expect).norm() < 1e-14);
  }
}

TEST_CASE("lambda is uniform: mean and KS test on 10^4 draws") {
  const Dataset ds = gen_synthetic(4, 20, 50, 8);
  const auto aug = augment_dataset(ds, PoiPair{0, 1}, AugmentOptions{10, 5});
  std::vector<double> lambdas;
  for (const auto& t : aug.tuples) lambdas.push_back(t.lambda);
  REQUIRE(lambdas.size() == 10000);
  const double mean = std::accumulate(lambdas.begin(), lambdas.end(), 0.0) / lambdas.size();
  CHECK(std::abs(mean - 0.5) <= 0.02);
  // Asymptotic 1% critical value 1.628 / sqrt(n).
  CHECK(ks_uniform(lambdas) < 1.628 / std::sqrt(10000.0));
}

TEST_CASE("total_synthesized overrides the pair count but keeps the 1/m share") {
  const Dataset ds = gen_synthetic(5, 10, 10, 8);
  AugmentOptions opts{10, 2};
  opts.total_synthesized = 400;
  const auto aug = augment_dataset(ds, PoiPair{0, 1}, opts);
  CHECK(aug.pairs.size() == 40);
  CHECK(aug.tuples.size() == 400);
  const auto cross = std::count_if(aug.pairs.begin(), aug.pairs.end(),
                                   [](const AugPair& p) { return p.pool == PairPool::SubjectVictim; });
  CHECK(cross == 4);
}

TEST_CASE("augmentation is seeded") {
  const Dataset ds = gen_synthetic(6, 6, 5, 8);
  const auto a = augment_dataset(ds, PoiPair{0, 1}, AugmentOptions{3, 8});
  const auto b = augment_dataset(ds, PoiPair{0, 1}, AugmentOptions{3, 8});
  const auto c = augment_dataset(ds, PoiPair{0, 1}, AugmentOptions{3, 9});
  REQUIRE(a.tuples.size() == b.tuples.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.tuples.size(); ++i) {
    CHECK(a.tuples[i].lambda == b.tuples[i].lambda);
    CHECK(a.tuples[i].index_b == b.tuples[i].index_b);
    differs = differs || a.tuples[i].lambda != c.tuples[i].lambda;
  }
  CHECK(differs);
}

TEST_CASE("augmentation preconditions") {
  const Dataset ds = gen_synthetic(7, 4, 3, 8);
  CHECK_THROWS_AS(augment_dataset(ds, PoiPair{0, 1}, AugmentOptions{0, 1}), InvalidArgument);
  CHECK_THROWS_AS(augment_dataset(ds, PoiPair{9, 1}, AugmentOptions{}), InsufficientData);
  CHECK_THROWS_AS(augment_dataset(take_identities(ds, 2), PoiPair{0, 1}, AugmentOptions{}), InsufficientData);
}

TEST_CASE("augmented set round-trip is bit-exact") {
  testing::TempDir dir("augment");
  const Dataset ds = gen_synthetic(8, 5, 4, 8);
  AugmentOptions opts{5, 4};
  opts.convention = InterpolationConvention::WeightOnA;
  const auto aug = augment_dataset(ds, PoiPair{1, 3}, opts);
  save_augmented(aug, dir.path / "a.exag");
  const auto back = load_augmented(dir.path / "a.exag");
  CHECK(same_samples(back.originals, aug.originals));
  CHECK(back.poi == aug.poi);
  CHECK(back.m == aug.m);
  CHECK(back.convention == aug.convention);
  REQUIRE(back.pairs.size() == aug.pairs.size());
  REQUIRE(back.tuples.size() == aug.tuples.size());
  for (std::size_t i = 0; i < aug.tuples.size(); ++i) {
    CHECK(back.tuples[i].lambda == aug.tuples[i].lambda);
    CHECK(back.tuples[i].x_interp == aug.tuples[i].x_interp);
    CHECK(back.tuples[i].a == aug.tuples[i].a);
  }
  for (std::size_t i = 0; i < aug.pairs.size(); ++i) CHECK(back.pairs[i].pool == aug.pairs[i].pool);
}
