#include "doctest.h"

#include <algorithm>
#include <random>

#include "support/oracles.hpp"
#include "tcyolo/anchors.hpp"

using namespace tcyolo;

namespace {

std::vector<AnchorWH> planted(std::uint64_t seed, int per_cluster = 40) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  std::vector<AnchorWH> dims;
  const AnchorSet ref = AnchorSet::reference();
  for (const auto& a : ref.all())
    for (int i = 0; i < per_cluster; ++i)
      dims.push_back({a.w * (1 + jitter(rng)), a.h * (1 + jitter(rng))});
  std::shuffle(dims.begin(), dims.end(), rng);
  return dims;
}

std::vector<AnchorWH> random_dims(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> s(4, 200);
  std::vector<AnchorWH> dims;
  for (int i = 0; i < n; ++i) dims.push_back({s(rng), s(rng)});
  return dims;
}

}  // namespace

TEST_CASE("identical boxes collapse every centroid onto them") {
  std::vector<AnchorWH> dims(20, AnchorWH{12, 7});
  dims.push_back({1, 1});  // second distinct dim so k=2 is allowed
  KMeansOptions opt;
  opt.k = 2;
  auto r = kmeans_dims(dims, opt);
  CHECK(std::count(r.centroids.begin(), r.centroids.end(), AnchorWH{12, 7}) == 1);
  CHECK(r.distance_history.back() == 0.0);

  std::vector<AnchorWH> same(10, AnchorWH{12, 7});
  opt.k = 1;
  auto one = kmeans_dims(same, opt);
  CHECK(one.centroids[0] == AnchorWH{12, 7});
  CHECK(one.distance_history.back() == 0.0);
}

TEST_CASE("k=1 median update") {
  std::vector<AnchorWH> dims{{2, 2}, {3, 3}, {4, 4}};
  KMeansOptions opt;
  opt.k = 1;
  auto r = kmeans_dims(dims, opt);
  CHECK(r.centroids[0] == AnchorWH{3, 3});

  // {2,2},{4,4}: the median (3,3) is worse than either seed, so it is rejected
  std::vector<AnchorWH> pair{{2, 2}, {4, 4}};
  auto p = kmeans_dims(pair, opt);
  CHECK((p.centroids[0] == AnchorWH{2, 2} || p.centroids[0] == AnchorWH{4, 4}));
}

TEST_CASE("too few distinct dimensions") {
  std::vector<AnchorWH> dims{{2, 2}, {2, 2}, {4, 4}};
  CHECK_THROWS_AS(kmeans_anchors(dims), DataError);
}

TEST_CASE("planted reference anchors are recovered within 5%") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    KMeansOptions opt;
    opt.seed = seed;
    auto got = kmeans_anchors(planted(seed), opt);
    const AnchorSet ref = AnchorSet::reference();
    REQUIRE(got.size() == 9);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(std::abs(got.all()[i].w / ref.all()[i].w - 1) < 0.05);
      CHECK(std::abs(got.all()[i].h / ref.all()[i].h - 1) < 0.05);
    }
  }
}

TEST_CASE("result is independent of input order") {
  std::mt19937_64 rng(31);
  auto dims = random_dims(rng, 150);
  KMeansOptions opt;
  opt.seed = 5;
  auto a = kmeans_anchors(dims, opt);
  for (int t = 0; t < 5; ++t) {
    std::shuffle(dims.begin(), dims.end(), rng);
    CHECK(kmeans_anchors(dims, opt).all() == a.all());
  }
}

TEST_CASE("total within-cluster distance never increases") {
  std::mt19937_64 rng(32);
  for (int t = 0; t < 30; ++t) {
    auto dims = random_dims(rng, 200);
    KMeansOptions opt;
    opt.seed = std::uint64_t(t);
    auto r = kmeans_dims(dims, opt);
    for (std::size_t i = 1; i < r.distance_history.size(); ++i)
      CHECK(r.distance_history[i] <= r.distance_history[i - 1] + 1e-12);
  }
}

TEST_CASE("mean_best_iou") {
  const AnchorSet set = AnchorSet::reference();
  const auto& ref = set.all();
  CHECK(mean_best_iou(ref, ref) == 1.0);
  std::vector<AnchorWH> single{{10, 13}};
  CHECK(mean_best_iou(single, ref) == 1.0);
  std::mt19937_64 rng(33);
  for (int t = 0; t < 50; ++t) {
    auto dims = random_dims(rng, 30);
    auto anchors = random_dims(rng, 9);
    CHECK(std::abs(mean_best_iou(dims, anchors) - oracle::mean_best_iou(dims, anchors)) < 1e-12);
  }
}

TEST_CASE("k-means anchors beat random anchor sets") {
  std::mt19937_64 rng(34);
  auto dims = random_dims(rng, 300);
  const double fitted = mean_best_iou(dims, kmeans_anchors(dims).all());
  for (int t = 0; t < 20; ++t) CHECK(fitted >= mean_best_iou(dims, random_dims(rng, 9)));
}
