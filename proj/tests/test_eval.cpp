#include "doctest.h"

#include <cmath>
#include <random>

#include "support/oracles.hpp"
#include "tcyolo/eval.hpp"

using namespace tcyolo;

namespace {

BoxD scored(BoxD b, double s) {
  b.score = s;
  return b;
}

std::vector<BoxD> random_boxes(std::mt19937_64& rng, std::size_t n, bool with_scores) {
  std::uniform_real_distribution<double> pos(0, 40), size(4, 20), score(0, 1);
  std::vector<BoxD> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({pos(rng), pos(rng), size(rng), size(rng), with_scores ? score(rng) : 1.0});
  return out;
}

std::vector<RankedDetection> flags(const std::vector<std::pair<double, bool>>& v) {
  std::vector<RankedDetection> out;
  for (auto [s, t] : v) out.push_back({s, t});
  return out;
}

}  // namespace

TEST_CASE("matching examples") {
  const BoxD g{10, 10, 10, 10};
  auto m = match_detections(std::vector<BoxD>{scored(g, 0.9)}, std::vector<BoxD>{g});
  CHECK(m.det_tp == std::vector<bool>{true});
  CHECK(m.gt_hit == std::vector<bool>{true});

  m = match_detections(std::vector<BoxD>{scored({10, 11, 10, 10}, 0.4), scored({10, 10, 10, 10}, 0.8)},
                       std::vector<BoxD>{g});
  CHECK(m.det_tp == std::vector<bool>{false, true});

  m = match_detections(std::vector<BoxD>{}, std::vector<BoxD>{g});
  CHECK(m.gt_hit == std::vector<bool>{false});
}

TEST_CASE("matching equals the brute-force oracle") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 200; ++t) {
    const auto dets = random_boxes(rng, rng() % 7, true);
    const auto gts = random_boxes(rng, rng() % 7, false);
    const double tau = std::array<double, 3>{0.3, 0.5, 0.7}[std::size_t(t % 3)];
    const auto m = match_detections(dets, gts, tau);
    const auto o = oracle::match(dets, gts, tau);
    CHECK(m.det_tp == o.det_tp);
    CHECK(m.gt_hit == o.gt_hit);
  }
}

TEST_CASE("matching threshold limits") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const auto dets = random_boxes(rng, 1 + rng() % 6, true);
    const auto gts = random_boxes(rng, 1 + rng() % 6, false);
    const auto strict = match_detections(dets, gts, 1.0 + 1e-9);
    for (bool b : strict.det_tp) CHECK_FALSE(b);
    // at tau 0 every detection takes a gt while unmatched gts remain
    const auto loose = match_detections(dets, gts, 0.0);
    const auto tps = std::size_t(std::count(loose.det_tp.begin(), loose.det_tp.end(), true));
    CHECK(tps == std::min(dets.size(), gts.size()));
  }
}

TEST_CASE("average precision examples") {
  CHECK(*average_precision(flags({{0.9, true}, {0.8, true}}), 2) == 1.0);
  CHECK(*average_precision(flags({{0.9, true}, {0.8, false}, {0.7, true}}), 2) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(*average_precision({}, 3) == 0.0);
  CHECK(*average_precision(flags({{0.5, false}}), 0) == 0.0);
  CHECK_FALSE(average_precision({}, 0).has_value());
}

TEST_CASE("average precision equals the oracle") {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::pair<double, bool>> v;
    const std::size_t n = rng() % 7;
    std::size_t tps = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool tp = rng() % 2;
      tps += tp;
      v.push_back({double(rng() % 5) / 4.0, tp});  // coarse scores to force ties
    }
    const std::size_t gts = tps + rng() % 3;
    const auto ap = average_precision(flags(v), gts);
    if (gts == 0 && n == 0) {
      CHECK_FALSE(ap.has_value());
      continue;
    }
    CHECK(std::abs(*ap - oracle::average_precision(v, gts)) <= 1e-12);
  }
}

TEST_CASE("average precision properties") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> u(0.01, 1);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::pair<double, bool>> v;
    std::size_t tps = 0;
    for (int i = 0; i < 8; ++i) {
      const bool tp = rng() % 2;
      tps += tp;
      v.push_back({u(rng), tp});
    }
    const std::size_t gts = tps + 1 + rng() % 3;
    const double ap = *average_precision(flags(v), gts);
    CHECK(ap >= 0);
    CHECK(ap <= 1);

    auto mono = v;
    for (auto& [s, tp] : mono) s = std::exp(3 * s) - 7;
    CHECK(*average_precision(flags(mono), gts) == ap);

    auto worse = v;
    worse.push_back({0.0, false});
    CHECK(*average_precision(flags(worse), gts) <= ap);

    auto better = v;
    better.push_back({u(rng), true});
    const auto c0 = pr_curve(flags(v), gts + 1), c1 = pr_curve(flags(better), gts + 1);
    CHECK(c1.back().recall >= c0.back().recall);
  }
}

TEST_CASE("scenario report on a hand-checked fixture") {
  const BoxD g1{10, 10, 10, 10}, g2{50, 50, 10, 10}, g3{20, 20, 10, 10}, g4{60, 60, 10, 10}, g5{20, 20, 10, 10};
  std::vector<ImageEval> images{
      {"a", {scored(g1, 0.9), scored({90, 90, 5, 5}, 0.8)}, {g1, g2}, {"strong_light", "high_overlap"}},
      {"b", {scored(g3, 0.95), scored(g3, 0.7), scored(g4, 0.6)}, {g3, g4}, {"strong_light"}},
      {"c", {scored({25, 20, 10, 10}, 0.5)}, {g5}, {"weak_light"}},
  };
  const auto rep = evaluate(images);
  CHECK(rep.gt_count == 5);
  CHECK(rep.detections == 6);
  CHECK(rep.true_positives == 3);
  CHECK(*rep.ap == doctest::Approx((1.0 + 1.0 + 3.0 / 5.0) / 5.0).epsilon(1e-15));
  REQUIRE(rep.rows.size() == 3);

  const auto& s = rep.rows[0];
  CHECK(s.tag == "strong_light");
  CHECK(s.images == 2);
  CHECK(s.count == 4);
  CHECK(s.correct == 3);
  CHECK(s.missed == 1);
  CHECK(s.falsely == 2);
  CHECK(s.detections == 5);
  CHECK(s.false_rate() == 0.5);
  CHECK(s.false_rate_of_dets() == 0.4);

  const auto& w = rep.rows[1];
  CHECK(w.tag == "weak_light");
  CHECK(w.correct == 0);
  CHECK(w.missed == 1);
  CHECK(w.falsely == 1);

  const auto& o = rep.rows[2];
  CHECK(o.tag == "high_overlap");
  CHECK(o.count == 2);
  CHECK(o.correct == 1);
  CHECK(o.missed == 1);
  CHECK(o.falsely == 1);

  for (const auto& row : rep.rows) CHECK(row.correct + row.missed == row.count);

  CHECK(format_report_csv(rep).find("strong_light,2,4,3,0.75,2,0.5,0.40000000000000002,1,0.25") != std::string::npos);
  CHECK(format_report(rep).find("75.00%") != std::string::npos);
}

TEST_CASE("perfect detector report") {
  std::mt19937_64 rng(31);
  std::vector<ImageEval> images;
  for (int i = 0; i < 10; ++i) {
    ImageEval im;
    im.id = std::to_string(i);
    im.ground_truth = random_boxes(rng, 1 + rng() % 4, false);
    for (const auto& g : im.ground_truth) im.detections.push_back(scored(g, 0.5 + 0.01 * i));
    im.tags = {i % 2 ? "weak_light" : "normal_light", "normal_occlusion"};
    images.push_back(im);
  }
  const auto rep = evaluate(images);
  CHECK(*rep.ap == doctest::Approx(1.0).epsilon(1e-12));
  for (const auto& row : rep.rows) {
    CHECK(row.correct_rate() == 1.0);
    CHECK(row.falsely == 0);
    CHECK(row.missed == 0);
  }
}

TEST_CASE("unknown scenario tag is rejected") {
  std::vector<ImageEval> images{{"x", {}, {}, {"foggy"}}};
  CHECK_THROWS_AS(scenario_report(images), DataError);
}

TEST_CASE("pr curve file") {
  const auto curve = pr_curve(flags({{0.9, true}, {0.8, false}}), 1);
  REQUIRE(curve.size() == 2);
  CHECK(curve[1].recall == 1.0);
  CHECK(curve[1].precision == 0.5);
  CHECK(format_pr_curve(curve) == "recall,precision,score\n1,1,0.90000000000000002\n1,0.5,0.80000000000000004\n");
}
