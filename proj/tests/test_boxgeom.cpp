#include "doctest.h"

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tcyolo/boxgeom.hpp"
#include "tcyolo/loss.hpp"

using namespace tcyolo;

namespace {

BoxD random_box(std::mt19937_64& rng, double extent = 100.0) {
  std::uniform_real_distribution<double> pos(0, extent), size(2, extent / 3), score(0, 1);
  BoxD b{pos(rng), pos(rng), size(rng), size(rng)};
  b.score = score(rng);
  return b;
}

}  // namespace

TEST_CASE("iou examples") {
  const BoxD a = BoxD::from_corners(0, 0, 1, 1);
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, BoxD::from_corners(5, 5, 6, 6)) == 0.0);
  CHECK(iou(a, BoxD::from_corners(0.5, 0, 1.5, 1)) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(BoxD{0, 0, 0, 0}, BoxD{0, 0, 0, 0}) == 0.0);
}

TEST_CASE("giou examples") {
  const BoxD a{0.5, 0.5, 1, 1};
  CHECK(giou(a, a) == 1.0);
  CHECK(giou_loss(a, a).loss == 0.0);
  const BoxD b{3.5, 0.5, 1, 1};
  CHECK(giou(a, b) == doctest::Approx(-0.5));
}

TEST_CASE("iou-family properties on random pairs") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> k(0.1, 10);
  for (int t = 0; t < 500; ++t) {
    BoxD a = random_box(rng), b = random_box(rng);
    CHECK(iou(a, b) == iou(b, a));
    CHECK(giou(a, b) <= iou(a, b) + 1e-15);
    CHECK(giou(a, b) > -1.0);
    CHECK(diou(a, b) <= iou(a, b) + 1e-15);
    const double s = k(rng);
    BoxD as{a.cx * s, a.cy * s, a.w * s, a.h * s}, bs{b.cx * s, b.cy * s, b.w * s, b.h * s};
    CHECK(std::abs(iou(as, bs) - iou(a, b)) < 1e-12);
    CHECK(std::abs(giou(as, bs) - giou(a, b)) < 1e-12);
  }
  // Containment: enclosing box equals the union's bounding box.
  const BoxD outer{50, 50, 40, 40}, inner{52, 49, 10, 12};
  CHECK(giou(outer, inner) == doctest::Approx(iou(outer, inner)).epsilon(1e-14));
}

TEST_CASE("giou loss gradient matches finite differences") {
  std::mt19937_64 rng(22);
  int checked = 0;
  double worst = 0;
  while (checked < 100) {
    BoxD p = random_box(rng, 40), t = random_box(rng, 40);
    if (iou(p, t) == 0 && rng() % 2) continue;  // keep a mix of overlapping pairs
    auto f = [&](const std::array<double, 4>& v) {
      return giou_loss(BoxD{v[0], v[1], v[2], v[3]}, t).loss;
    };
    const auto g = giou_loss(p, t).grad;
    std::array<double, 4> v{p.cx, p.cy, p.w, p.h};
    for (int i = 0; i < 4; ++i) {
      auto up = v, dn = v;
      up[std::size_t(i)] += 1e-5;
      dn[std::size_t(i)] -= 1e-5;
      const double num = (f(up) - f(dn)) / 2e-5;
      worst = std::max(worst, tcyolo::testing::relative_error(g[std::size_t(i)], num));
    }
    ++checked;
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("diou nms") {
  SUBCASE("single box kept unchanged") {
    std::vector<BoxD> boxes{{10, 10, 4, 4}};
    boxes[0].score = 0.9;
    auto kept = diou_nms<double>(boxes, 0.45, 0.25);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].cx == 10);
    CHECK(kept[0].score == 0.9);
  }
  SUBCASE("identical boxes keep the higher score") {
    std::vector<BoxD> boxes{{10, 10, 4, 4}, {10, 10, 4, 4}};
    boxes[0].score = 0.8;
    boxes[1].score = 0.9;
    auto idx = diou_nms_indices<double>(boxes, 0.5, 0.0);
    REQUIRE(idx.size() == 1);
    CHECK(idx[0] == 1);
  }
  SUBCASE("empty input") { CHECK(diou_nms<double>(std::vector<BoxD>{}, 0.45, 0.0).empty()); }
  SUBCASE("score threshold drops first") {
    std::vector<BoxD> boxes{{10, 10, 4, 4}, {50, 50, 4, 4}};
    boxes[0].score = 0.1;
    boxes[1].score = 0.3;
    auto idx = diou_nms_indices<double>(boxes, 0.45, 0.25);
    REQUIRE(idx.size() == 1);
    CHECK(idx[0] == 1);
  }
}

TEST_CASE("diou nms agrees with the exhaustive oracle and is an ordered subset") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> count(0, 10);
  std::uniform_real_distribution<double> theta(0.0, 0.9), thr(0.0, 0.5);
  for (int t = 0; t < 300; ++t) {
    std::vector<BoxD> boxes;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) boxes.push_back(random_box(rng, 60));
    const double th = theta(rng), st = thr(rng);
    auto got = diou_nms_indices<double>(boxes, th, st);
    CHECK(got == oracle::nms(boxes, th, st));
    for (std::size_t i = 1; i < got.size(); ++i) CHECK(boxes[got[i - 1]].score >= boxes[got[i]].score);
  }
}

TEST_CASE("raising the overlap threshold can change which boxes survive") {
  // Greedy NMS is not monotone in the threshold: A overlaps B moderately, B
  // overlaps C and D heavily, A touches neither. At a low threshold A removes
  // B, so C survives (and removes D); at a high threshold B survives and
  // removes C, which the low-threshold result kept.
  std::vector<BoxD> boxes{{10, 10, 10, 10}, {16, 10, 10, 10}, {19, 10, 10, 10}, {19, 11, 10, 10}};
  boxes[0].score = 0.9;
  boxes[1].score = 0.8;
  boxes[2].score = 0.7;
  boxes[3].score = 0.6;
  const double ab = diou(boxes[0], boxes[1]);
  const double low = ab - 0.05, high = ab + 0.01;
  REQUIRE(diou(boxes[1], boxes[2]) > high);
  REQUIRE(diou(boxes[1], boxes[3]) > high);
  REQUIRE(diou(boxes[0], boxes[2]) <= low);
  REQUIRE(diou(boxes[0], boxes[3]) <= low);
  REQUIRE(diou(boxes[2], boxes[3]) > low);
  const auto at_low = diou_nms_indices<double>(boxes, low, 0.0);
  const auto at_high = diou_nms_indices<double>(boxes, high, 0.0);
  CHECK(at_low == std::vector<std::size_t>{0, 2});
  CHECK(at_high == std::vector<std::size_t>{0, 1});
  // What does hold: once the threshold passes every pairwise DIoU, nothing is removed.
  CHECK(diou_nms_indices<double>(boxes, 1.0, 0.0).size() == boxes.size());
}

TEST_CASE("decode_head") {
  const AnchorSet anchors = AnchorSet::reference();
  SUBCASE("zero logits at cell (0,0)") {
    Tensor<double> raw(Shape{1, 18, 2, 2});
    auto boxes = decode_head(raw, anchors.scale(0), 8.0, 1);
    REQUIRE(boxes.size() == 12);
    CHECK(boxes[0].cx == 4.0);
    CHECK(boxes[0].cy == 4.0);
    CHECK(boxes[0].w == 10.0);
    CHECK(boxes[0].h == 13.0);
    CHECK(boxes[0].score == 0.25);
  }
  SUBCASE("very negative objectness gives a vanishing score") {
    Tensor<double> raw(Shape{1, 18, 1, 1});
    raw.at(0, 4, 0, 0) = -200;
    auto boxes = decode_head(raw, anchors.scale(0), 8.0, 1);
    CHECK(boxes[0].score < 1e-80);
  }
  SUBCASE("channel mismatch") {
    Tensor<double> raw(Shape{1, 17, 1, 1});
    CHECK_THROWS_AS(decode_head(raw, anchors.scale(0), 8.0, 1), ConfigError);
  }
  SUBCASE("encode then decode recovers the box") {
    std::mt19937_64 rng(24);
    std::uniform_real_distribution<double> frac(0.01, 0.99), size(1, 300);
    for (int t = 0; t < 100; ++t) {
      const Index row = Index(rng() % 4), col = Index(rng() % 4), a = Index(rng() % 3);
      BoxD box{(double(col) + frac(rng)) * 16, (double(row) + frac(rng)) * 16, size(rng), size(rng)};
      const auto code = encode_box(box, row, col, anchors.scale(1)[std::size_t(a)], 16);
      Tensor<double> raw(Shape{1, 18, 4, 4});
      for (Index f = 0; f < 4; ++f) raw.at(0, a * 6 + f, row, col) = code[std::size_t(f)];
      auto boxes = decode_head(raw, anchors.scale(1), 16.0, 1);
      const BoxD& got = boxes[std::size_t(a * 16 + row * 4 + col)];
      CHECK(std::abs(got.cx - box.cx) < 1e-9);
      CHECK(std::abs(got.cy - box.cy) < 1e-9);
      CHECK(std::abs(got.w - box.w) < 1e-9);
      CHECK(std::abs(got.h - box.h) < 1e-9);
    }
  }
  SUBCASE("boxes always have positive extents") {
    std::mt19937_64 rng(25);
    auto raw = tcyolo::testing::random_tensor(rng, Shape{1, 18, 3, 3}, -1000, 1000);
    for (const auto& b : decode_head(raw, anchors.scale(2), 32.0, 1)) {
      CHECK(b.w > 0);
      CHECK(b.h > 0);
    }
  }
}

TEST_CASE("assign_targets") {
  const AnchorSet anchors = AnchorSet::reference();
  const std::vector<GridSize> grids{{52, 52, 8}, {26, 26, 16}, {13, 13, 32}};
  SUBCASE("smallest anchor for a (10,13) box") {
    std::vector<BoxD> gts{{100, 60, 10, 13}};
    auto a = assign_targets(gts, anchors, grids);
    REQUIRE(a.size() == 1);
    CHECK(a[0].scale == 0);
    CHECK(a[0].anchor == 0);
    CHECK(a[0].col == 12);
    CHECK(a[0].row == 7);
  }
  SUBCASE("a box equal to an anchor selects that anchor") {
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      std::vector<BoxD> gts{{200, 200, anchors.all()[k].w, anchors.all()[k].h}};
      auto a = assign_targets(gts, anchors, grids);
      CHECK(std::size_t(a[0].scale * 3 + a[0].anchor) == k);
      CHECK(shape_iou(gts[0].w, gts[0].h, anchors.all()[k].w, anchors.all()[k].h) == 1.0);
    }
  }
  SUBCASE("two boxes in distinct cells") {
    std::vector<BoxD> gts{{20, 20, 30, 60}, {300, 300, 30, 60}};
    auto a = assign_targets(gts, anchors, grids);
    REQUIRE(a.size() == 2);
    CHECK((a[0].row != a[1].row || a[0].col != a[1].col));
    CHECK(a[0].scale == a[1].scale);
  }
  SUBCASE("zero-area box is rejected with the record id") {
    std::vector<BoxD> gts{{20, 20, 0, 10}};
    try {
      assign_targets(gts, anchors, grids, 0, "img_007");
      FAIL("expected a DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("img_007") != std::string::npos);
    }
  }
  SUBCASE("argmax invariant under uniform scaling") {
    std::mt19937_64 rng(26);
    std::uniform_real_distribution<double> size(2, 400), k(0.2, 5);
    for (int t = 0; t < 100; ++t) {
      const double s = k(rng);
      std::vector<AnchorWH> scaled;
      for (const auto& a : anchors.all()) scaled.push_back({a.w * s, a.h * s});
      BoxD gt{10, 10, size(rng), size(rng)};
      BoxD gts_scaled{10, 10, gt.w * s, gt.h * s};
      auto a1 = assign_targets(std::vector<BoxD>{gt}, anchors, grids);
      auto a2 = assign_targets(std::vector<BoxD>{gts_scaled}, AnchorSet(scaled), grids);
      CHECK(a1[0].scale == a2[0].scale);
      CHECK(a1[0].anchor == a2[0].anchor);
    }
  }
}

TEST_CASE("format_detection") {
  BoxD b = BoxD::from_corners(1, 2, 3.5, 4.25);
  b.score = 0.5;
  CHECK(format_detection("img1", b) == "img1 0 0.5000 1.0000 2.0000 3.5000 4.2500");
}

namespace {

const std::array<double, 3> kStrides{8, 16, 32};

AnchorSet toy_anchors() {
  return AnchorSet({{6, 8}, {10, 7}, {12, 12}, {16, 20}, {24, 18}, {28, 30},
                    {40, 36}, {50, 60}, {70, 64}});
}

}  // namespace

TEST_CASE("total_loss gradient on toy heads") {
  std::mt19937_64 rng(27);
  const AnchorSet anchors = toy_anchors();
  for (Index g : {1, 2}) {
    std::vector<Tensor<double>> raw;
    for (int s = 0; s < 3; ++s)
      raw.push_back(tcyolo::testing::random_tensor(rng, Shape{2, 3 * 7, g, g}));
    std::vector<Assignment> asg;
    Assignment a;
    a.image = 1;
    a.scale = 0;
    a.anchor = 2;
    a.target = BoxD{5, 6, 11, 14};
    a.class_id = 1;
    asg.push_back(a);
    a.image = 0;
    a.scale = 2;
    a.anchor = 0;
    a.row = g - 1;
    a.target = BoxD{20, 30, 35, 40};
    a.class_id = 0;
    asg.push_back(a);
    auto r = tcyolo::testing::gradcheck(
        [&](Tape<double>&, const std::vector<Var<double>>& v) {
          return total_loss<double>(v, kStrides, anchors, asg, 2).total;
        },
        raw);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("total_loss limits") {
  const AnchorSet anchors = toy_anchors();
  Tape<double> tape(false);
  SUBCASE("zero positives leave only the objectness term") {
    std::mt19937_64 rng(28);
    std::vector<Var<double>> heads;
    for (Index g : {4, 2, 1})
      heads.push_back(tape.constant(tcyolo::testing::random_tensor(rng, Shape{1, 18, g, g})));
    auto r = total_loss<double>(heads, kStrides, anchors, {}, 1);
    CHECK(r.parts.box == 0.0);
    CHECK(r.parts.cls == 0.0);
    CHECK(r.parts.positives == 0);
    CHECK(r.total.value()[0] == doctest::Approx(r.parts.obj).epsilon(1e-14));
  }
  SUBCASE("exact saturated predictions drive the loss to zero") {
    std::vector<Tensor<double>> raw;
    for (Index g : {4, 2, 1}) raw.push_back(Tensor<double>(Shape{1, 18, g, g}, -40.0));
    Assignment a;
    a.scale = 1;
    a.anchor = 1;
    a.row = 1;
    a.col = 0;
    a.target = BoxD{9, 21, 20, 25};
    const auto code = encode_box(a.target, a.row, a.col, anchors.scale(1)[1], 16);
    for (Index f = 0; f < 4; ++f) raw[1].at(0, 6 + f, 1, 0) = code[std::size_t(f)];
    raw[1].at(0, 6 + 4, 1, 0) = 40;
    raw[1].at(0, 6 + 5, 1, 0) = 40;
    std::vector<Var<double>> heads;
    for (auto& t : raw) heads.push_back(tape.constant(t));
    auto r = total_loss<double>(heads, kStrides, anchors, std::vector<Assignment>{a}, 1);
    CHECK(r.parts.total < 1e-12);
  }
}
