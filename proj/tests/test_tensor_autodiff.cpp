#include "doctest.h"

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "tcyolo/ops.hpp"

using namespace tcyolo;
using tcyolo::testing::gradcheck;
using tcyolo::testing::random_away_from_zero;
using tcyolo::testing::random_tensor;

namespace {

// Weighted sum with fixed pseudo-random weights so gradient checks do not
// cancel across elements.
Var<double> probe(const Var<double>& v, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return weighted_sum(v, random_tensor(rng, v.shape()));
}

// Values on a 0.01-spaced lattice in shuffled order: distinct by far more than
// the finite-difference step, so maxpool never straddles a tie.
Tensor<double> distinct_values(std::mt19937_64& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  std::vector<double> v(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * double(i) - 0.5;
  std::shuffle(v.begin(), v.end(), rng);
  for (Index i = 0; i < t.size(); ++i) t[i] = v[static_cast<std::size_t>(i)];
  return t;
}

}  // namespace

TEST_CASE("conv2d output extent follows the sliding-window formula") {
  for (Index h = 1; h <= 16; ++h)
    for (Index f : {1, 3, 5})
      for (Index s : {1, 2})
        for (Index p = 0; p <= 3; ++p) {
          const Index expected = (h + 2 * p - f) >= 0 ? (h + 2 * p - f) / s + 1 : 0;
          CHECK(window_output_extent(h, f, s, p) == expected);
          if (expected < 1) continue;
          Tape<double> tape(false);
          auto x = tape.constant(Tensor<double>(Shape{1, 1, h, h}, 1.0));
          auto w = tape.constant(Tensor<double>(Shape{1, 1, f, f}, 1.0));
          auto y = conv2d(x, w, Conv2dOptions{s, p, 1});
          CHECK(y.dim(2) == expected);
          CHECK(y.dim(3) == expected);
          auto m = maxpool2d(x, f, s, p);
          CHECK(m.dim(2) == expected);
        }
}

TEST_CASE("conv2d shape and identity examples") {
  Tape<double> tape(false);
  SUBCASE("focus-sized pointwise convolution") {
    auto x = tape.constant(Tensor<double>(Shape{1, 12, 208, 208}, 0.5));
    auto w = tape.constant(Tensor<double>(Shape{32, 12, 1, 1}, 0.1));
    auto y = conv2d(x, w, Conv2dOptions{});
    CHECK(y.shape() == Shape{1, 32, 208, 208});
  }
  SUBCASE("1x1 identity kernel") {
    std::mt19937_64 rng(1);
    auto xt = random_tensor(rng, Shape{1, 1, 5, 5});
    auto x = tape.constant(xt);
    auto w = tape.constant(Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
    auto y = conv2d(x, w, Conv2dOptions{});
    CHECK((y.value().values() == xt.values()).all());
  }
  SUBCASE("errors") {
    auto x = tape.constant(Tensor<double>(Shape{1, 3, 4, 4}));
    auto w = tape.constant(Tensor<double>(Shape{2, 2, 3, 3}));
    CHECK_THROWS_AS(conv2d(x, w, Conv2dOptions{}), DimensionError);
    auto w5 = tape.constant(Tensor<double>(Shape{2, 3, 5, 5}));
    CHECK_THROWS_AS(conv2d(x, w5, Conv2dOptions{}), ConfigError);
  }
}

TEST_CASE("conv2d with dilation 3 matches finite differences") {
  std::mt19937_64 rng(7);
  auto x = random_tensor(rng, Shape{1, 2, 6, 6});
  auto w = random_tensor(rng, Shape{1, 2, 3, 3});
  auto b = random_tensor(rng, Shape{1});
  {
    Tape<double> tape(false);
    auto y = conv2d(tape.constant(x), tape.constant(w), Conv2dOptions{1, 3, 3});
    CHECK(y.shape() == Shape{1, 1, 6, 6});
  }
  auto r = gradcheck(
      [](Tape<double>&, const std::vector<Var<double>>& v) {
        return sum(conv2d(v[0], v[1], &v[2], Conv2dOptions{1, 3, 3}));
      },
      {x, w, b});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("conv2d gradients with stride and padding") {
  std::mt19937_64 rng(8);
  for (Index stride : {1, 2}) {
    auto r = gradcheck(
        [stride](Tape<double>&, const std::vector<Var<double>>& v) {
          return probe(conv2d(v[0], v[1], &v[2], Conv2dOptions{stride, 1, 1}));
        },
        {random_tensor(rng, Shape{2, 3, 5, 5}), random_tensor(rng, Shape{2, 3, 3, 3}),
         random_tensor(rng, Shape{2})});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("activation values") {
  CHECK(apply_activation<double>({ActivationKind::mish}, 0.0) == 0.0);
  CHECK(apply_activation<double>({ActivationKind::leaky_relu, 0.1}, -2.0) == doctest::Approx(-0.2));
  CHECK(apply_activation<double>({ActivationKind::mish}, -1.0) ==
        doctest::Approx(-1.0 * std::tanh(std::log1p(std::exp(-1.0)))));
  CHECK(apply_activation<double>({ActivationKind::mish}, -1.0) == doctest::Approx(-0.3034).epsilon(1e-4));
  CHECK(apply_activation<double>({ActivationKind::relu}, -3.0) == 0.0);
  CHECK(apply_activation<double>({ActivationKind::sigmoid}, 0.0) == 0.5);
  CHECK_THROWS_AS(parse_activation("swish"), ConfigError);
  CHECK(parse_activation("leaky").slope == 0.1);
}

TEST_CASE("activation gradients") {
  std::mt19937_64 rng(9);
  for (auto kind : {ActivationKind::mish, ActivationKind::leaky_relu, ActivationKind::sigmoid,
                    ActivationKind::relu}) {
    auto r = gradcheck(
        [kind](Tape<double>&, const std::vector<Var<double>>& v) {
          return probe(activation(v[0], Activation{kind, 0.1}));
        },
        {random_away_from_zero(rng, Shape{2, 3, 4, 4})});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("batchnorm") {
  SUBCASE("constant channel normalizes to zero") {
    Tape<double> tape(false);
    Tensor<double> rm(Shape{2}), rv(Shape{2}, 1.0);
    auto x = tape.constant(Tensor<double>(Shape{2, 2, 3, 3}, 4.0));
    auto g = tape.constant(Tensor<double>(Shape{2}, 1.0));
    auto b = tape.constant(Tensor<double>(Shape{2}, 0.0));
    auto y = batchnorm(x, g, b, rm, rv, BatchNormOptions{});
    CHECK(y.value().values().abs().maxCoeff() == 0.0);
    CHECK(rm[0] == doctest::Approx(0.03 * 4.0));
  }
  SUBCASE("affine stage on standardized data") {
    Tape<double> tape(false);
    Tensor<double> xt(Shape{1, 1, 2, 2}, std::vector<double>{-1, 1, -1, 1});
    Tensor<double> rm(Shape{1}), rv(Shape{1}, 1.0);
    auto y = batchnorm(tape.constant(xt), tape.constant(Tensor<double>(Shape{1}, 2.0)),
                       tape.constant(Tensor<double>(Shape{1}, 3.0)), rm, rv, BatchNormOptions{});
    for (Index i = 0; i < 4; ++i) CHECK(y.value()[i] == doctest::Approx(2 * xt[i] + 3).epsilon(1e-5));
  }
  SUBCASE("infer mode uses running statistics") {
    Tape<double> tape(false);
    Tensor<double> rm(Shape{1}, 1.0), rv(Shape{1}, 4.0);
    auto y = batchnorm(tape.constant(Tensor<double>(Shape{1, 1, 1, 1}, 5.0)),
                       tape.constant(Tensor<double>(Shape{1}, 1.0)),
                       tape.constant(Tensor<double>(Shape{1}, 0.0)), rm, rv,
                       BatchNormOptions{NormMode::infer});
    CHECK(y.value()[0] == doctest::Approx(2.0).epsilon(1e-5));
    CHECK(rm[0] == 1.0);
  }
  SUBCASE("gradients in both modes") {
    std::mt19937_64 rng(10);
    for (auto mode : {NormMode::train, NormMode::infer}) {
      auto r = gradcheck(
          [mode](Tape<double>&, const std::vector<Var<double>>& v) {
            Tensor<double> rm(Shape{3}, 0.1), rv(Shape{3}, 0.9);
            return probe(batchnorm(v[0], v[1], v[2], rm, rv, BatchNormOptions{mode}));
          },
          {random_tensor(rng, Shape{2, 3, 4, 4}), random_tensor(rng, Shape{3}, 0.5, 1.5),
           random_tensor(rng, Shape{3})});
      CHECK(r.max_rel_error < 1e-4);
    }
  }
  SUBCASE("parameter length mismatch") {
    Tape<double> tape(false);
    Tensor<double> rm(Shape{2}), rv(Shape{2});
    auto x = tape.constant(Tensor<double>(Shape{1, 3, 2, 2}));
    auto g = tape.constant(Tensor<double>(Shape{2}));
    CHECK_THROWS_AS(batchnorm(x, g, g, rm, rv, BatchNormOptions{}), DimensionError);
  }
}

TEST_CASE("pooling, resize, concat and slicing") {
  Tape<double> tape(false);
  SUBCASE("13x13 maxpool picks the maximum") {
    std::mt19937_64 rng(11);
    auto xt = random_tensor(rng, Shape{1, 1, 13, 13});
    auto y = maxpool2d(tape.constant(xt), 13, 13, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value()[0] == xt.values().maxCoeff());
  }
  SUBCASE("maxpool ties route to the first row-major index") {
    Tape<double> t2(true);
    auto x = t2.variable(Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
    t2.backward(sum(maxpool2d(x, 2, 2, 0)));
    auto g = t2.grad(x);
    CHECK(g[0] == 1.0);
    CHECK(g[1] + g[2] + g[3] == 0.0);
  }
  SUBCASE("global average of ones") {
    auto y = global_avgpool(tape.constant(Tensor<double>(Shape{1, 4, 7, 7}, 1.0)));
    CHECK(y.shape() == Shape{1, 4, 1, 1});
    CHECK((y.value().values() == 1.0).all());
  }
  SUBCASE("concat channel sum and extent mismatch") {
    auto a = tape.constant(Tensor<double>(Shape{1, 2, 3, 3}));
    auto b = tape.constant(Tensor<double>(Shape{1, 5, 3, 3}));
    CHECK(concat_channels({a, b}).shape() == Shape{1, 7, 3, 3});
    auto c = tape.constant(Tensor<double>(Shape{1, 5, 4, 3}));
    CHECK_THROWS_AS(concat_channels({a, c}), DimensionError);
  }
  SUBCASE("resize to non-positive size") {
    auto a = tape.constant(Tensor<double>(Shape{1, 2, 3, 3}));
    CHECK_THROWS_AS(resize_nearest(a, 0, 3), ConfigError);
    CHECK(resize_nearest(a, 6, 6).shape() == Shape{1, 2, 6, 6});
  }
  SUBCASE("stride2 slice offsets") {
    auto a = tape.constant(Tensor<double>(Shape{1, 1, 4, 4}));
    CHECK_THROWS_AS(stride2_slice(a, 2, 0), ConfigError);
    CHECK(stride2_slice(a, 1, 1).shape() == Shape{1, 1, 2, 2});
  }
}

TEST_CASE("concat then channel slicing is bit-exact") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> ext(1, 5);
    const Index n = ext(rng), h = ext(rng), w = ext(rng);
    std::vector<Tensor<double>> parts;
    const int count = ext(rng);
    for (int k = 0; k < count; ++k) parts.push_back(random_tensor(rng, Shape{n, ext(rng), h, w}));
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (auto& p : parts) vars.push_back(tape.constant(p));
    auto joined = concat_channels<double>(std::span<const Var<double>>(vars));
    Index offset = 0;
    for (auto& p : parts) {
      auto back = slice_channels(joined, offset, p.dim(1));
      CHECK(back.shape() == p.shape());
      CHECK((back.value().values() == p.values()).all());
      offset += p.dim(1);
    }
  }
}

TEST_CASE("pooling and resampling gradients") {
  std::mt19937_64 rng(13);
  auto check = [&](const tcyolo::testing::Forward& f, std::vector<Tensor<double>> in) {
    auto r = gradcheck(f, std::move(in));
    CHECK(r.max_rel_error < 1e-4);
  };
  check([](Tape<double>&, const std::vector<Var<double>>& v) { return probe(maxpool2d(v[0], 3, 1, 1)); },
        {distinct_values(rng, Shape{1, 2, 5, 5})});
  check([](Tape<double>&, const std::vector<Var<double>>& v) { return probe(maxpool2d(v[0], 2, 2, 0)); },
        {distinct_values(rng, Shape{2, 1, 4, 6})});
  check([](Tape<double>&, const std::vector<Var<double>>& v) { return probe(global_avgpool(v[0])); },
        {random_tensor(rng, Shape{2, 3, 3, 4})});
  check([](Tape<double>&, const std::vector<Var<double>>& v) { return probe(resize_nearest(v[0], 6, 5)); },
        {random_tensor(rng, Shape{1, 2, 3, 2})});
  check([](Tape<double>&, const std::vector<Var<double>>& v) { return probe(concat_channels({v[0], v[1]})); },
        {random_tensor(rng, Shape{2, 1, 3, 3}), random_tensor(rng, Shape{2, 2, 3, 3})});
  check([](Tape<double>&, const std::vector<Var<double>>& v) { return probe(stride2_slice(v[0], 1, 0)); },
        {random_tensor(rng, Shape{1, 2, 4, 4})});
}

TEST_CASE("fan-out gradients are additive and each node is visited once") {
  std::mt19937_64 rng(14);
  auto xt = random_away_from_zero(rng, Shape{1, 2, 3, 3});
  auto grad_of = [&](int which) {
    Tape<double> tape;
    auto x = tape.variable(xt);
    auto f = activation(x, Activation{ActivationKind::mish});
    auto g = activation(x, Activation{ActivationKind::sigmoid});
    Var<double> y = which == 0 ? add(f, g) : (which == 1 ? f : g);
    auto loss = probe(y);
    tape.backward(loss);
    if (which == 0) CHECK(tape.backward_visits() == tape.size() - 1);
    return tape.grad(x);
  };
  auto both = grad_of(0), left = grad_of(1), right = grad_of(2);
  for (Index i = 0; i < xt.size(); ++i) CHECK(both[i] == doctest::Approx(left[i] + right[i]).epsilon(1e-14));
}

TEST_CASE("forward and backward stay finite on finite inputs") {
  std::mt19937_64 rng(15);
  Tape<double> tape;
  auto x = tape.variable(random_tensor(rng, Shape{1, 2, 6, 6}, -50, 50));
  auto w = tape.variable(random_tensor(rng, Shape{4, 2, 3, 3}));
  auto y = activation(conv2d(x, w, Conv2dOptions{1, 1, 1}), Activation{ActivationKind::mish});
  tape.backward(sum(y));
  CHECK(y.value().all_finite());
  CHECK(tape.grad(x).all_finite());
  CHECK(tape.grad(w).all_finite());
}
