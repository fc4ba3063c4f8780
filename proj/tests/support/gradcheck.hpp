#pragma once

// Central finite-difference oracle. It only evaluates forward passes, so it
// stays independent of every backward rule it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "tcyolo/autodiff.hpp"

namespace tcyolo::testing {

using Forward = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index checked = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

/// Compares the tape gradient of the scalar `forward` output against central
/// differences at `step` for every element of every input.
inline GradCheckResult gradcheck(const Forward& forward, std::vector<Tensor<double>> inputs,
                                 double step = 1e-5) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.variable(x));
    return forward(tape, vars).value()[0];
  };

  Tape<double> tape(true);
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  Var<double> out = forward(tape, vars);
  tape.backward(out);

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = tape.grad(vars[k]);
    for (Index i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + step;
      const double up = evaluate(inputs);
      inputs[k][i] = saved - step;
      const double down = evaluate(inputs);
      inputs[k][i] = saved;
      const double numeric = (up - down) / (2 * step);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i], numeric));
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[i] - numeric));
      ++result.checked;
    }
  }
  return result;
}

inline Tensor<double> random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Random values kept at least `margin` away from zero, for checks through
/// kinks of relu-like activations.
inline Tensor<double> random_away_from_zero(std::mt19937_64& rng, Shape shape, double margin = 1e-3) {
  Tensor<double> t = random_tensor(rng, std::move(shape));
  for (Index i = 0; i < t.size(); ++i)
    if (std::abs(t[i]) < margin) t[i] = t[i] < 0 ? -margin - 0.1 : margin + 0.1;
  return t;
}

}  // namespace tcyolo::testing
