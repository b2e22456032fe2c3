#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "evacnet/numcore/tape.hpp"

namespace evacnet::numcore {

/// Compares reverse-mode gradients against central differences
/// (f(θ+h) - f(θ-h)) / 2h for every entry of every parameter.
///
/// `f(tape, vars)` must build a scalar loss from the tape variables that
/// wrap `params`. The returned value is the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, floor) over all entries;
/// the floor keeps entries whose true gradient is ~0 from dividing
/// round-off by round-off.
template <typename Scalar, typename F>
Scalar finite_diff_check(F&& f, std::vector<MatrixX<Scalar>> params, Scalar h, Scalar floor = Scalar(1e-6)) {
  auto evaluate = [&](const std::vector<MatrixX<Scalar>>& ps, std::vector<MatrixX<Scalar>>* grads) {
    BasicTape<Scalar> tape;
    std::vector<BasicVar<Scalar>> vars;
    vars.reserve(ps.size());
    for (const auto& p : ps) vars.push_back(tape.variable(p));
    BasicVar<Scalar> loss = f(tape, vars);
    const Scalar value = loss.value()(0, 0);
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return value;
  };

  std::vector<MatrixX<Scalar>> analytic;
  evaluate(params, &analytic);

  Scalar worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Eigen::Index i = 0; i < params[k].size(); ++i) {
      const Scalar saved = params[k](i);
      params[k](i) = saved + h;
      const Scalar up = evaluate(params, nullptr);
      params[k](i) = saved - h;
      const Scalar down = evaluate(params, nullptr);
      params[k](i) = saved;
      const Scalar numeric = (up - down) / (Scalar(2) * h);
      const Scalar a = analytic[k](i);
      const Scalar denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace evacnet::numcore
