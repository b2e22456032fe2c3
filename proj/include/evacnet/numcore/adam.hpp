#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "evacnet/error.hpp"
#include "evacnet/numcore/tape.hpp"

namespace evacnet::numcore {

/// Bias-corrected Adam (Kingma & Ba). Moments are allocated lazily on the
/// first step to match the parameter list they are used with.
template <typename Scalar>
struct BasicAdamState {
  Scalar lr = Scalar(1e-3);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
  std::int64_t step = 0;
  std::vector<MatrixX<Scalar>> m;
  std::vector<MatrixX<Scalar>> v;
};

using AdamState = BasicAdamState<double>;

template <typename Scalar>
void adam_step(std::span<MatrixX<Scalar>* const> params, std::span<const MatrixX<Scalar>> grads,
               BasicAdamState<Scalar>& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const auto* p : params) {
      state.m.push_back(MatrixX<Scalar>::Zero(p->rows(), p->cols()));
      state.v.push_back(MatrixX<Scalar>::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state was built for a different parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& g = grads[k];
    if (g.rows() != params[k]->rows() || g.cols() != params[k]->cols() || state.m[k].rows() != g.rows() ||
        state.m[k].cols() != g.cols()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(k));
    }
  }
  ++state.step;
  const Scalar t = static_cast<Scalar>(state.step);
  const Scalar c1 = Scalar(1) - std::pow(state.beta1, t);
  const Scalar c2 = Scalar(1) - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto& g = grads[k];
    m = state.beta1 * m + (Scalar(1) - state.beta1) * g;
    v = state.beta2 * v + (Scalar(1) - state.beta2) * g.cwiseAbs2();
    params[k]->array() -= state.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  }
}

}  // namespace evacnet::numcore
