#pragma once

// Forecast error metrics over denormalized flows: RMSE, MAE, MAPE (percent)
// and the coefficient of determination.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>

#include "evacnet/error.hpp"

namespace evacnet::metrics {

template <typename Scalar>
struct BasicMetricReport {
  Scalar rmse = 0;
  Scalar mae = 0;
  /// Percent. Empty when every actual is zero.
  std::optional<Scalar> mape;
  /// Samples left out of MAPE because the actual flow was zero.
  std::size_t mape_skipped = 0;
  /// Empty when the actuals have zero variance (R² undefined).
  std::optional<Scalar> r2;
  std::size_t n = 0;
};

using MetricReport = BasicMetricReport<double>;

template <typename Scalar>
BasicMetricReport<Scalar> compute(std::span<const Scalar> actual, std::span<const Scalar> predicted) {
  if (actual.size() != predicted.size()) throw ShapeError("metrics: actual/predicted length mismatch");
  if (actual.empty()) throw std::invalid_argument("metrics: empty input");
  const std::size_t n = actual.size();

  Scalar mean_actual = 0;
  for (Scalar a : actual) mean_actual += a;
  mean_actual /= static_cast<Scalar>(n);

  Scalar sse = 0, sae = 0, ape = 0, sst = 0;
  std::size_t mape_n = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar e = actual[i] - predicted[i];
    sse += e * e;
    sae += std::abs(e);
    if (actual[i] != Scalar(0)) {
      ape += std::abs(e / actual[i]);
      ++mape_n;
    }
    const Scalar d = actual[i] - mean_actual;
    sst += d * d;
  }

  BasicMetricReport<Scalar> r;
  r.n = n;
  r.rmse = std::sqrt(sse / static_cast<Scalar>(n));
  r.mae = sae / static_cast<Scalar>(n);
  r.mape_skipped = n - mape_n;
  if (mape_n > 0) r.mape = ape / static_cast<Scalar>(mape_n) * Scalar(100);
  if (sst > Scalar(0)) r.r2 = Scalar(1) - sse / sst;
  return r;
}

}  // namespace evacnet::metrics
