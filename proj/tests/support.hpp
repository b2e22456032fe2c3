#pragma once

// Shared fixtures for the test executables.

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "evacnet/data.hpp"
#include "evacnet/dmf.hpp"
#include "evacnet/graph.hpp"
#include "evacnet/random.hpp"

namespace evacnet::test {

/// `n` detectors on one corridor with irregular spacing.
inline std::vector<DetectorMeta> corridor(int n, Highway hw = Highway::I75) {
  std::vector<DetectorMeta> out;
  double mp = 1.0;
  for (int i = 0; i < n; ++i) {
    DetectorMeta d;
    d.id = std::string(to_string(hw)) + "-" + std::to_string(i);
    d.highway = hw;
    d.milepost = mp;
    d.lanes = 2 + i % 3;
    d.lat = 28.0 + 0.01 * i;
    d.lon = -82.0;
    out.push_back(d);
    mp += 1.5 + 0.7 * (i % 4);
  }
  return out;
}

inline Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = scale * rng.normal();
  return m;
}

/// A window over `detectors` where step s uses the nodes in `active[s]`
/// (ascending detector indices) and the predicted nodes are `predicted`,
/// which must appear in every step. Features and targets are random.
inline data::WindowSample random_window(Rng& rng, const std::vector<DetectorMeta>& detectors,
                                        const std::vector<std::vector<int>>& active, const std::vector<int>& predicted,
                                        int temporal, int spatial, int horizon) {
  data::WindowSample w;
  w.nodes = predicted;
  const auto n_all = static_cast<int>(detectors.size());
  Eigen::MatrixXd spatial_all = random_matrix(rng, n_all, spatial);
  for (std::size_t s = 0; s < active.size(); ++s) {
    std::vector<double> speeds(detectors.size());
    for (auto& v : speeds) v = rng.uniform(10.0, 70.0);
    data::StepInput step;
    step.graph = std::make_shared<const graph::GraphSnapshot>(
        graph::build_snapshot(static_cast<Hour>(s), detectors, active[s], speeds));
    const auto n = static_cast<Eigen::Index>(active[s].size());
    step.temporal = random_matrix(rng, n, temporal);
    step.spatial.resize(n, spatial);
    for (Eigen::Index r = 0; r < n; ++r) step.spatial.row(r) = spatial_all.row(active[s][static_cast<std::size_t>(r)]);
    for (int node : predicted) {
      for (Eigen::Index r = 0; r < n; ++r) {
        if (active[s][static_cast<std::size_t>(r)] == node) step.window_rows.push_back(r);
      }
    }
    w.steps.push_back(std::move(step));
  }
  w.target = random_matrix(rng, static_cast<Eigen::Index>(predicted.size()), horizon);
  w.target_flow = w.target;
  return w;
}

/// Fully active window over `n` nodes.
inline data::WindowSample dense_window(Rng& rng, int n, int temporal, int spatial, int input_length, int horizon) {
  const auto dets = corridor(n);
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  return random_window(rng, dets, std::vector<std::vector<int>>(static_cast<std::size_t>(input_length), all), all,
                       temporal, spatial, horizon);
}

inline dmf::DmfConfig small_config(int temporal, int spatial, int hidden, int horizon,
                                   dmf::GraphMode mode = dmf::GraphMode::fused) {
  dmf::DmfConfig c;
  c.temporal_features = temporal;
  c.spatial_features = spatial;
  c.hidden = hidden;
  c.horizon = horizon;
  c.mode = mode;
  return c;
}

/// Chi-square statistic of observed counts against expected probabilities.
inline double chi_square(const std::vector<double>& observed, const std::vector<double>& probs, double total) {
  double chi = 0.0;
  for (std::size_t k = 0; k < observed.size(); ++k) {
    const double e = probs[k] * total;
    chi += (observed[k] - e) * (observed[k] - e) / e;
  }
  return chi;
}

/// Upper-tail p-value of the chi-square distribution with `dof` degrees of
/// freedom (regularized upper incomplete gamma, series/continued fraction).
inline double chi_square_p(double chi, int dof) {
  const double a = dof / 2.0, x = chi / 2.0;
  if (x <= 0) return 1.0;
  const double lg = std::lgamma(a);
  if (x < a + 1) {
    double sum = 1.0 / a, term = sum;
    for (int n = 1; n < 500; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - lg);
  }
  double b = x + 1 - a, c = 1e300, d = 1 / b, h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - lg) * h;
}

}  // namespace evacnet::test
