#pragma once

#include <Eigen/Dense>

#include <optional>

namespace evacnet {

/// Binary feature masks; at most one entry across both vectors is zero.
struct MaskState {
  Eigen::RowVectorXd temporal;  // F_t
  Eigen::RowVectorXd spatial;   // F_s
  std::optional<int> action;    // masked feature index, if any

  static MaskState none(int temporal_count, int spatial_count) {
    return {Eigen::RowVectorXd::Ones(temporal_count), Eigen::RowVectorXd::Ones(spatial_count), std::nullopt};
  }
};

}  // namespace evacnet
