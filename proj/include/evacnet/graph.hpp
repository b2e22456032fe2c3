#pragma once

// Per-hour distance and travel-time graphs over the detectors that are
// active at that hour.

#include <Eigen/Dense>

#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "evacnet/detector.hpp"

namespace evacnet::graph {

struct GraphOptions {
  double weight_floor = 0.01;  // lower end of min-max scaled edge weights
  double speed_floor = 5.0;    // mph, guards travel time against stalled traffic
  bool invert_weights = false; // map scaled w -> 1 - w + floor (shorter = stronger)
};

struct Edge {
  int i = 0;  // positions within the snapshot node list, i < j
  int j = 0;
  double distance = 0.0;  // miles
};

/// Chains consecutive detectors on each highway. `metas` must be the active
/// detectors sorted by (highway, milepost); offline detectors are simply
/// absent, so their neighbours end up connected directly.
std::vector<Edge> build_edges(std::span<const DetectorMeta* const> metas);

struct TravelTime {
  double hours = 0.0;
  bool floored = false;  // mean speed fell below the floor and was replaced
};

/// Distance over the mean of the endpoint speeds.
TravelTime travel_time(double distance_mi, double speed_i_mph, double speed_j_mph, double speed_floor = 5.0);

/// Affine map of `raw` onto [floor, 1]. A degenerate range (single edge or
/// all-equal weights) maps every weight to 1.
std::vector<double> scale_weights(std::span<const double> raw, double floor = 0.01);

/// D^{-1/2} (A + I) D^{-1/2}, D the degree matrix of A + I.
Eigen::MatrixXd gcn_normalize(const Eigen::MatrixXd& adjacency);

enum class Modality { distance, travel_time };

struct GraphSnapshot {
  Hour hour = 0;
  /// Detector indices (into the run's detector list) of the active nodes, in
  /// (highway, milepost) order.
  std::vector<int> nodes;
  std::vector<Edge> edges;
  std::vector<double> raw_distance;     // per edge
  std::vector<double> raw_travel_time;  // per edge, hours
  std::vector<double> scaled_distance;
  std::vector<double> scaled_travel_time;
  int floored_speeds = 0;
  Eigen::MatrixXd adj_distance;     // symmetric, zero diagonal, scaled weights
  Eigen::MatrixXd adj_travel_time;
  Eigen::MatrixXd norm_distance;    // GCN-normalized
  Eigen::MatrixXd norm_travel_time;

  int size() const { return static_cast<int>(nodes.size()); }
  const Eigen::MatrixXd& normalized(Modality m) const {
    return m == Modality::distance ? norm_distance : norm_travel_time;
  }
};

/// Builds both modalities for one hour. `detectors` is the full sorted
/// detector list, `active` the indices present at this hour (ascending) and
/// `speeds` the per-detector speed at this hour (indexed like `detectors`).
GraphSnapshot build_snapshot(Hour hour, std::span<const DetectorMeta> detectors, std::span<const int> active,
                             std::span<const double> speeds, const GraphOptions& options = {});

/// Frozen distance graph over every detector: all chain edges present,
/// restricted at each hour to the active rows/columns and renormalized.
/// Travel-time matrices mirror the distance ones.
class StaticGraph {
 public:
  StaticGraph(std::span<const DetectorMeta> detectors, const GraphOptions& options = {});
  GraphSnapshot restrict(Hour hour, std::span<const int> active) const;

 private:
  Eigen::MatrixXd full_;  // scaled distance weights over all detectors
};

/// Writes `t,modality,i,j,raw_weight,scaled_weight` rows for one snapshot;
/// i and j are detector ids.
void write_edge_csv(std::ostream& os, const GraphSnapshot& g, std::span<const DetectorMeta> detectors,
                    bool header = false);

}  // namespace evacnet::graph
