#include "evacnet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "evacnet/error.hpp"

namespace evacnet::graph {

std::vector<Edge> build_edges(std::span<const DetectorMeta* const> metas) {
  std::vector<Edge> edges;
  for (std::size_t k = 1; k < metas.size(); ++k) {
    const DetectorMeta& a = *metas[k - 1];
    const DetectorMeta& b = *metas[k];
    if (a.highway != b.highway) continue;
    if (b.milepost < a.milepost) throw std::invalid_argument("build_edges: detectors not sorted by milepost");
    edges.push_back({static_cast<int>(k - 1), static_cast<int>(k), b.milepost - a.milepost});
  }
  return edges;
}

TravelTime travel_time(double distance_mi, double speed_i_mph, double speed_j_mph, double speed_floor) {
  double mean_speed = 0.5 * (speed_i_mph + speed_j_mph);
  TravelTime tt;
  if (!(mean_speed >= speed_floor)) {
    mean_speed = speed_floor;
    tt.floored = true;
  }
  tt.hours = distance_mi / mean_speed;
  return tt;
}

std::vector<double> scale_weights(std::span<const double> raw, double floor) {
  std::vector<double> out(raw.size(), 1.0);
  if (raw.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return out;
  for (std::size_t k = 0; k < raw.size(); ++k) out[k] = floor + (1.0 - floor) * (raw[k] - lo) / (hi - lo);
  return out;
}

Eigen::MatrixXd gcn_normalize(const Eigen::MatrixXd& adjacency) {
  if (adjacency.rows() != adjacency.cols()) throw ShapeError("gcn_normalize: adjacency must be square");
  const Eigen::MatrixXd a_hat = adjacency + Eigen::MatrixXd::Identity(adjacency.rows(), adjacency.cols());
  const Eigen::VectorXd inv_sqrt_deg = a_hat.rowwise().sum().cwiseSqrt().cwiseInverse();
  return inv_sqrt_deg.asDiagonal() * a_hat * inv_sqrt_deg.asDiagonal();
}

namespace {

Eigen::MatrixXd dense_adjacency(int n, const std::vector<Edge>& edges, const std::vector<double>& w) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t k = 0; k < edges.size(); ++k) {
    a(edges[k].i, edges[k].j) = w[k];
    a(edges[k].j, edges[k].i) = w[k];
  }
  return a;
}

void invert_in_place(std::vector<double>& w, double floor) {
  for (double& x : w) x = 1.0 - x + floor;
}

}  // namespace

GraphSnapshot build_snapshot(Hour hour, std::span<const DetectorMeta> detectors, std::span<const int> active,
                             std::span<const double> speeds, const GraphOptions& options) {
  GraphSnapshot g;
  g.hour = hour;
  g.nodes.assign(active.begin(), active.end());
  std::vector<const DetectorMeta*> metas;
  metas.reserve(active.size());
  for (int d : active) metas.push_back(&detectors[static_cast<std::size_t>(d)]);
  g.edges = build_edges(metas);

  for (const Edge& e : g.edges) {
    const auto vi = speeds[static_cast<std::size_t>(g.nodes[e.i])];
    const auto vj = speeds[static_cast<std::size_t>(g.nodes[e.j])];
    const TravelTime tt = travel_time(e.distance, vi, vj, options.speed_floor);
    g.raw_distance.push_back(e.distance);
    g.raw_travel_time.push_back(tt.hours);
    g.floored_speeds += tt.floored ? 1 : 0;
  }
  g.scaled_distance = scale_weights(g.raw_distance, options.weight_floor);
  g.scaled_travel_time = scale_weights(g.raw_travel_time, options.weight_floor);
  if (options.invert_weights) {
    invert_in_place(g.scaled_distance, options.weight_floor);
    invert_in_place(g.scaled_travel_time, options.weight_floor);
  }
  const int n = g.size();
  g.adj_distance = dense_adjacency(n, g.edges, g.scaled_distance);
  g.adj_travel_time = dense_adjacency(n, g.edges, g.scaled_travel_time);
  g.norm_distance = gcn_normalize(g.adj_distance);
  g.norm_travel_time = gcn_normalize(g.adj_travel_time);
  return g;
}

StaticGraph::StaticGraph(std::span<const DetectorMeta> detectors, const GraphOptions& options) {
  std::vector<int> all(detectors.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
  std::vector<double> speeds(detectors.size(), 1.0);
  full_ = build_snapshot(0, detectors, all, speeds, options).adj_distance;
}

GraphSnapshot StaticGraph::restrict(Hour hour, std::span<const int> active) const {
  GraphSnapshot g;
  g.hour = hour;
  g.nodes.assign(active.begin(), active.end());
  const int n = g.size();
  g.adj_distance.resize(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) g.adj_distance(r, c) = full_(g.nodes[r], g.nodes[c]);
  }
  for (int r = 0; r < n; ++r) {
    for (int c = r + 1; c < n; ++c) {
      if (g.adj_distance(r, c) > 0) {
        g.edges.push_back({r, c, 0.0});
        g.raw_distance.push_back(g.adj_distance(r, c));
        g.scaled_distance.push_back(g.adj_distance(r, c));
      }
    }
  }
  g.raw_travel_time = g.raw_distance;
  g.scaled_travel_time = g.scaled_distance;
  g.adj_travel_time = g.adj_distance;
  g.norm_distance = gcn_normalize(g.adj_distance);
  g.norm_travel_time = g.norm_distance;
  return g;
}

void write_edge_csv(std::ostream& os, const GraphSnapshot& g, std::span<const DetectorMeta> detectors,
                    bool header) {
  if (header) os << "t,modality,i,j,raw_weight,scaled_weight\n";
  const std::string t = format_timestamp(g.hour);
  auto emit = [&](const char* modality, const std::vector<double>& raw, const std::vector<double>& scaled) {
    for (std::size_t k = 0; k < g.edges.size(); ++k) {
      os << t << ',' << modality << ',' << detectors[static_cast<std::size_t>(g.nodes[g.edges[k].i])].id << ','
         << detectors[static_cast<std::size_t>(g.nodes[g.edges[k].j])].id << ',' << raw[k] << ',' << scaled[k]
         << '\n';
    }
  };
  emit("distance", g.raw_distance, g.scaled_distance);
  emit("travel_time", g.raw_travel_time, g.scaled_travel_time);
}

}  // namespace evacnet::graph
