#pragma once

// Detector ingestion, feature engineering, normalization and windowing.

#include <Eigen/Dense>

#include <array>
#include <filesystem>
#include <istream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evacnet/detector.hpp"
#include "evacnet/graph.hpp"

namespace evacnet::data {

inline constexpr std::array<const char*, 8> kIncidentColumns{
    "incident_flag",        "n_incidents",          "max_lanes_closed", "vehicles_involved",
    "avg_incident_dur_min", "max_incident_dur_min", "avg_elapsed_min",  "max_elapsed_min"};

inline constexpr std::array<const char*, 7> kEvacuationColumns{
    "cum_pop_under_orders", "dist_evac_zone_mi", "dist_landfall_mi", "hrs_before_landfall",
    "hrs_after_order",      "evac_day",          "landfall_day"};

inline constexpr const char* kMetaHeader = "detector_id,highway,milepost,lanes,lat,lon";

/// Header of the records CSV, in column order.
std::string records_header();

struct HourlyRecord {
  std::string detector_id;
  Hour hour = 0;
  std::optional<double> flow;   // veh/h
  std::optional<double> speed;  // mph
  std::array<std::optional<double>, 8> incident;
  std::array<std::optional<double>, 7> evacuation;
};

struct RawDataset {
  std::vector<DetectorMeta> detectors;  // sorted by (highway, milepost)
  std::vector<HourlyRecord> records;    // sorted by (detector, hour)
};

/// Parses both CSVs. Errors (UserError) name the file and line.
RawDataset parse_csv(std::istream& meta, std::istream& records, const std::string& meta_name = "meta.csv",
                     const std::string& records_name = "records.csv");
RawDataset load_csv(const std::filesystem::path& meta_path, const std::filesystem::path& records_path);

/// Ordered feature names; temporal features first.
struct FeatureRegistry {
  std::vector<std::string> names;
  int temporal = 0;
  int spatial = 0;

  int size() const { return temporal + spatial; }
  int index_of(const std::string& name) const;  // -1 if absent
  bool operator==(const FeatureRegistry&) const = default;
};

/// The fixed registry produced by engineer_features().
FeatureRegistry default_registry();

/// Engineered per-(hour, detector) features on a dense hourly grid.
struct FeatureTable {
  std::vector<DetectorMeta> detectors;
  FeatureRegistry registry;
  Hour start = 0;
  int hours = 0;
  /// One detectors x registry.size() matrix per hour, unnormalized. Temporal
  /// entries of inactive cells are NaN; spatial entries are always filled.
  std::vector<Eigen::MatrixXd> features;
  /// hours x detectors; true when flow and speed are valid and previous-day
  /// statistics exist.
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> active;
  Eigen::MatrixXd flow;   // hours x detectors, NaN when missing
  Eigen::MatrixXd speed;  // hours x detectors, NaN when missing

  int detector_count() const { return static_cast<int>(detectors.size()); }
  int detector_index(const std::string& id) const;  // -1 if absent
};

struct EngineerOptions {
  int max_interpolated_gap = 2;   // hours of missing flow/speed filled linearly
  int min_prev_day_samples = 12;  // valid hours needed on the previous day
};

FeatureTable engineer_features(const RawDataset& raw, const EngineerOptions& options = {});

enum class Scheme { zscore, minmax, passthrough };

/// Per-feature affine normalization x' = (x - offset) / scale plus per-detector
/// z-scoring of target flows. Fitted on training hours only; immutable after.
class Normalizer {
 public:
  Normalizer() = default;

  static Normalizer fit(const FeatureTable& table, int train_hours);

  double transform(int feature, double x) const { return (x - offset_[feature]) / scale_[feature]; }
  double inverse(int feature, double x) const { return x * scale_[feature] + offset_[feature]; }
  Eigen::RowVectorXd transform_row(const Eigen::RowVectorXd& row) const;
  Eigen::RowVectorXd inverse_row(const Eigen::RowVectorXd& row) const;

  double transform_target(int detector, double flow) const {
    return (flow - target_mean_[detector]) / target_std_[detector];
  }
  double inverse_target(int detector, double z) const { return z * target_std_[detector] + target_mean_[detector]; }

  const std::vector<Scheme>& schemes() const { return schemes_; }
  const Eigen::RowVectorXd& offset() const { return offset_; }
  const Eigen::RowVectorXd& scale() const { return scale_; }
  const Eigen::VectorXd& target_mean() const { return target_mean_; }
  const Eigen::VectorXd& target_std() const { return target_std_; }

  static Normalizer from_parts(std::vector<Scheme> schemes, Eigen::RowVectorXd offset, Eigen::RowVectorXd scale,
                               Eigen::VectorXd target_mean, Eigen::VectorXd target_std);

 private:
  std::vector<Scheme> schemes_;
  Eigen::RowVectorXd offset_;
  Eigen::RowVectorXd scale_;
  Eigen::VectorXd target_mean_;
  Eigen::VectorXd target_std_;
};

Scheme default_scheme(const std::string& feature_name);

struct Split {
  int train_hours = 0;  // hours [0, train_hours) train, the rest validation
  int val_hours = 0;
  Normalizer normalizer;
};

/// Chronological split on the hourly grid; the normalizer sees train hours only.
Split split_and_fit(const FeatureTable& table, double train_frac = 0.9);

/// Normalized inputs of one window for one step: rows follow the step's
/// graph node order.
struct StepInput {
  std::shared_ptr<const graph::GraphSnapshot> graph;
  Eigen::MatrixXd temporal;  // N_t x F_t
  Eigen::MatrixXd spatial;   // N_t x F_s, identical values at every step of the window
  /// Row of each predicted node within this step's node list.
  std::vector<Eigen::Index> window_rows;
};

struct WindowSample {
  Hour anchor = 0;               // first input hour
  int anchor_index = 0;          // index of the anchor on the table grid
  std::vector<int> nodes;        // predicted detectors (indices into the table)
  std::vector<StepInput> steps;  // l entries
  Eigen::MatrixXd target;        // nodes x p, normalized per detector
  Eigen::MatrixXd target_flow;   // nodes x p, veh/h

  int node_count() const { return static_cast<int>(nodes.size()); }
  int input_length() const { return static_cast<int>(steps.size()); }
  int horizon() const { return static_cast<int>(target.cols()); }
};

/// One graph snapshot per table hour.
using GraphSeries = std::vector<std::shared_ptr<const graph::GraphSnapshot>>;

GraphSeries build_dynamic_graphs(const FeatureTable& table, const graph::GraphOptions& options = {});
GraphSeries build_static_graphs(const FeatureTable& table, const graph::GraphOptions& options = {});

struct WindowOptions {
  int input_length = 6;  // l
  int horizon = 6;       // p
  int first_hour = 0;    // window spans must lie inside [first_hour, end_hour)
  int end_hour = -1;     // -1: end of table
  /// Anchors must satisfy anchor + input_length >= first_target_hour, i.e. all
  /// targets at or after this hour. Used to carve validation windows whose
  /// inputs may reach back into training hours.
  int first_target_hour = 0;
};

/// One sample per anchor whose predicted node set (nodes active at every one
/// of the l + p hours) is non-empty. Throws if the range is shorter than l + p.
std::vector<WindowSample> make_windows(const FeatureTable& table, const Normalizer& normalizer,
                                       const GraphSeries& graphs, const WindowOptions& options);

}  // namespace evacnet::data
