#pragma once

// Deterministic synthetic evacuation scenarios emitting the detector CSV
// schema: diurnal demand, an evacuation surge, incidents, detector outages
// and optional congestion waves that make travel times diverge from
// distances.

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "evacnet/data.hpp"
#include "evacnet/detector.hpp"

namespace evacnet::synth {

inline constexpr int kScenarioVersion = 1;

struct HighwayLayout {
  Highway highway = Highway::I75;
  int detectors = 3;
  double first_milepost = 0.0;
  double min_spacing = 3.0;  // miles between consecutive detectors
  double max_spacing = 8.0;
  int lanes = 3;
  double offset_mi = 0.0;  // lateral offset of the corridor from the landfall point
};

struct ForcedOutage {
  int detector = 0;  // global detector index in layout order
  int start_hour = 0;
  int duration = 1;
};

struct Scenario {
  std::string name = "custom";
  std::uint64_t seed = 1;
  std::string start = "2024-10-01T00:00:00";
  int hours = 240;
  std::vector<HighwayLayout> highways;

  // Demand.
  double base_flow_per_lane = 500.0;  // veh/h/lane at diurnal multiplier 1
  std::array<double, 24> diurnal{};   // hour-of-day multipliers
  double noise = 0.03;                // multiplicative Gaussian noise (std)

  // Evacuation timeline.
  int order_hour = 96;
  int landfall_hour = 192;
  double surge_peak = 2.5;  // demand multiplier at full surge, at the landfall point
  double surge_decay_mi = 300.0;
  double landfall_drop = 0.5;  // fraction of demand lost within 6 h of landfall
  double total_population = 2.0e6;
  double landfall_milepost = 40.0;
  double evac_zone_milepost = 10.0;

  // Incidents (per detector-hour start probability).
  double incident_rate = 0.005;
  double incident_mean_hours = 2.0;
  double capacity_drop = 0.5;

  // Outages.
  double outage_rate = 0.0;
  double outage_mean_hours = 4.0;
  std::vector<ForcedOutage> forced_outages;

  // Congestion waves travelling along each corridor during the surge.
  double wave_amplitude = 0.0;  // fractional capacity loss at the wave centre
  double wave_speed_mph = 3.0;
  double wave_width_mi = 4.0;

  // Traffic stream constants.
  double capacity_per_lane = 2000.0;
  double free_flow_speed = 70.0;
  double min_speed = 5.0;

  /// Throws UserError when a parameter is out of range.
  void validate() const;
  int detector_count() const;
  /// Hours [surge_begin, surge_end) of full evacuation demand.
  int surge_begin() const { return order_hour + 24; }
  int surge_end() const { return landfall_hour - 12; }
};

std::array<double, 24> default_diurnal();

void to_json(nlohmann::json& j, const Scenario& s);
void from_json(const nlohmann::json& j, Scenario& s);

struct IncidentNote {
  std::string detector_id;
  int start_hour = 0;
  int duration = 0;
  int lanes_closed = 0;
};

struct OutageNote {
  std::string detector_id;
  int start_hour = 0;
  int duration = 0;
};

struct GroundTruth {
  std::vector<IncidentNote> incidents;
  std::vector<OutageNote> outages;
  int surge_begin = 0;
  int surge_end = 0;
};

struct Generated {
  data::RawDataset dataset;  // detectors sorted, records sorted
  GroundTruth truth;
  /// hours x detectors noiseless demand and the realized capacity, for tests.
  std::vector<std::vector<double>> demand;
  std::vector<std::vector<double>> capacity;
};

Generated generate(const Scenario& scenario);

/// S1 smoke, S2 dropout-heavy, S3 fusion-signal.
std::vector<Scenario> builtin_scenarios();
/// Throws UserError listing the builtins when `name` is unknown.
Scenario builtin_scenario(const std::string& name);

void write_meta_csv(std::ostream& os, const data::RawDataset& ds);
void write_records_csv(std::ostream& os, const data::RawDataset& ds);
nlohmann::json manifest(const Scenario& scenario, const GroundTruth& truth);

/// Writes meta.csv, records.csv and scenario.json into `dir`.
void write_scenario(const std::filesystem::path& dir, const Scenario& scenario, const Generated& generated);

/// Fraction of surge hours whose travel-time edge ordering differs from the
/// distance edge ordering on the dynamic graphs of `table`.
double travel_time_order_divergence(const data::FeatureTable& table, const Scenario& scenario);

}  // namespace evacnet::synth
