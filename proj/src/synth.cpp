#include "evacnet/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

#include "evacnet/error.hpp"
#include "evacnet/graph.hpp"
#include "evacnet/random.hpp"

namespace evacnet::synth {

std::array<double, 24> default_diurnal() {
  return {0.30, 0.25, 0.22, 0.22, 0.30, 0.50, 0.85, 1.15, 1.20, 1.00, 0.90, 0.90,
          0.92, 0.92, 0.95, 1.05, 1.25, 1.30, 1.10, 0.85, 0.70, 0.58, 0.46, 0.36};
}

void Scenario::validate() const {
  auto fail = [this](const std::string& m) { throw UserError("scenario '" + name + "': " + m); };
  if (highways.empty()) fail("at least one highway required");
  for (const auto& h : highways) {
    if (h.detectors < 1) fail("highway needs >= 1 detector");
    if (h.lanes < 1) fail("lanes must be >= 1");
    if (!(h.min_spacing > 0) || h.max_spacing < h.min_spacing) fail("invalid detector spacing");
    if (h.first_milepost < 0) fail("milepost must be >= 0");
  }
  if (hours < 6 + 6 + 48) fail("horizon must cover at least l + p + 48 hours");
  if (!(base_flow_per_lane > 0)) fail("base flow must be positive");
  for (double m : diurnal) {
    if (!(m > 0)) fail("diurnal multipliers must be positive");
  }
  if (!(surge_peak > 0)) fail("surge multiplier must be positive");
  if (noise < 0) fail("noise must be >= 0");
  if (!(surge_decay_mi > 0)) fail("surge decay must be positive");
  if (!(landfall_drop >= 0 && landfall_drop < 1)) fail("landfall drop must be in [0, 1)");
  if (incident_rate < 0 || incident_rate > 1 || outage_rate < 0 || outage_rate > 1) fail("rates must lie in [0, 1]");
  if (capacity_drop < 0 || capacity_drop >= 1) fail("capacity drop must lie in [0, 1)");
  if (wave_amplitude < 0 || wave_amplitude >= 1) fail("wave amplitude must lie in [0, 1)");
  if (!(wave_width_mi > 0)) fail("wave width must be positive");
  if (!(min_speed > 0) || free_flow_speed <= min_speed) fail("speeds must satisfy 0 < min < free flow");
  if (!(capacity_per_lane > 0)) fail("capacity must be positive");
  if (landfall_hour <= order_hour) fail("landfall must follow the evacuation order");
  for (const auto& o : forced_outages) {
    if (o.detector < 0 || o.detector >= detector_count() || o.duration < 1 || o.start_hour < 0) {
      fail("invalid forced outage");
    }
  }
  parse_timestamp(start);
}

int Scenario::detector_count() const {
  int n = 0;
  for (const auto& h : highways) n += h.detectors;
  return n;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const Scenario& s) {
  nlohmann::json hw = nlohmann::json::array();
  for (const auto& h : s.highways) {
    hw.push_back({{"highway", std::string(to_string(h.highway))},
                  {"detectors", h.detectors},
                  {"first_milepost", h.first_milepost},
                  {"min_spacing", h.min_spacing},
                  {"max_spacing", h.max_spacing},
                  {"lanes", h.lanes},
                  {"offset_mi", h.offset_mi}});
  }
  nlohmann::json outages = nlohmann::json::array();
  for (const auto& o : s.forced_outages) {
    outages.push_back({{"detector", o.detector}, {"start_hour", o.start_hour}, {"duration", o.duration}});
  }
  j = {{"version", kScenarioVersion},
       {"name", s.name},
       {"seed", s.seed},
       {"start", s.start},
       {"hours", s.hours},
       {"highways", hw},
       {"base_flow_per_lane", s.base_flow_per_lane},
       {"diurnal", s.diurnal},
       {"noise", s.noise},
       {"order_hour", s.order_hour},
       {"landfall_hour", s.landfall_hour},
       {"surge_peak", s.surge_peak},
       {"surge_decay_mi", s.surge_decay_mi},
       {"landfall_drop", s.landfall_drop},
       {"total_population", s.total_population},
       {"landfall_milepost", s.landfall_milepost},
       {"evac_zone_milepost", s.evac_zone_milepost},
       {"incident_rate", s.incident_rate},
       {"incident_mean_hours", s.incident_mean_hours},
       {"capacity_drop", s.capacity_drop},
       {"outage_rate", s.outage_rate},
       {"outage_mean_hours", s.outage_mean_hours},
       {"forced_outages", outages},
       {"wave_amplitude", s.wave_amplitude},
       {"wave_speed_mph", s.wave_speed_mph},
       {"wave_width_mi", s.wave_width_mi},
       {"capacity_per_lane", s.capacity_per_lane},
       {"free_flow_speed", s.free_flow_speed},
       {"min_speed", s.min_speed}};
}

void from_json(const nlohmann::json& j, Scenario& s) {
  s = Scenario{};
  s.diurnal = default_diurnal();
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("name", s.name);
  get("seed", s.seed);
  get("start", s.start);
  get("hours", s.hours);
  if (j.contains("highways")) {
    for (const auto& h : j.at("highways")) {
      HighwayLayout l;
      l.highway = parse_highway(h.at("highway").get<std::string>());
      if (h.contains("detectors")) h.at("detectors").get_to(l.detectors);
      if (h.contains("first_milepost")) h.at("first_milepost").get_to(l.first_milepost);
      if (h.contains("min_spacing")) h.at("min_spacing").get_to(l.min_spacing);
      if (h.contains("max_spacing")) h.at("max_spacing").get_to(l.max_spacing);
      if (h.contains("lanes")) h.at("lanes").get_to(l.lanes);
      if (h.contains("offset_mi")) h.at("offset_mi").get_to(l.offset_mi);
      s.highways.push_back(l);
    }
  }
  get("base_flow_per_lane", s.base_flow_per_lane);
  get("diurnal", s.diurnal);
  get("noise", s.noise);
  get("order_hour", s.order_hour);
  get("landfall_hour", s.landfall_hour);
  get("surge_peak", s.surge_peak);
  get("surge_decay_mi", s.surge_decay_mi);
  get("landfall_drop", s.landfall_drop);
  get("total_population", s.total_population);
  get("landfall_milepost", s.landfall_milepost);
  get("evac_zone_milepost", s.evac_zone_milepost);
  get("incident_rate", s.incident_rate);
  get("incident_mean_hours", s.incident_mean_hours);
  get("capacity_drop", s.capacity_drop);
  get("outage_rate", s.outage_rate);
  get("outage_mean_hours", s.outage_mean_hours);
  if (j.contains("forced_outages")) {
    for (const auto& o : j.at("forced_outages")) {
      s.forced_outages.push_back(
          {o.at("detector").get<int>(), o.at("start_hour").get<int>(), o.at("duration").get<int>()});
    }
  }
  get("wave_amplitude", s.wave_amplitude);
  get("wave_speed_mph", s.wave_speed_mph);
  get("wave_width_mi", s.wave_width_mi);
  get("capacity_per_lane", s.capacity_per_lane);
  get("free_flow_speed", s.free_flow_speed);
  get("min_speed", s.min_speed);
}

// ---------------------------------------------------------------------------
// Generation

namespace {

struct DetectorPlan {
  DetectorMeta meta;
  int layout = 0;
  double dist_landfall = 0.0;
  double dist_evac_zone = 0.0;
};

double surge_ramp(const Scenario& s, int t) {
  if (t < s.order_hour || t >= s.landfall_hour) return 0.0;
  if (t < s.surge_begin()) return static_cast<double>(t - s.order_hour) / 24.0;
  if (t < s.surge_end()) return 1.0;
  return static_cast<double>(s.landfall_hour - t) / 12.0;
}

}  // namespace

Generated generate(const Scenario& s) {
  s.validate();
  Rng rng(s.seed);
  const Hour start = parse_timestamp(s.start);

  std::vector<DetectorPlan> plan;
  for (std::size_t li = 0; li < s.highways.size(); ++li) {
    const auto& h = s.highways[li];
    double mp = h.first_milepost;
    for (int k = 0; k < h.detectors; ++k) {
      if (k > 0) mp += rng.uniform(h.min_spacing, h.max_spacing);
      DetectorPlan p;
      char id[32];
      std::snprintf(id, sizeof id, "%s-%03d", std::string(to_string(h.highway)).c_str(), k + 1);
      p.meta.id = id;
      p.meta.highway = h.highway;
      p.meta.milepost = std::round(mp * 1000.0) / 1000.0;
      p.meta.lanes = h.lanes;
      p.meta.lat = 27.0 + p.meta.milepost / 69.0;
      p.meta.lon = -82.0 + h.offset_mi / 60.0;
      p.layout = static_cast<int>(li);
      p.dist_landfall = std::hypot(p.meta.milepost - s.landfall_milepost, h.offset_mi);
      p.dist_evac_zone = std::abs(p.meta.milepost - s.evac_zone_milepost) + 0.5 * h.offset_mi;
      plan.push_back(p);
    }
  }
  const int D = static_cast<int>(plan.size());
  const int T = s.hours;

  Generated g;
  g.truth.surge_begin = s.surge_begin();
  g.truth.surge_end = s.surge_end();
  g.demand.assign(static_cast<std::size_t>(T), std::vector<double>(static_cast<std::size_t>(D)));
  g.capacity.assign(static_cast<std::size_t>(T), std::vector<double>(static_cast<std::size_t>(D)));

  // Outage and incident schedules, detector-major for reproducibility.
  std::vector<std::vector<char>> offline(static_cast<std::size_t>(D), std::vector<char>(static_cast<std::size_t>(T), 0));
  struct Active {
    int start = -1, duration = 0, lanes = 0, vehicles = 0;
  };
  std::vector<std::vector<Active>> incident(static_cast<std::size_t>(D), std::vector<Active>(static_cast<std::size_t>(T)));
  for (int d = 0; d < D; ++d) {
    for (int t = 0; t < T;) {
      if (s.outage_rate > 0 && rng.bernoulli(s.outage_rate)) {
        const int dur = 1 + static_cast<int>(rng.exponential(s.outage_mean_hours));
        for (int k = t; k < std::min(T, t + dur); ++k) offline[d][k] = 1;
        g.truth.outages.push_back({plan[d].meta.id, t, std::min(dur, T - t)});
        t += dur;
      } else {
        ++t;
      }
    }
    for (int t = 0; t < T;) {
      if (s.incident_rate > 0 && rng.bernoulli(s.incident_rate)) {
        const int dur = 1 + static_cast<int>(rng.exponential(s.incident_mean_hours));
        const int lanes = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(std::max(1, plan[d].meta.lanes - 1))));
        const int vehicles = 1 + static_cast<int>(rng.index(4));
        for (int k = t; k < std::min(T, t + dur); ++k) incident[d][k] = {t, dur, lanes, vehicles};
        g.truth.incidents.push_back({plan[d].meta.id, t, std::min(dur, T - t), lanes});
        t += dur;
      } else {
        ++t;
      }
    }
  }
  for (const auto& o : s.forced_outages) {
    for (int k = o.start_hour; k < std::min(T, o.start_hour + o.duration); ++k) offline[o.detector][k] = 1;
    g.truth.outages.push_back({plan[o.detector].meta.id, o.start_hour, std::min(o.duration, T - o.start_hour)});
  }

  const std::int64_t landfall_day = (start + s.landfall_hour) / 24;
  const std::int64_t order_day = (start + s.order_hour) / 24;
  std::vector<double> phase(s.highways.size());
  for (auto& ph : phase) ph = rng.uniform(0.0, 1.0);

  for (int d = 0; d < D; ++d) {
    const auto& p = plan[d];
    const auto& layout = s.highways[p.layout];
    double span = 0;
    for (const auto& q : plan) {
      if (q.layout == p.layout) span = std::max(span, q.meta.milepost - layout.first_milepost);
    }
    span = std::max(span, 1.0) + 2.0 * s.wave_width_mi;
    for (int t = 0; t < T; ++t) {
      const Hour abs_hour = start + t;
      const int hod = static_cast<int>(abs_hour % 24);
      double surge = 1.0 + (s.surge_peak - 1.0) * surge_ramp(s, t) * std::exp(-p.dist_landfall / s.surge_decay_mi);
      if (std::abs(t - s.landfall_hour) <= 6) surge *= 1.0 - s.landfall_drop;
      const double demand = s.base_flow_per_lane * p.meta.lanes * s.diurnal[static_cast<std::size_t>(hod)] * surge;

      double cap = s.capacity_per_lane * p.meta.lanes;
      const Active& inc = incident[d][t];
      if (inc.start >= 0) cap *= 1.0 - s.capacity_drop;
      if (s.wave_amplitude > 0 && t >= s.order_hour && t < s.landfall_hour) {
        const double centre = layout.first_milepost - s.wave_width_mi +
                              std::fmod(phase[p.layout] * span + s.wave_speed_mph * (t - s.order_hour), span);
        const double z = (p.meta.milepost - centre) / s.wave_width_mi;
        cap *= 1.0 - s.wave_amplitude * std::exp(-0.5 * z * z);
      }
      g.demand[t][d] = demand;
      g.capacity[t][d] = cap;

      const double ratio = std::min(1.0, demand / cap);
      const double clean = std::min(demand, cap);
      const double eps = s.noise > 0 ? rng.normal() : 0.0;

      data::HourlyRecord r;
      r.detector_id = p.meta.id;
      r.hour = abs_hour;
      if (!offline[d][t]) {
        r.flow = std::max(0.0, clean * (1.0 + s.noise * eps));
        r.speed = s.free_flow_speed - (s.free_flow_speed - s.min_speed) * ratio;
      }
      if (inc.start >= 0) {
        const double dur_min = inc.duration * 60.0;
        const double elapsed = (t - inc.start) * 60.0 + 30.0;
        r.incident = {1.0, 1.0, static_cast<double>(inc.lanes), static_cast<double>(inc.vehicles),
                      dur_min, dur_min, elapsed, elapsed};
      } else {
        r.incident = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
      }
      const double since_order = t - s.order_hour;
      const double pop = since_order >= 0 ? s.total_population * (1.0 - std::exp(-since_order / 12.0)) : 0.0;
      const std::int64_t day = abs_hour / 24;
      r.evacuation = {pop,
                      p.dist_evac_zone,
                      p.dist_landfall,
                      static_cast<double>(std::max(0, s.landfall_hour - t)),
                      std::max(0.0, since_order),
                      (day >= order_day && day < landfall_day) ? 1.0 : 0.0,
                      day == landfall_day ? 1.0 : 0.0};
      g.dataset.records.push_back(std::move(r));
    }
  }

  for (const auto& p : plan) g.dataset.detectors.push_back(p.meta);
  std::sort(g.dataset.detectors.begin(), g.dataset.detectors.end(), [](const DetectorMeta& a, const DetectorMeta& b) {
    return std::tie(a.highway, a.milepost) < std::tie(b.highway, b.milepost);
  });
  std::stable_sort(g.dataset.records.begin(), g.dataset.records.end(),
                   [](const data::HourlyRecord& a, const data::HourlyRecord& b) {
                     return std::tie(a.detector_id, a.hour) < std::tie(b.detector_id, b.hour);
                   });
  return g;
}

// ---------------------------------------------------------------------------
// Builtins

std::vector<Scenario> builtin_scenarios() {
  std::vector<Scenario> out;

  Scenario s1;
  s1.name = "S1";
  s1.seed = 1001;
  s1.hours = 240;
  s1.highways = {{Highway::I75, 3, 100.0, 3.0, 8.0, 3, 20.0}, {Highway::I95, 3, 150.0, 3.0, 8.0, 3, 60.0}};
  s1.diurnal = default_diurnal();
  s1.noise = 0.03;
  s1.order_hour = 120;
  s1.landfall_hour = 216;
  s1.landfall_milepost = 110.0;
  s1.evac_zone_milepost = 105.0;
  s1.incident_rate = 0.004;
  out.push_back(s1);

  Scenario s2 = s1;
  s2.name = "S2";
  s2.seed = 2002;
  s2.highways = {{Highway::I4, 4, 20.0, 2.0, 6.0, 2, 10.0}, {Highway::I10, 4, 200.0, 3.0, 7.0, 2, 40.0}};
  s2.outage_rate = 0.01;
  s2.outage_mean_hours = 5.0;
  // Shorter than l + p, so it necessarily straddles window boundaries.
  s2.forced_outages = {{1, 130, 9}, {5, 70, 30}, {6, 180, 4}};
  out.push_back(s2);

  Scenario s3 = s1;
  s3.name = "S3";
  s3.seed = 3003;
  s3.highways = {{Highway::I75, 5, 100.0, 2.0, 9.0, 3, 15.0}, {Highway::TPK, 5, 30.0, 2.0, 9.0, 2, 45.0}};
  s3.surge_peak = 3.0;
  s3.order_hour = 72;
  // Landfall after the last hour: validation stays inside the wave period.
  s3.landfall_hour = 264;
  s3.wave_amplitude = 0.7;
  s3.wave_speed_mph = 4.0;
  s3.wave_width_mi = 5.0;
  s3.incident_rate = 0.002;
  out.push_back(s3);
  return out;
}

Scenario builtin_scenario(const std::string& name) {
  for (auto& s : builtin_scenarios()) {
    if (s.name == name) return s;
  }
  std::string names;
  for (const auto& s : builtin_scenarios()) names += (names.empty() ? "" : ", ") + s.name;
  throw UserError("unknown scenario '" + name + "' (builtins: " + names + ")");
}

// ---------------------------------------------------------------------------
// Output

namespace {

void put_number(std::ostream& os, double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  os.write(buf, ptr - buf);
}

void put_optional(std::ostream& os, const std::optional<double>& v) {
  if (v) put_number(os, *v);
}

}  // namespace

void write_meta_csv(std::ostream& os, const data::RawDataset& ds) {
  os << data::kMetaHeader << '\n';
  for (const auto& m : ds.detectors) {
    os << m.id << ',' << to_string(m.highway) << ',';
    put_number(os, m.milepost);
    os << ',' << m.lanes << ',';
    put_number(os, m.lat);
    os << ',';
    put_number(os, m.lon);
    os << '\n';
  }
}

void write_records_csv(std::ostream& os, const data::RawDataset& ds) {
  os << data::records_header() << '\n';
  for (const auto& r : ds.records) {
    os << r.detector_id << ',' << format_timestamp(r.hour) << ',';
    put_optional(os, r.flow);
    os << ',';
    put_optional(os, r.speed);
    for (const auto& v : r.incident) {
      os << ',';
      put_optional(os, v);
    }
    for (const auto& v : r.evacuation) {
      os << ',';
      put_optional(os, v);
    }
    os << '\n';
  }
}

nlohmann::json manifest(const Scenario& scenario, const GroundTruth& truth) {
  nlohmann::json incidents = nlohmann::json::array();
  for (const auto& i : truth.incidents) {
    incidents.push_back({{"detector_id", i.detector_id},
                         {"start_hour", i.start_hour},
                         {"duration", i.duration},
                         {"lanes_closed", i.lanes_closed}});
  }
  nlohmann::json outages = nlohmann::json::array();
  for (const auto& o : truth.outages) {
    outages.push_back({{"detector_id", o.detector_id}, {"start_hour", o.start_hour}, {"duration", o.duration}});
  }
  return {{"scenario", scenario},
          {"seed", scenario.seed},
          {"ground_truth",
           {{"surge_begin_hour", truth.surge_begin},
            {"surge_end_hour", truth.surge_end},
            {"incidents", incidents},
            {"outages", outages}}}};
}

void write_scenario(const std::filesystem::path& dir, const Scenario& scenario, const Generated& generated) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "meta.csv", std::ios::binary);
    write_meta_csv(os, generated.dataset);
  }
  {
    std::ofstream os(dir / "records.csv", std::ios::binary);
    write_records_csv(os, generated.dataset);
  }
  std::ofstream os(dir / "scenario.json", std::ios::binary);
  os << manifest(scenario, generated.truth).dump(2) << '\n';
  if (!os) throw std::runtime_error("failed writing scenario files to " + dir.string());
}

double travel_time_order_divergence(const data::FeatureTable& table, const Scenario& scenario) {
  const Hour origin = parse_timestamp(scenario.start);
  int considered = 0, differing = 0;
  std::vector<double> speeds(static_cast<std::size_t>(table.detector_count()));
  for (int t = scenario.surge_begin(); t < scenario.surge_end(); ++t) {
    const auto h = static_cast<int>(origin + t - table.start);
    if (h < 0 || h >= table.hours) continue;
    std::vector<int> active;
    for (int d = 0; d < table.detector_count(); ++d) {
      speeds[d] = table.speed(h, d);
      if (!std::isnan(table.flow(h, d)) && !std::isnan(table.speed(h, d))) active.push_back(d);
    }
    const auto g = graph::build_snapshot(table.start + h, table.detectors, active, speeds);
    if (g.edges.size() < 2) continue;
    auto order = [](const std::vector<double>& w) {
      std::vector<int> idx(w.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return w[a] < w[b]; });
      return idx;
    };
    ++considered;
    if (order(g.raw_distance) != order(g.raw_travel_time)) ++differing;
  }
  return considered == 0 ? 0.0 : static_cast<double>(differing) / considered;
}

}  // namespace evacnet::synth
