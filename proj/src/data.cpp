#include "evacnet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "evacnet/error.hpp"

namespace evacnet::data {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

std::string trim_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

class LineError {
 public:
  LineError(const std::string& file, std::size_t line) : prefix_(file + " line " + std::to_string(line) + ": ") {}
  [[noreturn]] void fail(const std::string& msg) const { throw UserError(prefix_ + msg); }

 private:
  std::string prefix_;
};

double parse_double(std::string_view s, const char* column, const LineError& where) {
  double v = 0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (s.empty() || ec != std::errc{} || ptr != last || !std::isfinite(v)) {
    where.fail(std::string("invalid number '") + std::string(s) + "' in column " + column);
  }
  return v;
}

std::optional<double> parse_optional(std::string_view s, const char* column, const LineError& where) {
  if (s.empty()) return std::nullopt;
  return parse_double(s, column, where);
}

void expect_header(std::istream& in, const std::string& expected, const std::string& name) {
  std::string header;
  if (!std::getline(in, header)) throw UserError(name + ": missing header row");
  header = trim_cr(header);
  if (header.size() >= 3 && static_cast<unsigned char>(header[0]) == 0xEF) header = header.substr(3);  // BOM
  if (header != expected) throw UserError(name + " line 1: expected header '" + expected + "', got '" + header + "'");
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v, double mean) {
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size()));
}

// Fills runs of NaN no longer than max_gap that have valid values on both
// sides.
void interpolate_gaps(Eigen::Ref<Eigen::VectorXd> series, int max_gap) {
  const Eigen::Index n = series.size();
  Eigen::Index last_valid = -1;
  for (Eigen::Index t = 0; t < n; ++t) {
    if (std::isnan(series[t])) continue;
    const Eigen::Index gap = t - last_valid - 1;
    if (last_valid >= 0 && gap > 0 && gap <= max_gap) {
      const double a = series[last_valid], b = series[t];
      for (Eigen::Index k = 1; k <= gap; ++k) {
        series[last_valid + k] = a + (b - a) * static_cast<double>(k) / static_cast<double>(gap + 1);
      }
    }
    last_valid = t;
  }
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

}  // namespace

std::string records_header() {
  std::string h = "detector_id,timestamp_iso8601,flow,speed";
  for (const char* c : kIncidentColumns) h += std::string(",") + c;
  for (const char* c : kEvacuationColumns) h += std::string(",") + c;
  return h;
}

RawDataset parse_csv(std::istream& meta, std::istream& records, const std::string& meta_name,
                     const std::string& records_name) {
  RawDataset ds;
  expect_header(meta, kMetaHeader, meta_name);
  std::string line;
  std::size_t lineno = 1;
  std::set<std::string> ids;
  std::set<std::pair<int, double>> positions;
  while (std::getline(meta, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty()) continue;
    const LineError where(meta_name, lineno);
    const auto f = split_line(line);
    if (f.size() != 6) where.fail("expected 6 fields, got " + std::to_string(f.size()));
    DetectorMeta m;
    m.id = std::string(f[0]);
    if (m.id.empty()) where.fail("empty detector_id");
    try {
      m.highway = parse_highway(f[1]);
    } catch (const UserError& e) {
      where.fail(e.what());
    }
    m.milepost = parse_double(f[2], "milepost", where);
    const double lanes = parse_double(f[3], "lanes", where);
    m.lat = parse_double(f[4], "lat", where);
    m.lon = parse_double(f[5], "lon", where);
    if (m.milepost < 0) where.fail("milepost must be >= 0");
    if (lanes < 1 || lanes != std::floor(lanes)) where.fail("lanes must be a positive integer");
    m.lanes = static_cast<int>(lanes);
    if (!ids.insert(m.id).second) where.fail("duplicate detector_id '" + m.id + "'");
    if (!positions.insert({static_cast<int>(m.highway), m.milepost}).second) {
      where.fail("duplicate (highway, milepost) for detector '" + m.id + "'");
    }
    ds.detectors.push_back(std::move(m));
  }
  std::sort(ds.detectors.begin(), ds.detectors.end(), [](const DetectorMeta& a, const DetectorMeta& b) {
    return std::tie(a.highway, a.milepost) < std::tie(b.highway, b.milepost);
  });

  expect_header(records, records_header(), records_name);
  lineno = 1;
  std::set<std::pair<std::string, Hour>> seen;
  while (std::getline(records, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty()) continue;
    const LineError where(records_name, lineno);
    const auto f = split_line(line);
    if (f.size() != 19) where.fail("expected 19 fields, got " + std::to_string(f.size()));
    HourlyRecord r;
    r.detector_id = std::string(f[0]);
    if (!ids.count(r.detector_id)) where.fail("unknown detector_id '" + r.detector_id + "'");
    try {
      r.hour = parse_timestamp(f[1]);
    } catch (const UserError& e) {
      where.fail(e.what());
    }
    r.flow = parse_optional(f[2], "flow", where);
    r.speed = parse_optional(f[3], "speed", where);
    if (r.flow && *r.flow < 0) where.fail("negative flow");
    if (r.speed && *r.speed < 0) where.fail("negative speed");
    for (std::size_t k = 0; k < 8; ++k) {
      r.incident[k] = parse_optional(f[4 + k], kIncidentColumns[k], where);
      if (r.incident[k] && *r.incident[k] < 0) where.fail(std::string("negative ") + kIncidentColumns[k]);
    }
    for (std::size_t k = 0; k < 7; ++k) r.evacuation[k] = parse_optional(f[12 + k], kEvacuationColumns[k], where);
    if (!seen.insert({r.detector_id, r.hour}).second) {
      where.fail("duplicate timestamp " + std::string(f[1]) + " for detector '" + r.detector_id + "'");
    }
    ds.records.push_back(std::move(r));
  }
  std::sort(ds.records.begin(), ds.records.end(), [](const HourlyRecord& a, const HourlyRecord& b) {
    return std::tie(a.detector_id, a.hour) < std::tie(b.detector_id, b.hour);
  });
  return ds;
}

RawDataset load_csv(const std::filesystem::path& meta_path, const std::filesystem::path& records_path) {
  std::ifstream meta(meta_path);
  if (!meta) throw UserError("cannot open " + meta_path.string());
  std::ifstream records(records_path);
  if (!records) throw UserError("cannot open " + records_path.string());
  return parse_csv(meta, records, meta_path.filename().string(), records_path.filename().string());
}

int FeatureRegistry::index_of(const std::string& name) const {
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (names[k] == name) return static_cast<int>(k);
  }
  return -1;
}

FeatureRegistry default_registry() {
  FeatureRegistry r;
  r.names = {"flow",           "speed",          "prev_day_mean", "prev_day_std", "prev_period_mean",
             "prev_period_std", "tod_night",     "tod_morning",   "tod_noon",     "tod_evening",
             "weekday"};
  for (const char* c : kIncidentColumns) r.names.emplace_back(c);
  r.names.insert(r.names.end(),
                 {"cum_pop_under_orders", "hrs_before_landfall", "hrs_after_order", "evac_day", "landfall_day"});
  r.temporal = static_cast<int>(r.names.size());
  for (Highway h : kHighways) r.names.push_back("hwy_" + std::string(to_string(h)));
  r.names.insert(r.names.end(), {"lanes", "dist_evac_zone_mi", "dist_landfall_mi"});
  r.spatial = static_cast<int>(r.names.size()) - r.temporal;
  return r;
}

int FeatureTable::detector_index(const std::string& id) const {
  for (std::size_t k = 0; k < detectors.size(); ++k) {
    if (detectors[k].id == id) return static_cast<int>(k);
  }
  return -1;
}

FeatureTable engineer_features(const RawDataset& raw, const EngineerOptions& options) {
  FeatureTable t;
  t.detectors = raw.detectors;
  t.registry = default_registry();
  const int D = t.detector_count();
  const int F = t.registry.size();
  const int Ft = t.registry.temporal;
  if (raw.records.empty()) throw UserError("records: no rows");

  Hour lo = raw.records.front().hour, hi = lo;
  for (const auto& r : raw.records) {
    lo = std::min(lo, r.hour);
    hi = std::max(hi, r.hour);
  }
  t.start = lo;
  t.hours = static_cast<int>(hi - lo + 1);
  const int T = t.hours;

  std::unordered_map<std::string, int> index;
  for (int d = 0; d < D; ++d) index[t.detectors[d].id] = d;

  t.flow = Eigen::MatrixXd::Constant(T, D, kNaN);
  t.speed = Eigen::MatrixXd::Constant(T, D, kNaN);
  // Per-hour incident and evacuation columns, NaN when absent.
  std::vector<Eigen::MatrixXd> incident(8, Eigen::MatrixXd::Constant(T, D, kNaN));
  std::vector<Eigen::MatrixXd> evac(7, Eigen::MatrixXd::Constant(T, D, kNaN));
  for (const auto& r : raw.records) {
    const int d = index.at(r.detector_id);
    const auto h = static_cast<Eigen::Index>(r.hour - lo);
    if (r.flow) t.flow(h, d) = *r.flow;
    if (r.speed) t.speed(h, d) = *r.speed;
    for (int k = 0; k < 8; ++k) {
      if (r.incident[k]) incident[k](h, d) = *r.incident[k];
    }
    for (int k = 0; k < 7; ++k) {
      if (r.evacuation[k]) evac[k](h, d) = *r.evacuation[k];
    }
  }
  for (int d = 0; d < D; ++d) {
    interpolate_gaps(t.flow.col(d), options.max_interpolated_gap);
    interpolate_gaps(t.speed.col(d), options.max_interpolated_gap);
  }

  // Spatial distances: forward fill, then back fill, then zero.
  for (int k : {1, 2}) {
    for (int d = 0; d < D; ++d) {
      auto col = evac[k].col(d);
      double last = kNaN;
      for (int h = 0; h < T; ++h) {
        if (std::isnan(col[h])) col[h] = last;
        else last = col[h];
      }
      last = kNaN;
      for (int h = T - 1; h >= 0; --h) {
        if (std::isnan(col[h])) col[h] = last;
        else last = col[h];
      }
      for (int h = 0; h < T; ++h) {
        if (std::isnan(col[h])) col[h] = 0.0;
      }
    }
  }

  t.active.setConstant(T, D, false);
  t.features.assign(static_cast<std::size_t>(T), Eigen::MatrixXd::Constant(D, F, kNaN));
  std::vector<double> day_vals, bin_vals;
  for (int h = 0; h < T; ++h) {
    const Hour abs_hour = lo + h;
    const std::int64_t day = floor_div(abs_hour, 24);
    const int hod = static_cast<int>(abs_hour - day * 24);
    const int bin = hod / 6;
    const Hour prev_day_start = (day - 1) * 24;
    for (int d = 0; d < D; ++d) {
      auto row = t.features[h].row(d);
      const DetectorMeta& m = t.detectors[d];
      // Spatial block.
      for (int k = 0; k < 5; ++k) row(Ft + k) = m.highway == kHighways[k] ? 1.0 : 0.0;
      row(Ft + 5) = m.lanes;
      row(Ft + 6) = evac[1](h, d);
      row(Ft + 7) = evac[2](h, d);

      if (std::isnan(t.flow(h, d)) || std::isnan(t.speed(h, d))) continue;
      day_vals.clear();
      bin_vals.clear();
      for (int k = 0; k < 24; ++k) {
        const Hour ph = prev_day_start + k - lo;
        if (ph < 0 || ph >= T) continue;
        const double f = t.flow(ph, d);
        if (std::isnan(f)) continue;
        day_vals.push_back(f);
        if (k / 6 == bin) bin_vals.push_back(f);
      }
      if (static_cast<int>(day_vals.size()) < options.min_prev_day_samples || bin_vals.empty()) continue;

      const double dm = mean_of(day_vals), pm = mean_of(bin_vals);
      int c = 0;
      row(c++) = t.flow(h, d);
      row(c++) = t.speed(h, d);
      row(c++) = dm;
      row(c++) = std_of(day_vals, dm);
      row(c++) = pm;
      row(c++) = std_of(bin_vals, pm);
      for (int b = 0; b < 4; ++b) row(c++) = b == bin ? 1.0 : 0.0;
      row(c++) = weekday(abs_hour) < 5 ? 1.0 : 0.0;
      for (int k = 0; k < 8; ++k) row(c++) = std::isnan(incident[k](h, d)) ? 0.0 : incident[k](h, d);
      for (int k : {0, 3, 4, 5, 6}) row(c++) = std::isnan(evac[k](h, d)) ? 0.0 : evac[k](h, d);
      t.active(h, d) = true;
    }
  }
  return t;
}

Scheme default_scheme(const std::string& name) {
  static const std::set<std::string> passthrough{"tod_night", "tod_morning", "tod_noon",    "tod_evening",
                                                 "weekday",   "incident_flag", "evac_day", "landfall_day"};
  if (passthrough.count(name) || name.rfind("hwy_", 0) == 0) return Scheme::passthrough;
  return Scheme::zscore;
}

Normalizer Normalizer::fit(const FeatureTable& table, int train_hours) {
  const int F = table.registry.size();
  const int D = table.detector_count();
  Normalizer n;
  n.offset_ = Eigen::RowVectorXd::Zero(F);
  n.scale_ = Eigen::RowVectorXd::Ones(F);
  for (int f = 0; f < F; ++f) n.schemes_.push_back(default_scheme(table.registry.names[f]));

  std::vector<double> vals;
  for (int f = 0; f < F; ++f) {
    if (n.schemes_[f] == Scheme::passthrough) continue;
    vals.clear();
    for (int h = 0; h < train_hours; ++h) {
      for (int d = 0; d < D; ++d) {
        if (table.active(h, d)) vals.push_back(table.features[h](d, f));
      }
    }
    if (vals.empty()) continue;
    if (n.schemes_[f] == Scheme::zscore) {
      const double m = mean_of(vals), s = std_of(vals, m);
      n.offset_[f] = m;
      n.scale_[f] = s > 1e-12 ? s : 1.0;
    } else {
      const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
      n.offset_[f] = *mn;
      n.scale_[f] = *mx - *mn > 1e-12 ? *mx - *mn : 1.0;
    }
  }

  // Per-detector target statistics with a pooled fallback.
  std::vector<double> pooled;
  std::vector<std::vector<double>> per(static_cast<std::size_t>(D));
  for (int h = 0; h < train_hours; ++h) {
    for (int d = 0; d < D; ++d) {
      if (!table.active(h, d)) continue;
      per[d].push_back(table.flow(h, d));
      pooled.push_back(table.flow(h, d));
    }
  }
  double pm = 0, ps = 1;
  if (!pooled.empty()) {
    pm = mean_of(pooled);
    ps = std_of(pooled, pm);
    if (ps <= 1e-12) ps = 1;
  }
  n.target_mean_ = Eigen::VectorXd::Constant(D, pm);
  n.target_std_ = Eigen::VectorXd::Constant(D, ps);
  for (int d = 0; d < D; ++d) {
    if (per[d].size() < 2) continue;
    const double m = mean_of(per[d]), s = std_of(per[d], m);
    n.target_mean_[d] = m;
    n.target_std_[d] = s > 1e-12 ? s : ps;
  }
  return n;
}

Normalizer Normalizer::from_parts(std::vector<Scheme> schemes, Eigen::RowVectorXd offset, Eigen::RowVectorXd scale,
                                  Eigen::VectorXd target_mean, Eigen::VectorXd target_std) {
  Normalizer n;
  n.schemes_ = std::move(schemes);
  n.offset_ = std::move(offset);
  n.scale_ = std::move(scale);
  n.target_mean_ = std::move(target_mean);
  n.target_std_ = std::move(target_std);
  return n;
}

Eigen::RowVectorXd Normalizer::transform_row(const Eigen::RowVectorXd& row) const {
  return (row - offset_).cwiseQuotient(scale_);
}

Eigen::RowVectorXd Normalizer::inverse_row(const Eigen::RowVectorXd& row) const {
  return row.cwiseProduct(scale_) + offset_;
}

Split split_and_fit(const FeatureTable& table, double train_frac) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw UserError("train fraction must lie in (0, 1)");
  Split s;
  s.train_hours = static_cast<int>(std::floor(static_cast<double>(table.hours) * train_frac + 1e-9));
  s.val_hours = table.hours - s.train_hours;
  if (s.train_hours <= 0 || s.val_hours <= 0) throw UserError("chronological split leaves an empty partition");
  s.normalizer = Normalizer::fit(table, s.train_hours);
  return s;
}

namespace {

std::vector<int> active_at(const FeatureTable& table, int h) {
  std::vector<int> out;
  for (int d = 0; d < table.detector_count(); ++d) {
    if (table.active(h, d)) out.push_back(d);
  }
  return out;
}

}  // namespace

GraphSeries build_dynamic_graphs(const FeatureTable& table, const graph::GraphOptions& options) {
  GraphSeries out;
  out.reserve(static_cast<std::size_t>(table.hours));
  std::vector<double> speeds(static_cast<std::size_t>(table.detector_count()));
  for (int h = 0; h < table.hours; ++h) {
    for (int d = 0; d < table.detector_count(); ++d) speeds[d] = table.speed(h, d);
    const auto active = active_at(table, h);
    out.push_back(std::make_shared<const graph::GraphSnapshot>(
        graph::build_snapshot(table.start + h, table.detectors, active, speeds, options)));
  }
  return out;
}

GraphSeries build_static_graphs(const FeatureTable& table, const graph::GraphOptions& options) {
  const graph::StaticGraph base(table.detectors, options);
  GraphSeries out;
  out.reserve(static_cast<std::size_t>(table.hours));
  for (int h = 0; h < table.hours; ++h) {
    out.push_back(std::make_shared<const graph::GraphSnapshot>(base.restrict(table.start + h, active_at(table, h))));
  }
  return out;
}

std::vector<WindowSample> make_windows(const FeatureTable& table, const Normalizer& normalizer,
                                       const GraphSeries& graphs, const WindowOptions& options) {
  const int l = options.input_length, p = options.horizon;
  if (l < 1 || p < 1) throw UserError("window lengths must be >= 1");
  const int end = options.end_hour < 0 ? table.hours : options.end_hour;
  if (end - options.first_hour < l + p) throw UserError("hour range shorter than input_length + horizon");
  if (static_cast<int>(graphs.size()) != table.hours) throw ShapeError("make_windows: one graph per hour required");
  const int Ft = table.registry.temporal, Fs = table.registry.spatial;

  std::vector<WindowSample> out;
  for (int a = options.first_hour; a + l + p <= end; ++a) {
    if (a + l < options.first_target_hour) continue;
    WindowSample w;
    w.anchor = table.start + a;
    w.anchor_index = a;
    for (int d = 0; d < table.detector_count(); ++d) {
      bool ok = true;
      for (int k = 0; k < l + p && ok; ++k) ok = table.active(a + k, d);
      if (ok) w.nodes.push_back(d);
    }
    if (w.nodes.empty()) continue;

    const int last_input = a + l - 1;
    for (int s = 0; s < l; ++s) {
      StepInput step;
      step.graph = graphs[static_cast<std::size_t>(a + s)];
      const auto& gnodes = step.graph->nodes;
      const auto n = static_cast<Eigen::Index>(gnodes.size());
      step.temporal.resize(n, Ft);
      step.spatial.resize(n, Fs);
      for (Eigen::Index r = 0; r < n; ++r) {
        const int d = gnodes[r];
        for (int f = 0; f < Ft; ++f) step.temporal(r, f) = normalizer.transform(f, table.features[a + s](d, f));
        for (int f = 0; f < Fs; ++f) {
          step.spatial(r, f) = normalizer.transform(Ft + f, table.features[last_input](d, Ft + f));
        }
      }
      for (int d : w.nodes) {
        const auto it = std::lower_bound(gnodes.begin(), gnodes.end(), d);
        if (it == gnodes.end() || *it != d) throw std::logic_error("window node missing from step graph");
        step.window_rows.push_back(it - gnodes.begin());
      }
      w.steps.push_back(std::move(step));
    }
    const auto N = static_cast<Eigen::Index>(w.nodes.size());
    w.target.resize(N, p);
    w.target_flow.resize(N, p);
    for (Eigen::Index r = 0; r < N; ++r) {
      for (int k = 0; k < p; ++k) {
        const double f = table.flow(a + l + k, w.nodes[r]);
        w.target_flow(r, k) = f;
        w.target(r, k) = normalizer.transform_target(w.nodes[r], f);
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace evacnet::data
