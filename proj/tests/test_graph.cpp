#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "evacnet/graph.hpp"
#include "support.hpp"

using namespace evacnet;
using namespace evacnet::graph;

namespace {

std::vector<DetectorMeta> metas_at(std::initializer_list<double> mileposts, Highway hw = Highway::I95) {
  std::vector<DetectorMeta> out;
  int k = 0;
  for (double mp : mileposts) {
    DetectorMeta d;
    d.id = "d" + std::to_string(k++);
    d.highway = hw;
    d.milepost = mp;
    d.lanes = 2;
    out.push_back(d);
  }
  return out;
}

std::vector<const DetectorMeta*> ptrs(const std::vector<DetectorMeta>& v, std::initializer_list<int> idx) {
  std::vector<const DetectorMeta*> out;
  for (int i : idx) out.push_back(&v[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<int> argsort(const std::vector<double>& v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] < v[b]; });
  return idx;
}

}  // namespace

TEST_CASE("edges: chain over mileposts {0,2,5}") {
  const auto m = metas_at({0, 2, 5});
  const auto e = build_edges(ptrs(m, {0, 1, 2}));
  REQUIRE(e.size() == 2);
  CHECK(e[0].i == 0);
  CHECK(e[0].j == 1);
  CHECK(e[0].distance == 2.0);
  CHECK(e[1].distance == 3.0);
}

TEST_CASE("edges: offline middle detector is skipped over") {
  const auto m = metas_at({0, 2, 5});
  const auto e = build_edges(ptrs(m, {0, 2}));
  REQUIRE(e.size() == 1);
  CHECK(e[0].distance == 5.0);
}

TEST_CASE("edges: single node and separate highways") {
  const auto m = metas_at({0});
  CHECK(build_edges(ptrs(m, {0})).empty());
  auto a = metas_at({0, 3}, Highway::I4);
  auto b = metas_at({1, 2}, Highway::I10);
  a.insert(a.end(), b.begin(), b.end());
  const auto e = build_edges(ptrs(a, {0, 1, 2, 3}));
  REQUIRE(e.size() == 2);
  CHECK(e[0].distance == 3.0);
  CHECK(e[1].distance == 1.0);
}

TEST_CASE("travel time") {
  CHECK(travel_time(10, 50, 50).hours == doctest::Approx(0.2));
  const auto tt = travel_time(2, 40, 60);
  CHECK(tt.hours == doctest::Approx(0.04));
  CHECK(!tt.floored);
  const auto z = travel_time(2, 0, 0);
  CHECK(z.floored);
  CHECK(z.hours == doctest::Approx(2.0 / 5.0));
  Rng rng(1);
  for (int k = 0; k < 100; ++k) {
    const double d = rng.uniform(0.1, 10), a = rng.uniform(0, 80), b = rng.uniform(0, 80);
    CHECK(travel_time(d, a, b).hours == travel_time(d, b, a).hours);
  }
}

TEST_CASE("scale weights") {
  const std::vector<double> raw{2, 4, 6};
  const auto s = scale_weights(raw, 0.01);
  CHECK(s[0] == doctest::Approx(0.01));
  CHECK(s[1] == doctest::Approx(0.505));
  CHECK(s[2] == doctest::Approx(1.0));
  const std::vector<double> eq{3, 3, 3};
  for (double x : scale_weights(eq, 0.01)) CHECK(x == 1.0);
  const std::vector<double> one{7};
  CHECK(scale_weights(one, 0.01)[0] == 1.0);
}

TEST_CASE("scale weights: range and order preserved") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> raw(8);
    for (auto& x : raw) x = rng.uniform(0.1, 20);
    const auto s = scale_weights(raw, 0.01);
    for (double x : s) {
      CHECK(x >= 0.01);
      CHECK(x <= 1.0);
    }
    CHECK(argsort(raw) == argsort(s));
  }
}

TEST_CASE("gcn normalize") {
  CHECK(gcn_normalize(Eigen::MatrixXd::Zero(3, 3)).isApprox(Eigen::MatrixXd::Identity(3, 3)));
  Eigen::MatrixXd a(2, 2);
  a << 0, 1, 1, 0;
  CHECK(gcn_normalize(a).isApprox(Eigen::MatrixXd::Constant(2, 2, 0.5)));
  // 2-regular ring of 5 nodes: all rows sum to 1.
  Eigen::MatrixXd ring = Eigen::MatrixXd::Zero(5, 5);
  for (int i = 0; i < 5; ++i) ring(i, (i + 1) % 5) = ring((i + 1) % 5, i) = 1;
  const auto n = gcn_normalize(ring);
  CHECK((n.rowwise().sum().array() - 1).abs().maxCoeff() < 1e-12);
}

TEST_CASE("snapshot: symmetry, zero diagonal, weights in range") {
  const auto dets = test::corridor(6);
  Rng rng(2);
  std::vector<double> speeds(6);
  for (auto& s : speeds) s = rng.uniform(3, 70);
  const std::vector<int> active{0, 1, 3, 4, 5};
  const auto g = build_snapshot(0, dets, active, speeds);
  CHECK(g.size() == 5);
  CHECK(g.edges.size() == 4);
  for (const auto* m : {&g.adj_distance, &g.adj_travel_time, &g.norm_distance, &g.norm_travel_time}) {
    CHECK((*m - m->transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(m->allFinite());
  }
  CHECK(g.adj_distance.diagonal().isZero());
  for (double w : g.scaled_travel_time) {
    CHECK(w >= 0.01);
    CHECK(w <= 1.0);
  }
  CHECK(g.raw_distance[1] == doctest::Approx(dets[3].milepost - dets[1].milepost));
}

TEST_CASE("snapshot: uniform speed makes both modalities identical after scaling") {
  const auto dets = test::corridor(5);
  const std::vector<double> speeds(5, 42.0);
  const std::vector<int> active{0, 1, 2, 3, 4};
  const auto g = build_snapshot(0, dets, active, speeds);
  for (std::size_t k = 0; k < g.edges.size(); ++k) {
    CHECK(g.raw_travel_time[k] == doctest::Approx(g.raw_distance[k] / 42.0));
    CHECK(g.scaled_travel_time[k] == doctest::Approx(g.scaled_distance[k]));
  }
  CHECK(g.norm_travel_time.isApprox(g.norm_distance));
}

TEST_CASE("snapshot: stalled detectors hit the speed floor and are counted") {
  const auto dets = test::corridor(3);
  const std::vector<double> speeds{0, 0, 60};
  const std::vector<int> active{0, 1, 2};
  const auto g = build_snapshot(0, dets, active, speeds);
  CHECK(g.floored_speeds == 1);
  CHECK(g.raw_travel_time[0] == doctest::Approx(g.raw_distance[0] / 5.0));
}

TEST_CASE("snapshot: inverted weights option") {
  const auto dets = metas_at({0, 2, 6, 12});
  const std::vector<double> speeds(4, 60);
  const std::vector<int> active{0, 1, 2, 3};
  GraphOptions o;
  o.invert_weights = true;
  const auto g = build_snapshot(0, dets, active, speeds, o);
  CHECK(g.scaled_distance.front() == doctest::Approx(1.0));
  CHECK(g.scaled_distance.back() == doctest::Approx(0.01));
}

TEST_CASE("static graph keeps frozen weights restricted to active nodes") {
  const auto dets = test::corridor(5);
  StaticGraph sg(dets);
  const std::vector<int> all{0, 1, 2, 3, 4};
  const std::vector<double> speeds(5, 30);
  const auto full = sg.restrict(0, all);
  CHECK(full.norm_distance.isApprox(build_snapshot(0, dets, all, speeds).norm_distance));
  const std::vector<int> part{0, 2, 3, 4};
  const auto r = sg.restrict(1, part);
  CHECK(r.size() == 4);
  CHECK(r.adj_distance(0, 1) == 0.0);  // no skip-over edge in the frozen graph
  CHECK(r.adj_distance(1, 2) == full.adj_distance(2, 3));
  CHECK(r.norm_travel_time == r.norm_distance);
}

TEST_CASE("edge csv dump") {
  const auto dets = metas_at({0, 2, 5});
  const std::vector<double> speeds{50, 50, 50};
  const std::vector<int> active{0, 1, 2};
  const auto g = build_snapshot(parse_timestamp("2024-10-01T05:00:00"), dets, active, speeds);
  std::ostringstream os;
  write_edge_csv(os, g, dets, true);
  const std::string s = os.str();
  CHECK(s.rfind("t,modality,i,j,raw_weight,scaled_weight\n", 0) == 0);
  CHECK(s.find("2024-10-01T05:00:00,distance,d0,d1,2,0.01") != std::string::npos);
  CHECK(s.find("travel_time,d1,d2") != std::string::npos);
  CHECK(std::count(s.begin(), s.end(), '\n') == 5);
}
