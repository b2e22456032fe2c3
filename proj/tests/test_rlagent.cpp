#include <doctest.h>

#include <cmath>
#include <sstream>

#include "evacnet/error.hpp"
#include "evacnet/rlagent.hpp"
#include "support.hpp"

using namespace evacnet;
using namespace evacnet::rl;

namespace {

/// Q-network whose output ignores the state and equals `q`.
QNetwork constant_q(const std::vector<double>& q, int hidden = 4) {
  Rng rng(1);
  auto net = QNetwork::init(static_cast<int>(q.size()), hidden, rng);
  net.w3.setZero();
  for (std::size_t k = 0; k < q.size(); ++k) net.b3(0, static_cast<Eigen::Index>(k)) = q[k];
  return net;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) out[k++] = x;
  return out;
}

}  // namespace

TEST_CASE("state: means over batch and time") {
  Rng rng(1);
  auto w = test::dense_window(rng, 1, 2, 1, 2, 1);
  w.steps[0].temporal << 0, 5;
  w.steps[1].temporal << 2, 5;
  w.steps[0].spatial << 3;
  w.steps[1].spatial << 3;
  const data::WindowSample* one[] = {&w};
  const auto s = build_state(one);
  CHECK(s.size() == 3);
  CHECK(s[0] == 1.0);
  CHECK(s[1] == 5.0);
  CHECK(s[2] == 3.0);
  CHECK_THROWS(build_state(std::span<const data::WindowSample* const>{}));

  auto w2 = test::dense_window(rng, 3, 4, 2, 3, 1);
  const data::WindowSample* two[] = {&w, &w2};
  CHECK_THROWS(build_state(two));  // mismatched widths
  const data::WindowSample* same[] = {&w2, &w2};
  CHECK(build_state(same).size() == 6);
}

TEST_CASE("mask: one zero in the right block") {
  auto m = apply_mask(3, 8, 4);
  CHECK(m.temporal[3] == 0.0);
  CHECK(m.temporal.sum() == 7.0);
  CHECK(m.spatial.sum() == 4.0);
  m = apply_mask(10, 8, 4);
  CHECK(m.spatial[2] == 0.0);
  CHECK(m.temporal.sum() == 8.0);
  CHECK(m.action == 10);
  CHECK_THROWS_AS(apply_mask(12, 8, 4), std::out_of_range);
  CHECK_THROWS_AS(apply_mask(-1, 8, 4), std::out_of_range);
}

TEST_CASE("reward") {
  CHECK(compute_reward(0.25) == -0.25);
  CHECK(compute_reward(0.0) == 0.0);
  CHECK(compute_reward(0.1) > compute_reward(0.2));
  CHECK_THROWS_AS(compute_reward(std::nan("")), NumericError);
  CHECK_THROWS_AS(compute_reward(INFINITY), NumericError);
}

TEST_CASE("epsilon schedule") {
  EpsilonSchedule e;
  for (std::int64_t n = 0; n <= 2000; ++n) CHECK(e.value(n) == std::max(0.05, std::pow(0.995, static_cast<double>(n))));
  CHECK(e.value(0) == 1.0);
  CHECK(e.value(100000) == 0.05);
  for (int n = 1; n < 3000; ++n) CHECK(e.value(n) <= e.value(n - 1));
}

TEST_CASE("argmax and greedy selection") {
  CHECK(argmax(vec({1, 3, 2})) == 1);
  CHECK(argmax(vec({2, 2, 0})) == 0);
  Rng rng(3);
  CHECK(select_action(vec({0, 0, 0}), constant_q({1, 3, 2}), 0.0, rng) == 1);
  CHECK(select_action(vec({0, 0, 0}), constant_q({2, 2, 0}), 0.0, rng) == 0);
}

TEST_CASE("epsilon = 1 is uniform over actions") {
  Rng rng(4);
  const auto net = constant_q({0, 0, 9, 0, 0});
  std::vector<double> counts(5, 0.0);
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) counts[static_cast<std::size_t>(select_action(vec({0, 0, 0, 0, 0}), net, 1.0, rng))] += 1;
  const double chi = test::chi_square(counts, std::vector<double>(5, 0.2), draws);
  CHECK(test::chi_square_p(chi, 4) > 0.01);
}

TEST_CASE("chi-square helper sanity") {
  CHECK(test::chi_square_p(0.0, 3) == 1.0);
  CHECK(test::chi_square_p(3.841458820694124, 1) == doctest::Approx(0.05).epsilon(1e-6));
  CHECK(test::chi_square_p(13.276704135987622, 4) == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("ddqn target") {
  QNetworks nets{constant_q({0.2, 0.1, 5.0}), constant_q({9.0, 9.0, 1.0})};
  const auto s = vec({0.3, -1.0, 2.0});
  CHECK(ddqn_target(-0.5, s, 0.95, nets) == doctest::Approx(0.45).epsilon(1e-15));
  CHECK(ddqn_target(-0.5, s, 0.0, nets) == -0.5);
  // Swapping roles changes the result: selection must come from the online net.
  QNetworks swapped{nets.target, nets.online};
  CHECK(ddqn_target(-0.5, s, 0.95, swapped) == doctest::Approx(-0.5 + 0.95 * 0.2));
}

TEST_CASE("ddqn target with gamma 0 equals reward exactly") {
  Rng rng(5);
  QNetworks nets;
  nets.online = QNetwork::init(6, 16, rng);
  nets.target = QNetwork::init(6, 16, rng);
  for (int k = 0; k < 1000; ++k) {
    const double r = 10 * rng.normal();
    CHECK(ddqn_target(r, test::random_matrix(rng, 6, 1), 0.0, nets) == r);
  }
}

TEST_CASE("replay: proportional probabilities") {
  ReplayBuffer b(8, 1.0);
  b.push({vec({0}), 0, 0, vec({0}), 1});
  b.push({vec({0}), 0, 0, vec({0}), 1});
  b.update_priority(0, 3.0);
  b.update_priority(1, 1.0);
  CHECK(b.probability(0) == doctest::Approx(0.75));
  CHECK(b.probability(1) == doctest::Approx(0.25));
  ReplayBuffer c(8, 0.5);
  c.push({vec({0}), 0, 0, vec({0}), 1});
  c.push({vec({0}), 0, 0, vec({0}), 1});
  c.update_priority(0, 4.0);
  c.update_priority(1, 1.0);
  CHECK(c.probability(0) == doctest::Approx(2.0 / 3));
}

TEST_CASE("replay: sampling frequencies and IS weights") {
  ReplayBuffer b(16, 0.6);
  Rng rng(6);
  const std::vector<double> pr{0.5, 3.0, 1.0, 7.0, 0.1, 2.0};
  for (std::size_t k = 0; k < pr.size(); ++k) b.push({vec({0}), 0, 0, vec({0}), 1});
  for (std::size_t k = 0; k < pr.size(); ++k) b.update_priority(k, pr[k]);
  std::vector<double> probs, counts(pr.size(), 0.0);
  double z = 0;
  for (double p : pr) z += std::pow(p, 0.6);
  for (std::size_t k = 0; k < pr.size(); ++k) {
    probs.push_back(std::pow(pr[k], 0.6) / z);
    CHECK(b.probability(k) == doctest::Approx(probs[k]).epsilon(1e-12));
  }
  const int draws = 100000;
  const auto s = b.sample(draws, 0.0, rng);
  for (auto i : s.indices) counts[i] += 1;
  CHECK(test::chi_square_p(test::chi_square(counts, probs, draws), 5) > 0.01);
  for (double w : s.weights) CHECK(w == 1.0);

  const auto s2 = b.sample(32, 0.4, rng);
  double mx = 0;
  for (std::size_t k = 0; k < s2.indices.size(); ++k) {
    const double expect = std::pow(6 * probs[s2.indices[k]], -0.4);
    mx = std::max(mx, expect);
  }
  for (std::size_t k = 0; k < s2.indices.size(); ++k) {
    CHECK(s2.weights[k] == doctest::Approx(std::pow(6 * probs[s2.indices[k]], -0.4) / mx));
    CHECK(s2.weights[k] <= 1.0);
  }
}

TEST_CASE("replay: equal priorities sample uniformly; capacity is a ring") {
  ReplayBuffer b(4, 0.6);
  Rng rng(7);
  for (int k = 0; k < 6; ++k) b.push({vec({static_cast<double>(k)}), 0, 0, vec({0}), 1});
  CHECK(b.size() == 4);
  CHECK(b.at(0).state[0] == 4.0);  // oldest slots overwritten
  std::vector<double> counts(4, 0.0);
  const auto s = b.sample(10000, 0.0, rng);
  for (auto i : s.indices) counts[i] += 1;
  CHECK(test::chi_square_p(test::chi_square(counts, std::vector<double>(4, 0.25), 10000), 3) > 0.01);
}

TEST_CASE("replay: new items get the max priority; empty buffer throws") {
  ReplayBuffer b(8, 1.0);
  Rng rng(8);
  CHECK_THROWS(b.sample(1, 0.0, rng));
  b.push({vec({0}), 0, 0, vec({0}), 1});
  b.update_priority(0, 5.0);
  b.push({vec({0}), 0, 0, vec({0}), 1});
  CHECK(b.probability(1) == doctest::Approx(0.5));
}

TEST_CASE("train_q: zero TD error leaves parameters unchanged") {
  Rng rng(9);
  QNetworks nets;
  nets.online = QNetwork::init(3, 8, rng);
  nets.sync();
  const Eigen::VectorXd s = test::random_matrix(rng, 3, 1);
  const double q = nets.online.q_values(s)[1];
  Transition t{s, 1, q, s, 1.0};
  const Transition* batch[] = {&t};
  const double w[] = {1.0};
  const auto before = nets.online;
  numcore::AdamState adam;
  const auto up = train_q(batch, w, 0.0, nets, adam);
  CHECK(up.td_errors[0] == 0.0);
  for (std::size_t k = 0; k < 6; ++k) CHECK(*nets.online.tensors()[k] == *before.tensors()[k]);
}

TEST_CASE("train_q: TD errors match y - Q and a single transition is fitted") {
  Rng rng(10);
  QNetworks nets;
  nets.online = QNetwork::init(4, 16, rng);
  nets.sync();
  const Eigen::VectorXd s = test::random_matrix(rng, 4, 1), s2 = test::random_matrix(rng, 4, 1);
  Transition t{s, 2, -0.7, s2, 1.0};
  const Transition* batch[] = {&t};
  const double w[] = {1.0};
  numcore::AdamState adam;
  adam.lr = 1e-3;
  const double y = ddqn_target(t.reward, s2, 0.5, nets);
  auto up = train_q(batch, w, 0.5, nets, adam);
  CHECK(up.td_errors[0] == doctest::Approx(y - nets.target.q_values(s)[2]));
  double td = 1;
  for (int k = 0; k < 500 && std::abs(td) >= 1e-3; ++k) {
    up = train_q(batch, w, 0.5, nets, adam);
    td = up.td_errors[0];
  }
  CHECK(std::abs(td) < 1e-3);
}

TEST_CASE("agent: transitions close on the next state and priorities refresh") {
  AgentConfig cfg;
  cfg.warmup = 4;
  cfg.batch_size = 4;
  cfg.target_sync = 2;
  Agent agent(3, 1, cfg, 11);
  Rng rng(12);
  std::vector<Eigen::VectorXd> states;
  for (int k = 0; k < 6; ++k) {
    states.push_back(test::random_matrix(rng, 4, 1));
    const auto m = agent.act(states.back());
    CHECK(m.temporal.sum() + m.spatial.sum() == 3.0);
    agent.reward(-0.1 * k);
    agent.learn(k / 6.0);
  }
  CHECK(agent.buffer().size() == 5);
  CHECK(agent.buffer().at(0).next_state == states[1]);
  CHECK(agent.buffer().at(2).reward == doctest::Approx(-0.2));
  CHECK(agent.counter().total() == 6);
  CHECK(agent.learn_steps() == 2);
  CHECK(agent.epsilon().step == 6);
  CHECK_THROWS(Agent(3, 1, cfg, 1).reward(1.0));
}

TEST_CASE("ranking report") {
  const auto c = MaskCounter::from_counts({2, 10, 50});
  const auto r = ranking_report(c, {"vol", "weekday", "incident"});
  CHECK(r[0].feature == "vol");
  CHECK(r[1].feature == "weekday");
  CHECK(r[2].feature == "incident");
  CHECK(r[2].rank == 3);
  CHECK(r[2].mask_fraction == doctest::Approx(50.0 / 62));
  std::int64_t sum = 0;
  for (const auto& e : r) sum += e.mask_count;
  CHECK(sum == c.total());

  const auto u = ranking_report(MaskCounter::from_counts({4, 4, 4}), {"a", "b", "c"});
  CHECK(u[0].feature == "a");
  CHECK(u[2].feature == "c");

  std::ostringstream os;
  write_ranking_csv(os, r);
  CHECK(os.str().rfind("rank,feature_name,mask_count,mask_fraction\n1,vol,2,", 0) == 0);
}
