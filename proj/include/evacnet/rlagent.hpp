#pragma once

// Feature-masking agent: a Double DQN over the feature index space with a
// proportional prioritized replay buffer. Each training step it zeroes one
// input feature; the forecaster's negative loss is the reward, and how often
// each feature gets masked yields a feature ranking.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "evacnet/data.hpp"
#include "evacnet/mask.hpp"
#include "evacnet/numcore/adam.hpp"
#include "evacnet/numcore/tape.hpp"
#include "evacnet/random.hpp"

namespace evacnet::rl {

using numcore::Matrix;
using numcore::Tape;
using numcore::Var;

/// Mean over windows, predicted nodes and steps of the (unmasked) temporal
/// features, followed by the mean over windows and nodes of the spatial ones.
Eigen::VectorXd build_state(std::span<const data::WindowSample* const> batch);

/// Zeroes exactly one entry: temporal[a] when a < F_t, else spatial[a - F_t].
MaskState apply_mask(int action, int temporal_count, int spatial_count);

/// r = -loss. Throws NumericError on non-finite loss.
double compute_reward(double loss);

/// MLP state -> one Q-value per action: F -> hidden -> hidden -> F, ReLU.
/// Weights stored input-major (x · W) since they never appear in formulas.
struct QNetwork {
  Matrix w1, b1, w2, b2, w3, b3;

  static QNetwork init(int features, int hidden, Rng& rng);
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;
  static const std::vector<std::string>& names();

  /// Rows of `states` are states; returns batch x actions.
  Matrix q_values(const Matrix& states) const;
  Eigen::VectorXd q_values(const Eigen::VectorXd& state) const;
};

/// Differentiable forward of `net` bound as tape variables `vars`.
Var q_forward(Var states, std::span<const Var> vars);

struct QNetworks {
  QNetwork online;
  QNetwork target;

  void sync() { target = online; }
};

/// Index of the maximum, lowest index on ties.
int argmax(const Eigen::Ref<const Eigen::VectorXd>& values);

struct EpsilonSchedule {
  double start = 1.0;
  double decay = 0.995;
  double min = 0.05;
  std::int64_t step = 0;

  double value(std::int64_t n) const;
  double value() const { return value(step); }
  void advance() { ++step; }
};

/// ε-greedy over Q(s, ·; θ_online).
int select_action(const Eigen::VectorXd& state, const QNetwork& online, double epsilon, Rng& rng);

struct Transition {
  Eigen::VectorXd state;
  int action = 0;
  double reward = 0.0;
  Eigen::VectorXd next_state;
  double priority = 1.0;
};

/// y = r + γ Q(s', argmax_a' Q(s', a'; θ); θ⁻).
double ddqn_target(double reward, const Eigen::VectorXd& next_state, double gamma, const QNetworks& nets);

/// Fixed-capacity ring of transitions with proportional prioritized sampling
/// (P(i) ∝ p_i^α) backed by a sum tree.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity, double alpha = 0.6);

  /// New transitions enter with the largest priority seen so far.
  void push(Transition t);
  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  double alpha() const { return alpha_; }
  const Transition& at(std::size_t i) const { return items_.at(i); }

  /// Sampling probability of slot i.
  double probability(std::size_t i) const;

  struct Sample {
    std::vector<std::size_t> indices;
    std::vector<double> weights;  // importance-sampling weights, max-normalized
  };
  /// Draws with replacement; `beta` = 0 gives unit weights.
  Sample sample(std::size_t batch_size, double beta, Rng& rng) const;

  void update_priority(std::size_t i, double priority);

 private:
  void set_leaf(std::size_t i, double value);

  std::size_t capacity_;
  double alpha_;
  std::size_t leaves_ = 1;
  std::vector<double> tree_;  // implicit binary sum tree over p_i^α
  std::vector<Transition> items_;
  std::size_t next_ = 0;
  std::size_t size_ = 0;
  double max_priority_ = 1.0;
};

struct QUpdate {
  std::vector<double> td_errors;  // y - Q(s, a; θ) before the update
  double loss = 0.0;              // IS-weighted mean squared TD error
};

/// One Adam step on the IS-weighted squared TD error; new priorities are
/// |TD| + 1e-6 (written back into `buffer` when given).
QUpdate train_q(std::span<const Transition* const> batch, std::span<const double> weights, double gamma,
                QNetworks& nets, numcore::AdamState& adam);

/// How often each feature was masked.
class MaskCounter {
 public:
  explicit MaskCounter(int features = 0) : counts_(static_cast<std::size_t>(features), 0) {}
  static MaskCounter from_counts(std::vector<std::int64_t> counts) {
    MaskCounter c;
    for (auto n : counts) c.total_ += n;
    c.counts_ = std::move(counts);
    return c;
  }
  void record(int action) { ++counts_.at(static_cast<std::size_t>(action)); ++total_; }
  std::int64_t count(int feature) const { return counts_.at(static_cast<std::size_t>(feature)); }
  std::int64_t total() const { return total_; }
  int size() const { return static_cast<int>(counts_.size()); }
  const std::vector<std::int64_t>& counts() const { return counts_; }

 private:
  std::vector<std::int64_t> counts_;
  std::int64_t total_ = 0;
};

struct RankingEntry {
  int rank = 0;
  std::string feature;
  std::int64_t mask_count = 0;
  double mask_fraction = 0.0;
};

/// Least-masked first (rank 1 = most important); ties keep registry order.
std::vector<RankingEntry> ranking_report(const MaskCounter& counter, const std::vector<std::string>& names);
void write_ranking_csv(std::ostream& os, const std::vector<RankingEntry>& ranking);

struct AgentConfig {
  double gamma = 0.95;
  std::size_t buffer_capacity = 10000;
  std::size_t batch_size = 64;
  int target_sync = 100;  // learning steps between θ⁻ ← θ
  double alpha = 0.6;
  double beta_start = 0.4;
  double beta_end = 1.0;
  double lr = 1e-3;
  int hidden = 128;
  std::size_t warmup = 64;  // transitions stored before learning starts
  double eps_start = 1.0;
  double eps_decay = 0.995;
  double eps_min = 0.05;
};

/// The agent as driven by the trainer: act on a state, receive the reward,
/// complete the transition once the next state is known, learn.
class Agent {
 public:
  Agent(int temporal_count, int spatial_count, const AgentConfig& config, std::uint64_t seed);

  /// Chooses and records a masking action for `state`, closing the pending
  /// transition with `state` as its successor.
  MaskState act(const Eigen::VectorXd& state);
  /// Reward for the last action; schedules the transition.
  void reward(double r);
  /// One replay update when warm; `progress` in [0, 1] anneals β.
  std::optional<QUpdate> learn(double progress);

  const MaskCounter& counter() const { return counter_; }
  const EpsilonSchedule& epsilon() const { return epsilon_; }
  const QNetworks& networks() const { return nets_; }
  QNetworks& networks() { return nets_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  std::int64_t learn_steps() const { return learn_steps_; }
  double last_reward() const { return last_reward_; }

 private:
  int temporal_;
  int spatial_;
  AgentConfig config_;
  Rng rng_;
  QNetworks nets_;
  numcore::AdamState adam_;
  ReplayBuffer buffer_;
  EpsilonSchedule epsilon_;
  MaskCounter counter_;
  std::optional<Transition> pending_;
  bool awaiting_reward_ = false;
  std::int64_t learn_steps_ = 0;
  double last_reward_ = 0.0;
};

}  // namespace evacnet::rl
