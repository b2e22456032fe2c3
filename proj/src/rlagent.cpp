#include "evacnet/rlagent.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <stdexcept>

#include "evacnet/error.hpp"

namespace evacnet::rl {

namespace nc = numcore;

Eigen::VectorXd build_state(std::span<const data::WindowSample* const> batch) {
  if (batch.empty()) throw std::invalid_argument("build_state: empty batch");
  const auto Ft = batch.front()->steps.front().temporal.cols();
  const auto Fs = batch.front()->steps.front().spatial.cols();
  Eigen::VectorXd temporal = Eigen::VectorXd::Zero(Ft);
  Eigen::VectorXd spatial = Eigen::VectorXd::Zero(Fs);
  double nt = 0, ns = 0;
  for (const auto* w : batch) {
    for (const auto& step : w->steps) {
      if (step.temporal.cols() != Ft || step.spatial.cols() != Fs) {
        throw ShapeError("build_state: windows disagree on feature width");
      }
      for (Eigen::Index r : step.window_rows) {
        temporal += step.temporal.row(r).transpose();
        nt += 1;
      }
    }
    // Spatial values repeat across steps; read them once from the last step.
    const auto& last = w->steps.back();
    for (Eigen::Index r : last.window_rows) {
      spatial += last.spatial.row(r).transpose();
      ns += 1;
    }
  }
  Eigen::VectorXd s(Ft + Fs);
  s << temporal / nt, spatial / ns;
  return s;
}

MaskState apply_mask(int action, int temporal_count, int spatial_count) {
  if (action < 0 || action >= temporal_count + spatial_count) {
    throw std::out_of_range("apply_mask: action " + std::to_string(action) + " outside [0, " +
                            std::to_string(temporal_count + spatial_count) + ")");
  }
  MaskState m = MaskState::none(temporal_count, spatial_count);
  if (action < temporal_count) m.temporal[action] = 0.0;
  else m.spatial[action - temporal_count] = 0.0;
  m.action = action;
  return m;
}

double compute_reward(double loss) {
  if (!std::isfinite(loss)) throw NumericError("compute_reward: non-finite loss");
  return -loss;
}

// ---------------------------------------------------------------------------

namespace {

Matrix uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(-bound, bound);
  }
  return m;
}

}  // namespace

QNetwork QNetwork::init(int features, int hidden, Rng& rng) {
  QNetwork q;
  q.w1 = uniform(features, hidden, features, rng);
  q.b1 = uniform(1, hidden, features, rng);
  q.w2 = uniform(hidden, hidden, hidden, rng);
  q.b2 = uniform(1, hidden, hidden, rng);
  q.w3 = uniform(hidden, features, hidden, rng);
  q.b3 = uniform(1, features, hidden, rng);
  return q;
}

std::vector<Matrix*> QNetwork::tensors() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

std::vector<const Matrix*> QNetwork::tensors() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

const std::vector<std::string>& QNetwork::names() {
  static const std::vector<std::string> n{"w1", "b1", "w2", "b2", "w3", "b3"};
  return n;
}

Matrix QNetwork::q_values(const Matrix& states) const {
  Matrix h1 = ((states * w1).rowwise() + b1.row(0)).cwiseMax(0.0);
  Matrix h2 = ((h1 * w2).rowwise() + b2.row(0)).cwiseMax(0.0);
  return (h2 * w3).rowwise() + b3.row(0);
}

Eigen::VectorXd QNetwork::q_values(const Eigen::VectorXd& state) const {
  return q_values(Matrix(state.transpose())).row(0).transpose();
}

Var q_forward(Var states, std::span<const Var> v) {
  Var h1 = nc::relu(nc::add_rowwise(nc::matmul(states, v[0]), v[1]));
  Var h2 = nc::relu(nc::add_rowwise(nc::matmul(h1, v[2]), v[3]));
  return nc::add_rowwise(nc::matmul(h2, v[4]), v[5]);
}

int argmax(const Eigen::Ref<const Eigen::VectorXd>& values) {
  int best = 0;
  for (Eigen::Index k = 1; k < values.size(); ++k) {
    if (values[k] > values[best]) best = static_cast<int>(k);
  }
  return best;
}

double EpsilonSchedule::value(std::int64_t n) const {
  return std::max(min, start * std::pow(decay, static_cast<double>(n)));
}

int select_action(const Eigen::VectorXd& state, const QNetwork& online, double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("select_action: epsilon outside [0, 1]");
  const auto actions = static_cast<std::uint64_t>(online.w3.cols());
  if (rng.uniform() < epsilon) return static_cast<int>(rng.index(actions));
  return argmax(online.q_values(state));
}

double ddqn_target(double reward, const Eigen::VectorXd& next_state, double gamma, const QNetworks& nets) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("ddqn_target: gamma outside [0, 1]");
  if (gamma == 0.0) return reward;
  const int a_star = argmax(nets.online.q_values(next_state));
  return reward + gamma * nets.target.q_values(next_state)[a_star];
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity, double alpha) : capacity_(capacity), alpha_(alpha) {
  if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
  while (leaves_ < capacity_) leaves_ <<= 1;
  tree_.assign(2 * leaves_, 0.0);
  items_.reserve(std::min<std::size_t>(capacity_, 1 << 16));
}

void ReplayBuffer::set_leaf(std::size_t i, double value) {
  std::size_t node = leaves_ + i;
  tree_[node] = value;
  for (node >>= 1; node >= 1; node >>= 1) tree_[node] = tree_[2 * node] + tree_[2 * node + 1];
}

void ReplayBuffer::push(Transition t) {
  t.priority = max_priority_;
  const std::size_t slot = next_;
  if (items_.size() < capacity_) items_.push_back(std::move(t));
  else items_[slot] = std::move(t);
  set_leaf(slot, std::pow(items_[slot].priority, alpha_));
  next_ = (next_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

void ReplayBuffer::update_priority(std::size_t i, double priority) {
  if (i >= size_) throw std::out_of_range("ReplayBuffer::update_priority: index out of range");
  if (!(priority > 0.0) || !std::isfinite(priority)) throw std::invalid_argument("priority must be positive and finite");
  items_[i].priority = priority;
  max_priority_ = std::max(max_priority_, priority);
  set_leaf(i, std::pow(priority, alpha_));
}

double ReplayBuffer::probability(std::size_t i) const {
  if (i >= size_) throw std::out_of_range("ReplayBuffer::probability: index out of range");
  return tree_[leaves_ + i] / tree_[1];
}

ReplayBuffer::Sample ReplayBuffer::sample(std::size_t batch_size, double beta, Rng& rng) const {
  if (size_ == 0) throw std::logic_error("ReplayBuffer::sample: buffer is empty");
  Sample s;
  s.indices.reserve(batch_size);
  s.weights.reserve(batch_size);
  const double total = tree_[1];
  for (std::size_t k = 0; k < batch_size; ++k) {
    double u = rng.uniform() * total;
    std::size_t node = 1;
    while (node < leaves_) {
      const double left = tree_[2 * node];
      if (u < left || tree_[2 * node + 1] <= 0.0) {
        node = 2 * node;
      } else {
        u -= left;
        node = 2 * node + 1;
      }
    }
    std::size_t idx = node - leaves_;
    if (idx >= size_) idx = size_ - 1;  // guards float drift at the right edge
    s.indices.push_back(idx);
  }
  double wmax = 0;
  for (std::size_t idx : s.indices) {
    const double w = beta == 0.0 ? 1.0 : std::pow(static_cast<double>(size_) * probability(idx), -beta);
    s.weights.push_back(w);
    wmax = std::max(wmax, w);
  }
  for (double& w : s.weights) w /= wmax;
  return s;
}

QUpdate train_q(std::span<const Transition* const> batch, std::span<const double> weights, double gamma,
                QNetworks& nets, numcore::AdamState& adam) {
  if (batch.size() != weights.size()) throw ShapeError("train_q: one weight per transition required");
  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto F = batch.front()->state.size();
  Matrix states(B, F), next(B, F), w(B, 1), y(B, 1);
  std::vector<Eigen::Index> actions(static_cast<std::size_t>(B));
  for (Eigen::Index i = 0; i < B; ++i) {
    states.row(i) = batch[i]->state.transpose();
    next.row(i) = batch[i]->next_state.transpose();
    w(i, 0) = weights[i];
    actions[i] = batch[i]->action;
  }
  const Matrix q_next_online = nets.online.q_values(next);
  const Matrix q_next_target = nets.target.q_values(next);
  for (Eigen::Index i = 0; i < B; ++i) {
    const int a_star = argmax(q_next_online.row(i).transpose());
    y(i, 0) = batch[i]->reward + gamma * q_next_target(i, a_star);
  }

  Tape tape;
  std::vector<Var> vars;
  for (const Matrix* m : nets.online.tensors()) vars.push_back(tape.variable(*m));
  Var q = nc::pick_per_row(q_forward(tape.constant(states), vars), actions);
  Var loss = nc::weighted_mse(q, y, &w);

  QUpdate out;
  out.loss = loss.value()(0, 0);
  for (Eigen::Index i = 0; i < B; ++i) out.td_errors.push_back(y(i, 0) - q.value()(i, 0));

  tape.backward(loss);
  std::vector<Matrix> grads;
  for (const Var& v : vars) grads.push_back(tape.grad(v));
  auto params = nets.online.tensors();
  nc::adam_step<double>(params, grads, adam);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<RankingEntry> ranking_report(const MaskCounter& counter, const std::vector<std::string>& names) {
  if (static_cast<int>(names.size()) != counter.size()) throw ShapeError("ranking_report: registry size mismatch");
  std::vector<int> order(names.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return counter.count(a) < counter.count(b); });
  std::vector<RankingEntry> out;
  const double total = static_cast<double>(counter.total());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const int f = order[k];
    out.push_back({static_cast<int>(k + 1), names[f], counter.count(f),
                   total > 0 ? static_cast<double>(counter.count(f)) / total : 0.0});
  }
  return out;
}

void write_ranking_csv(std::ostream& os, const std::vector<RankingEntry>& ranking) {
  os << "rank,feature_name,mask_count,mask_fraction\n";
  for (const auto& e : ranking) {
    os << e.rank << ',' << e.feature << ',' << e.mask_count << ',' << std::setprecision(6) << e.mask_fraction
       << '\n';
  }
}

// ---------------------------------------------------------------------------

Agent::Agent(int temporal_count, int spatial_count, const AgentConfig& config, std::uint64_t seed)
    : temporal_(temporal_count),
      spatial_(spatial_count),
      config_(config),
      rng_(seed),
      buffer_(config.buffer_capacity, config.alpha),
      counter_(temporal_count + spatial_count) {
  nets_.online = QNetwork::init(temporal_count + spatial_count, config.hidden, rng_);
  nets_.sync();
  adam_.lr = config.lr;
  epsilon_.start = config.eps_start;
  epsilon_.decay = config.eps_decay;
  epsilon_.min = config.eps_min;
}

MaskState Agent::act(const Eigen::VectorXd& state) {
  if (pending_ && !awaiting_reward_) {
    pending_->next_state = state;
    buffer_.push(std::move(*pending_));
    pending_.reset();
  }
  const int a = select_action(state, nets_.online, epsilon_.value(), rng_);
  epsilon_.advance();
  counter_.record(a);
  pending_ = Transition{state, a, 0.0, Eigen::VectorXd(), 1.0};
  awaiting_reward_ = true;
  return apply_mask(a, temporal_, spatial_);
}

void Agent::reward(double r) {
  if (!pending_ || !awaiting_reward_) throw std::logic_error("Agent::reward without a preceding act()");
  pending_->reward = r;
  last_reward_ = r;
  awaiting_reward_ = false;
}

std::optional<QUpdate> Agent::learn(double progress) {
  if (buffer_.size() == 0 || buffer_.size() < config_.warmup) return std::nullopt;
  progress = std::clamp(progress, 0.0, 1.0);
  const double beta = config_.beta_start + (config_.beta_end - config_.beta_start) * progress;
  const auto sample = buffer_.sample(config_.batch_size, beta, rng_);
  std::vector<const Transition*> batch;
  for (std::size_t i : sample.indices) batch.push_back(&buffer_.at(i));
  QUpdate up = train_q(batch, sample.weights, config_.gamma, nets_, adam_);
  for (std::size_t k = 0; k < sample.indices.size(); ++k) {
    buffer_.update_priority(sample.indices[k], std::abs(up.td_errors[k]) + 1e-6);
  }
  ++learn_steps_;
  if (learn_steps_ % config_.target_sync == 0) nets_.sync();
  return up;
}

}  // namespace evacnet::rl
