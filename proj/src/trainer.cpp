#include "evacnet/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "evacnet/error.hpp"
#include "evacnet/numcore/adam.hpp"

namespace evacnet::trainer {

namespace nc = numcore;

namespace {

struct VariantName {
  Variant v;
  const char* name;
};
constexpr VariantName kVariantNames[] = {{Variant::rl_dmf, "rl_dmf"},
                                         {Variant::dmf_no_rl, "dmf_no_rl"},
                                         {Variant::rl_dgl_distance, "rl_dgl_distance"},
                                         {Variant::rl_dgl_traveltime, "rl_dgl_traveltime"},
                                         {Variant::lstm_only, "lstm_only"},
                                         {Variant::static_gcn_lstm, "static_gcn_lstm"}};

std::string num(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : "undefined"; }

}  // namespace

std::string to_string(Variant v) {
  for (const auto& n : kVariantNames) {
    if (n.v == v) return n.name;
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (const auto& n : kVariantNames) {
    if (s == n.name) return n.v;
  }
  std::string all;
  for (const auto& n : kVariantNames) all += (all.empty() ? "" : ", ") + std::string(n.name);
  throw UserError("unknown variant '" + s + "' (expected one of " + all + ")");
}

bool uses_agent(Variant v) {
  return v == Variant::rl_dmf || v == Variant::rl_dgl_distance || v == Variant::rl_dgl_traveltime;
}

dmf::GraphMode graph_mode(Variant v) {
  switch (v) {
    case Variant::rl_dmf:
    case Variant::dmf_no_rl: return dmf::GraphMode::fused;
    case Variant::rl_dgl_distance:
    case Variant::static_gcn_lstm: return dmf::GraphMode::distance;
    case Variant::rl_dgl_traveltime: return dmf::GraphMode::travel_time;
    case Variant::lstm_only: return dmf::GraphMode::identity;
  }
  return dmf::GraphMode::fused;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw UserError("config: " + m); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0)) fail("lr must be positive");
  if (input_length < 1 || horizon < 1) fail("input_length and horizon must be >= 1");
  if (hidden < 1) fail("hidden must be >= 1");
  if (!(train_frac > 0 && train_frac < 1)) fail("train_frac must lie in (0, 1)");
  if (max_train_windows < 0 || patience < 0 || eval_every < 1) fail("invalid window/patience/eval settings");
  if (!(agent.gamma >= 0 && agent.gamma <= 1)) fail("agent.gamma must lie in [0, 1]");
  if (agent.buffer_capacity < 1 || agent.batch_size < 1 || agent.target_sync < 1) fail("invalid agent sizes");
  if (!(graph.weight_floor >= 0 && graph.weight_floor < 1)) fail("graph.weight_floor must lie in [0, 1)");
  if (!(graph.speed_floor > 0)) fail("graph.speed_floor must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"variant", to_string(c.variant)},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"seed", c.seed},
       {"input_length", c.input_length},
       {"horizon", c.horizon},
       {"hidden", c.hidden},
       {"train_frac", c.train_frac},
       {"max_train_windows", c.max_train_windows},
       {"patience", c.patience},
       {"eval_every", c.eval_every},
       {"force_full_mask", c.force_full_mask},
       {"graph",
        {{"weight_floor", c.graph.weight_floor},
         {"speed_floor", c.graph.speed_floor},
         {"invert_weights", c.graph.invert_weights}}},
       {"agent",
        {{"gamma", c.agent.gamma},
         {"buffer_capacity", c.agent.buffer_capacity},
         {"batch_size", c.agent.batch_size},
         {"target_sync", c.agent.target_sync},
         {"alpha", c.agent.alpha},
         {"beta_start", c.agent.beta_start},
         {"beta_end", c.agent.beta_end},
         {"lr", c.agent.lr},
         {"hidden", c.agent.hidden},
         {"warmup", c.agent.warmup},
         {"eps_start", c.agent.eps_start},
         {"eps_decay", c.agent.eps_decay},
         {"eps_min", c.agent.eps_min}}},
       {"data_dir", c.data_dir},
       {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
    if (obj.contains(key)) obj.at(key).get_to(field);
  };
  static const char* known[] = {"variant", "epochs", "batch_size", "lr", "seed", "input_length", "horizon",
                                "hidden", "train_frac", "max_train_windows", "patience", "eval_every",
                                "force_full_mask", "graph", "agent", "data_dir", "out_dir"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw UserError("config: unknown field '" + key + "'");
    }
  }
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  get(j, "epochs", c.epochs);
  get(j, "batch_size", c.batch_size);
  get(j, "lr", c.lr);
  get(j, "seed", c.seed);
  get(j, "input_length", c.input_length);
  get(j, "horizon", c.horizon);
  get(j, "hidden", c.hidden);
  get(j, "train_frac", c.train_frac);
  get(j, "max_train_windows", c.max_train_windows);
  get(j, "patience", c.patience);
  get(j, "eval_every", c.eval_every);
  get(j, "force_full_mask", c.force_full_mask);
  if (j.contains("graph")) {
    const auto& g = j.at("graph");
    get(g, "weight_floor", c.graph.weight_floor);
    get(g, "speed_floor", c.graph.speed_floor);
    get(g, "invert_weights", c.graph.invert_weights);
  }
  if (j.contains("agent")) {
    const auto& a = j.at("agent");
    get(a, "gamma", c.agent.gamma);
    get(a, "buffer_capacity", c.agent.buffer_capacity);
    get(a, "batch_size", c.agent.batch_size);
    get(a, "target_sync", c.agent.target_sync);
    get(a, "alpha", c.agent.alpha);
    get(a, "beta_start", c.agent.beta_start);
    get(a, "beta_end", c.agent.beta_end);
    get(a, "lr", c.agent.lr);
    get(a, "hidden", c.agent.hidden);
    get(a, "warmup", c.agent.warmup);
    get(a, "eps_start", c.agent.eps_start);
    get(a, "eps_decay", c.agent.eps_decay);
    get(a, "eps_min", c.agent.eps_min);
  }
  get(j, "data_dir", c.data_dir);
  get(j, "out_dir", c.out_dir);
}

std::uint64_t config_hash(const TrainConfig& c) {
  nlohmann::json j = c;
  j.erase("data_dir");
  j.erase("out_dir");
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------

namespace {

Dataset prepare_impl(data::FeatureTable table, const TrainConfig& config, const data::Normalizer* normalizer) {
  config.validate();
  Dataset ds;
  if (normalizer) {
    ds.split.train_hours = static_cast<int>(std::floor(static_cast<double>(table.hours) * config.train_frac + 1e-9));
    ds.split.val_hours = table.hours - ds.split.train_hours;
    if (ds.split.train_hours <= 0 || ds.split.val_hours <= 0) throw UserError("chronological split leaves an empty partition");
    ds.split.normalizer = *normalizer;
  } else {
    ds.split = data::split_and_fit(table, config.train_frac);
  }
  ds.graphs = config.variant == Variant::static_gcn_lstm ? data::build_static_graphs(table, config.graph)
                                                         : data::build_dynamic_graphs(table, config.graph);
  data::WindowOptions wo;
  wo.input_length = config.input_length;
  wo.horizon = config.horizon;
  if (ds.split.train_hours >= config.input_length + config.horizon) {
    wo.end_hour = ds.split.train_hours;
    ds.train = data::make_windows(table, ds.split.normalizer, ds.graphs, wo);
    if (config.max_train_windows > 0 && static_cast<int>(ds.train.size()) > config.max_train_windows) {
      ds.train.resize(static_cast<std::size_t>(config.max_train_windows));
    }
  }
  wo.end_hour = -1;
  wo.first_target_hour = ds.split.train_hours;
  ds.val = data::make_windows(table, ds.split.normalizer, ds.graphs, wo);
  ds.table = std::move(table);
  return ds;
}

}  // namespace

Dataset prepare(data::FeatureTable table, const TrainConfig& config) {
  return prepare_impl(std::move(table), config, nullptr);
}

Dataset prepare(data::FeatureTable table, const TrainConfig& config, const data::Normalizer& normalizer) {
  return prepare_impl(std::move(table), config, &normalizer);
}

dmf::DmfConfig Model::dmf_config() const {
  dmf::DmfConfig c;
  c.temporal_features = registry.temporal;
  c.spatial_features = registry.spatial;
  c.hidden = config.hidden;
  c.horizon = config.horizon;
  c.mode = graph_mode(config.variant);
  return c;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd predict_flows(const Model& model, std::span<const data::WindowSample> windows) {
  const dmf::DmfConfig dc = model.dmf_config();
  const MaskState none = MaskState::none(dc.temporal_features, dc.spatial_features);
  Eigen::Index total = 0;
  for (const auto& w : windows) total += w.node_count();
  Eigen::MatrixXd out(total, dc.horizon);
  Eigen::Index row = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t begin = 0; begin < windows.size(); begin += kChunk) {
    const std::size_t end = std::min(windows.size(), begin + kChunk);
    std::vector<const data::WindowSample*> chunk;
    for (std::size_t k = begin; k < end; ++k) chunk.push_back(&windows[k]);
    nc::Tape tape;
    const auto vars = dmf::DmfVars::bind(tape, model.params, false);
    const Eigen::MatrixXd z = dmf::forward(tape, vars, chunk, none, dc).value();
    Eigen::Index r = 0;
    for (const auto* w : chunk) {
      for (int n = 0; n < w->node_count(); ++n, ++r, ++row) {
        for (int k = 0; k < dc.horizon; ++k) {
          out(row, k) = model.normalizer.inverse_target(w->nodes[static_cast<std::size_t>(n)], z(r, k));
        }
      }
    }
  }
  return out;
}

MetricTable evaluate(const Model& model, std::span<const data::WindowSample> windows) {
  if (windows.empty()) throw UserError("evaluate: no windows to score");
  const Eigen::MatrixXd pred = predict_flows(model, windows);
  Eigen::MatrixXd actual(pred.rows(), pred.cols());
  Eigen::Index row = 0;
  for (const auto& w : windows) {
    actual.middleRows(row, w.node_count()) = w.target_flow;
    row += w.node_count();
  }
  MetricTable t;
  for (Eigen::Index k = 0; k < pred.cols(); ++k) {
    const Eigen::VectorXd a = actual.col(k), p = pred.col(k);
    t.per_horizon.push_back(metrics::compute<double>(std::span(a.data(), static_cast<std::size_t>(a.size())),
                                                     std::span(p.data(), static_cast<std::size_t>(p.size()))));
  }
  t.overall = metrics::compute<double>(std::span(actual.data(), static_cast<std::size_t>(actual.size())),
                                       std::span(pred.data(), static_cast<std::size_t>(pred.size())));
  return t;
}

void check_registry(const data::FeatureRegistry& expected, const data::FeatureRegistry& actual) {
  if (expected == actual) return;
  auto dump = [](const data::FeatureRegistry& r) {
    std::string s = "[temporal=" + std::to_string(r.temporal) + ", spatial=" + std::to_string(r.spatial) + "] ";
    for (std::size_t k = 0; k < r.names.size(); ++k) s += (k ? "," : "") + r.names[k];
    return s;
  };
  throw UserError("feature registry mismatch\n  checkpoint: " + dump(expected) + "\n  dataset:    " + dump(actual));
}

// ---------------------------------------------------------------------------

TrainResult train(const TrainConfig& config, const Dataset& dataset, const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.train.empty()) throw UserError("train: no training windows (is the data long enough?)");

  TrainResult result;
  Model& model = result.model;
  model.config = config;
  model.registry = dataset.table.registry;
  for (const auto& d : dataset.table.detectors) model.detector_ids.push_back(d.id);
  model.normalizer = dataset.split.normalizer;
  const dmf::DmfConfig dc = model.dmf_config();

  // Independent streams: agent randomness never perturbs init or batching.
  Rng init_rng(config.seed);
  Rng batch_rng(config.seed ^ 0x5DEECE66DULL);
  model.params = dmf::DmfParameters::init(dc, init_rng);

  std::optional<rl::Agent> agent;
  if (uses_agent(config.variant) && !config.force_full_mask) {
    agent.emplace(dc.temporal_features, dc.spatial_features, config.agent, config.seed ^ 0x9E3779B97F4A7C15ULL);
  }

  nc::AdamState adam;
  adam.lr = config.lr;
  auto param_ptrs = model.params.tensors();

  std::vector<std::size_t> order(dataset.train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (order.size() + batch - 1) / batch;
  const double total_steps = static_cast<double>(steps_per_epoch) * config.epochs;
  const MaskState none = MaskState::none(dc.temporal_features, dc.spatial_features);

  double best_rmse = std::numeric_limits<double>::infinity();
  dmf::DmfParameters best_params = model.params;
  int since_best = 0;
  std::int64_t step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    batch_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0, reward_sum = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      std::vector<const data::WindowSample*> ptrs;
      for (std::size_t k = begin; k < std::min(order.size(), begin + batch); ++k) ptrs.push_back(&dataset.train[order[k]]);

      MaskState mask = none;
      if (agent) mask = agent->act(rl::build_state(ptrs));

      nc::Tape tape;
      const auto vars = dmf::DmfVars::bind(tape, model.params, true);
      nc::Var pred = dmf::forward(tape, vars, ptrs, mask, dc);
      nc::Var loss = nc::mse(pred, dmf::stack_targets(ptrs));
      const double loss_value = loss.value()(0, 0);
      if (!std::isfinite(loss_value)) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                           " (loss " + num(loss_value) + "); try a smaller lr");
      }
      tape.backward(loss);
      std::vector<nc::Matrix> grads;
      grads.reserve(vars.v.size());
      for (const auto& v : vars.v) grads.push_back(tape.grad(v));
      nc::adam_step<double>(param_ptrs, grads, adam);

      if (agent) {
        const double r = rl::compute_reward(loss_value);
        agent->reward(r);
        reward_sum += r;
        agent->learn(static_cast<double>(step) / total_steps);
      }
      loss_sum += loss_value;
      ++batches;
      ++step;
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(batches);
    log.epsilon = agent ? agent->epsilon().value() : 0.0;
    log.mean_reward = agent ? reward_sum / static_cast<double>(batches) : 0.0;
    const bool eval_now = !dataset.val.empty() && (epoch % config.eval_every == 0 || epoch == config.epochs);
    if (eval_now) log.val = evaluate(model, dataset.val);
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::debug("[{}] epoch {} loss {:.6f} val_rmse {} eps {:.4f}", to_string(config.variant), epoch,
                  log.train_loss, log.val ? num(log.val->overall.rmse) : std::string("-"), log.epsilon);
    result.epochs.push_back(log);

    bool stop = false;
    if (config.patience > 0 && log.val) {
      if (log.val->overall.rmse < best_rmse) {
        best_rmse = log.val->overall.rmse;
        best_params = model.params;
        since_best = 0;
      } else {
        since_best += config.eval_every;
        if (since_best >= config.patience) stop = true;
      }
    }
    if (on_epoch && !on_epoch(log, model)) stop = true;
    if (stop) break;
  }
  if (config.patience > 0 && std::isfinite(best_rmse)) model.params = best_params;

  if (agent) {
    model.mask_counts = agent->counter().counts();
    result.ranking = rl::ranking_report(agent->counter(), model.registry.names);
    result.agent = agent->networks();
  }
  return result;
}

// ---------------------------------------------------------------------------

void write_metric_csv(std::ostream& os, const MetricTable& t) {
  os << "horizon,RMSE,MAE,MAPE,R2\n";
  auto row = [&os](const std::string& h, const metrics::MetricReport& m) {
    os << h << ',' << num(m.rmse) << ',' << num(m.mae) << ',' << num(m.mape) << ',' << num(m.r2) << '\n';
  };
  for (std::size_t k = 0; k < t.per_horizon.size(); ++k) row(std::to_string(k + 1), t.per_horizon[k]);
  row("overall", t.overall);
}

void print_metric_table(std::ostream& os, const MetricTable& t) {
  auto cell = [](const std::optional<double>& v, int prec) {
    std::ostringstream s;
    if (v) s << std::fixed << std::setprecision(prec) << *v;
    else s << "undefined";
    return s.str();
  };
  os << std::left << std::setw(9) << "horizon" << std::right << std::setw(12) << "RMSE" << std::setw(12) << "MAE"
     << std::setw(10) << "MAPE(%)" << std::setw(10) << "R2" << '\n';
  auto row = [&](const std::string& h, const metrics::MetricReport& m) {
    os << std::left << std::setw(9) << h << std::right << std::setw(12) << cell(m.rmse, 2) << std::setw(12)
       << cell(m.mae, 2) << std::setw(10) << cell(m.mape, 2) << std::setw(10) << cell(m.r2, 2) << '\n';
  };
  for (std::size_t k = 0; k < t.per_horizon.size(); ++k) row(std::to_string(k + 1) + "-hour", t.per_horizon[k]);
  row("overall", t.overall);
}

void write_epoch_csv(std::ostream& os, const std::vector<EpochLog>& epochs, int horizon) {
  os << "epoch,train_loss,val_rmse,val_mae,val_mape,val_r2";
  for (int k = 1; k <= horizon; ++k) os << ",val_rmse_h" << k;
  os << ",epsilon,mean_reward\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << num(e.train_loss);
    if (e.val) {
      os << ',' << num(e.val->overall.rmse) << ',' << num(e.val->overall.mae) << ',' << num(e.val->overall.mape)
         << ',' << num(e.val->overall.r2);
      for (const auto& h : e.val->per_horizon) os << ',' << num(h.rmse);
    } else {
      os << ",,,,";
      for (int k = 0; k < horizon; ++k) os << ',';
    }
    os << ',' << num(e.epsilon) << ',' << num(e.mean_reward) << '\n';
  }
}

std::vector<AblationEntry> ablate(const TrainConfig& base, const data::FeatureTable& table) {
  std::vector<AblationEntry> out;
  for (Variant v : kAblationVariants) {
    AblationEntry e;
    e.variant = v;
    try {
      TrainConfig cfg = base;
      cfg.variant = v;
      const Dataset ds = prepare(table, cfg);
      const TrainResult r = train(cfg, ds);
      e.metrics = evaluate(r.model, ds.val);
    } catch (const std::exception& ex) {
      e.error = ex.what();
      spdlog::error("ablation variant {} failed: {}", to_string(v), ex.what());
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationEntry>& entries, int horizon) {
  os << "variant,horizon,RMSE,MAE,MAPE,R2\n";
  for (const auto& e : entries) {
    const std::string name = to_string(e.variant);
    if (!e.metrics) {
      for (int k = 1; k <= horizon; ++k) os << name << ',' << k << ",failed,failed,failed,failed\n";
      os << name << ",overall,failed,failed,failed,failed\n";
      continue;
    }
    auto row = [&](const std::string& h, const metrics::MetricReport& m) {
      os << name << ',' << h << ',' << num(m.rmse) << ',' << num(m.mae) << ',' << num(m.mape) << ',' << num(m.r2)
         << '\n';
    };
    for (std::size_t k = 0; k < e.metrics->per_horizon.size(); ++k) row(std::to_string(k + 1), e.metrics->per_horizon[k]);
    row("overall", e.metrics->overall);
  }
}

}  // namespace evacnet::trainer
