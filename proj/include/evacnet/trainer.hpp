#pragma once

// Joint training of the forecaster and the feature-masking agent, model
// variants for ablations and baselines, evaluation and checkpoints.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "evacnet/data.hpp"
#include "evacnet/dmf.hpp"
#include "evacnet/graph.hpp"
#include "evacnet/metrics.hpp"
#include "evacnet/rlagent.hpp"

namespace evacnet::trainer {

enum class Variant { rl_dmf, dmf_no_rl, rl_dgl_distance, rl_dgl_traveltime, lstm_only, static_gcn_lstm };

std::string to_string(Variant v);
/// Throws UserError listing the valid names.
Variant parse_variant(const std::string& s);
bool uses_agent(Variant v);
dmf::GraphMode graph_mode(Variant v);

/// The four variants compared by ablate(), in output order.
inline constexpr Variant kAblationVariants[] = {Variant::rl_dgl_distance, Variant::rl_dgl_traveltime,
                                                Variant::dmf_no_rl, Variant::rl_dmf};

struct TrainConfig {
  Variant variant = Variant::rl_dmf;
  int epochs = 200;
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 42;
  int input_length = 6;  // l
  int horizon = 6;       // p
  int hidden = 64;       // H
  double train_frac = 0.9;
  int max_train_windows = 0;  // 0: all
  int patience = 50;          // early-stopping patience in epochs, 0 disables
  int eval_every = 1;         // validation cadence in epochs
  /// Keep the agent out of the loop and train with every feature active.
  bool force_full_mask = false;
  graph::GraphOptions graph;
  rl::AgentConfig agent;
  std::string data_dir;
  std::string out_dir;

  /// Throws UserError on invalid values.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// FNV-1a over the canonical JSON of the config without its paths.
std::uint64_t config_hash(const TrainConfig& c);

struct Dataset {
  data::FeatureTable table;
  data::Split split;
  data::GraphSeries graphs;
  std::vector<data::WindowSample> train;
  std::vector<data::WindowSample> val;
};

/// Splits, fits the normalizer on training hours, builds graphs for the
/// config's variant and carves chronological train / validation windows.
Dataset prepare(data::FeatureTable table, const TrainConfig& config);
/// Same, but normalizes with an existing normalizer (evaluation).
Dataset prepare(data::FeatureTable table, const TrainConfig& config, const data::Normalizer& normalizer);

struct Model {
  TrainConfig config;
  data::FeatureRegistry registry;
  std::vector<std::string> detector_ids;
  data::Normalizer normalizer;
  dmf::DmfParameters params;
  /// Masking counts, present for agent variants.
  std::optional<std::vector<std::int64_t>> mask_counts;

  dmf::DmfConfig dmf_config() const;
};

struct MetricTable {
  std::vector<metrics::MetricReport> per_horizon;
  metrics::MetricReport overall;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;  // mean normalized MSE over the epoch's batches
  std::optional<MetricTable> val;
  double epsilon = 0.0;
  double mean_reward = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> epochs;
  std::optional<std::vector<rl::RankingEntry>> ranking;
  std::optional<rl::QNetworks> agent;
};

/// Called after each epoch; returning false stops training.
using EpochCallback = std::function<bool(const EpochLog&, const Model&)>;

TrainResult train(const TrainConfig& config, const Dataset& dataset, const EpochCallback& on_epoch = {});

/// Denormalized predictions, rows stacked window by window.
Eigen::MatrixXd predict_flows(const Model& model, std::span<const data::WindowSample> windows);

/// Per-horizon and pooled metrics on denormalized flows with every feature active.
MetricTable evaluate(const Model& model, std::span<const data::WindowSample> windows);

/// Throws UserError when the registries differ, printing both.
void check_registry(const data::FeatureRegistry& expected, const data::FeatureRegistry& actual);

void write_metric_csv(std::ostream& os, const MetricTable& table);
void write_epoch_csv(std::ostream& os, const std::vector<EpochLog>& epochs, int horizon);
/// Human-readable table mirroring the CSV.
void print_metric_table(std::ostream& os, const MetricTable& table);

struct AblationEntry {
  Variant variant = Variant::rl_dmf;
  std::optional<MetricTable> metrics;
  std::string error;  // non-empty when the variant failed
};

/// Trains the four ablation variants on the same data and seed. A failing
/// variant is reported and the others still run.
std::vector<AblationEntry> ablate(const TrainConfig& base, const data::FeatureTable& table);
void write_ablation_csv(std::ostream& os, const std::vector<AblationEntry>& entries, int horizon);

// Checkpoints -------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

void save_agent(const std::filesystem::path& path, const rl::QNetworks& nets, const rl::MaskCounter& counter);
rl::QNetworks load_agent(const std::filesystem::path& path);

}  // namespace evacnet::trainer
