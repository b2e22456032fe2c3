#pragma once

// Dynamic multi-graph fusion forecaster: one GCN per graph modality, per-node
// softmax attention over the two embeddings, an LSTM shared by all nodes and
// a linear multi-horizon head.

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

#include "evacnet/data.hpp"
#include "evacnet/mask.hpp"
#include "evacnet/numcore/tape.hpp"
#include "evacnet/random.hpp"

namespace evacnet::dmf {

using numcore::Matrix;
using numcore::Tape;
using numcore::Var;

/// Which graph embeddings feed the recurrence.
enum class GraphMode {
  fused,        // distance and travel-time GCNs with attention fusion
  distance,     // distance GCN only
  travel_time,  // travel-time GCN only
  identity,     // no propagation (Ã = I); the LSTM-only baseline
};

struct DmfConfig {
  int temporal_features = 0;  // F_t
  int spatial_features = 0;   // F_s
  int hidden = 64;            // H
  int horizon = 6;            // p
  GraphMode mode = GraphMode::fused;

  int input_features() const { return temporal_features + spatial_features; }
};

/// Trainable weights. Shapes follow the usual column-vector convention:
/// gcn_* are (F_t+F_s) x H, attention vectors H x 1, LSTM W_* and U_* H x H
/// acting on column vectors, biases H x 1, out_weight p x H, out_bias p x 1.
struct DmfParameters {
  Matrix gcn_distance, gcn_travel_time;
  Matrix att_distance, att_travel_time;
  Matrix w_f, w_i, w_c, w_o;
  Matrix u_f, u_i, u_c, u_o;
  Matrix b_f, b_i, b_c, b_o;
  Matrix out_weight, out_bias;

  /// Uniform in ±1/sqrt(fan_in).
  static DmfParameters init(const DmfConfig& config, Rng& rng);

  static const std::vector<std::string>& names();
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;
  std::size_t count() const;
};

/// Expected parameter count: 2(F)H + 2H + 8H² + 4H + pH + p.
std::size_t parameter_count(int input_features, int hidden, int horizon);

/// Parameters bound to a tape, in DmfParameters::names() order.
struct DmfVars {
  std::vector<Var> v;

  Var operator[](std::size_t k) const { return v[k]; }
  static DmfVars bind(Tape& tape, const DmfParameters& params, bool trainable = true);
};

struct FusionTrace {
  /// Per step: predicted nodes x 2 attention weights (distance, travel time).
  std::vector<Matrix> alpha;
  std::vector<Matrix> z_distance;
  std::vector<Matrix> z_travel_time;
  std::vector<Matrix> z_fused;
};

/// H_t = temporal || spatial, temporal columns first.
Matrix concat_node_features(const Matrix& temporal, const Matrix& spatial);

/// Z = ReLU(Ã H W).
Var gcn_layer(const Matrix& norm_adjacency, const Matrix& node_features, Var weight);

struct Fusion {
  Var fused;  // N x H
  Var alpha;  // N x 2
};

/// Per-node softmax over (Z_d·w_d, Z_tt·w_tt) and the convex combination of
/// the two embeddings.
Fusion attention_fuse(Var z_distance, Var z_travel_time, Var w_distance, Var w_travel_time);

struct LstmState {
  Var h;  // rows = nodes, cols = H
  Var c;
};

/// One LSTM step for a stack of nodes (one node per row).
LstmState lstm_step(Var input, const LstmState& prev, const DmfVars& params);

/// ŷ = W_out h + b_out for each node row.
Var predict_head(Var hidden, const DmfVars& params);

/// Zeroes masked columns of a step's inputs.
void apply_mask(const MaskState& mask, Matrix& temporal, Matrix& spatial);

/// Predictions (rows: predicted nodes of every window, stacked in order;
/// columns: horizons) in normalized units.
Var forward(Tape& tape, const DmfVars& params, std::span<const data::WindowSample* const> windows,
            const MaskState& mask, const DmfConfig& config, FusionTrace* trace = nullptr);

/// Stacked normalized targets matching forward()'s row order.
Matrix stack_targets(std::span<const data::WindowSample* const> windows);

/// Tape-free inference convenience for a single window.
Matrix predict(const DmfParameters& params, const data::WindowSample& window, const MaskState& mask,
               const DmfConfig& config, FusionTrace* trace = nullptr);

}  // namespace evacnet::dmf
