#include "evacnet/dmf.hpp"

#include <cmath>
#include <stdexcept>

#include "evacnet/error.hpp"

namespace evacnet::dmf {

namespace nc = numcore;

namespace {

enum Slot : std::size_t {
  kGcnD, kGcnTt, kAttD, kAttTt,
  kWf, kWi, kWc, kWo,
  kUf, kUi, kUc, kUo,
  kBf, kBi, kBc, kBo,
  kOutW, kOutB,
  kSlotCount
};

Matrix uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(-bound, bound);
  }
  return m;
}

// Gate weights laid out for row-major node stacks: [W_fᵀ W_iᵀ W_cᵀ W_oᵀ].
struct GateWeights {
  Var w;  // H x 4H
  Var u;  // H x 4H
  Var b;  // 1 x 4H
};

GateWeights gate_weights(const DmfVars& p) {
  auto cat4 = [](Var a, Var b, Var c, Var d) {
    return nc::concat_cols(nc::concat_cols(nc::concat_cols(nc::transpose(a), nc::transpose(b)), nc::transpose(c)),
                           nc::transpose(d));
  };
  return {cat4(p[kWf], p[kWi], p[kWc], p[kWo]), cat4(p[kUf], p[kUi], p[kUc], p[kUo]),
          cat4(p[kBf], p[kBi], p[kBc], p[kBo])};
}

LstmState lstm_step_with(Var input, const LstmState& prev, const GateWeights& gw) {
  const Eigen::Index H = gw.w.rows();
  Var pre = nc::add_rowwise(nc::matmul(input, gw.w) + nc::matmul(prev.h, gw.u), gw.b);
  Var f = nc::sigmoid(nc::slice_cols(pre, 0, H));
  Var i = nc::sigmoid(nc::slice_cols(pre, H, H));
  Var g = nc::tanh(nc::slice_cols(pre, 2 * H, H));
  Var o = nc::sigmoid(nc::slice_cols(pre, 3 * H, H));
  Var c = nc::cwise_product(f, prev.c) + nc::cwise_product(i, g);
  Var h = nc::cwise_product(o, nc::tanh(c));
  return {h, c};
}

}  // namespace

std::size_t parameter_count(int input_features, int hidden, int horizon) {
  const auto F = static_cast<std::size_t>(input_features);
  const auto H = static_cast<std::size_t>(hidden);
  const auto p = static_cast<std::size_t>(horizon);
  return 2 * F * H + 2 * H + 8 * H * H + 4 * H + p * H + p;
}

DmfParameters DmfParameters::init(const DmfConfig& config, Rng& rng) {
  const int F = config.input_features();
  const int H = config.hidden;
  const int p = config.horizon;
  if (F < 1 || H < 1 || p < 1) throw std::invalid_argument("DmfParameters::init: dimensions must be positive");
  DmfParameters m;
  m.gcn_distance = uniform(F, H, F, rng);
  m.gcn_travel_time = uniform(F, H, F, rng);
  m.att_distance = uniform(H, 1, H, rng);
  m.att_travel_time = uniform(H, 1, H, rng);
  for (Matrix* w : {&m.w_f, &m.w_i, &m.w_c, &m.w_o, &m.u_f, &m.u_i, &m.u_c, &m.u_o}) *w = uniform(H, H, H, rng);
  for (Matrix* b : {&m.b_f, &m.b_i, &m.b_c, &m.b_o}) *b = uniform(H, 1, H, rng);
  m.out_weight = uniform(p, H, H, rng);
  m.out_bias = uniform(p, 1, H, rng);
  return m;
}

const std::vector<std::string>& DmfParameters::names() {
  static const std::vector<std::string> n{
      "gcn_distance", "gcn_travel_time", "att_distance", "att_travel_time", "lstm_w_f", "lstm_w_i",
      "lstm_w_c",     "lstm_w_o",        "lstm_u_f",     "lstm_u_i",        "lstm_u_c", "lstm_u_o",
      "lstm_b_f",     "lstm_b_i",        "lstm_b_c",     "lstm_b_o",        "out_weight", "out_bias"};
  return n;
}

std::vector<Matrix*> DmfParameters::tensors() {
  return {&gcn_distance, &gcn_travel_time, &att_distance, &att_travel_time, &w_f, &w_i, &w_c, &w_o, &u_f,
          &u_i,          &u_c,             &u_o,          &b_f,             &b_i, &b_c, &b_o, &out_weight, &out_bias};
}

std::vector<const Matrix*> DmfParameters::tensors() const {
  auto* self = const_cast<DmfParameters*>(this);
  std::vector<const Matrix*> out;
  for (Matrix* m : self->tensors()) out.push_back(m);
  return out;
}

std::size_t DmfParameters::count() const {
  std::size_t n = 0;
  for (const Matrix* m : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

DmfVars DmfVars::bind(Tape& tape, const DmfParameters& params, bool trainable) {
  DmfVars out;
  for (const Matrix* m : params.tensors()) out.v.push_back(trainable ? tape.variable(*m) : tape.constant(*m));
  return out;
}

Matrix concat_node_features(const Matrix& temporal, const Matrix& spatial) {
  if (temporal.rows() != spatial.rows()) throw ShapeError("concat_node_features: node counts differ");
  Matrix h(temporal.rows(), temporal.cols() + spatial.cols());
  h << temporal, spatial;
  return h;
}

Var gcn_layer(const Matrix& norm_adjacency, const Matrix& node_features, Var weight) {
  if (norm_adjacency.rows() != norm_adjacency.cols() || norm_adjacency.cols() != node_features.rows()) {
    throw ShapeError("gcn_layer: adjacency does not match node count");
  }
  Var propagated = weight.tape->constant(norm_adjacency * node_features);
  return nc::relu(nc::matmul(propagated, weight));
}

Fusion attention_fuse(Var z_distance, Var z_travel_time, Var w_distance, Var w_travel_time) {
  nc::detail::require_same_shape(z_distance, z_travel_time, "attention_fuse");
  Var logits = nc::concat_cols(nc::matmul(z_distance, w_distance), nc::matmul(z_travel_time, w_travel_time));
  Var alpha = nc::softmax(logits, 1);
  Var fused = nc::scale_rows(z_distance, nc::slice_cols(alpha, 0, 1)) +
              nc::scale_rows(z_travel_time, nc::slice_cols(alpha, 1, 1));
  return {fused, alpha};
}

LstmState lstm_step(Var input, const LstmState& prev, const DmfVars& params) {
  return lstm_step_with(input, prev, gate_weights(params));
}

Var predict_head(Var hidden, const DmfVars& params) {
  return nc::add_rowwise(nc::matmul(hidden, nc::transpose(params[kOutW])), nc::transpose(params[kOutB]));
}

void apply_mask(const MaskState& mask, Matrix& temporal, Matrix& spatial) {
  if (mask.temporal.size() != temporal.cols() || mask.spatial.size() != spatial.cols()) {
    throw ShapeError("mask width does not match the feature registry");
  }
  // Assign exact zeros (not x * 0, which yields -0 for negative x).
  for (Eigen::Index f = 0; f < temporal.cols(); ++f) {
    if (mask.temporal[f] == 0.0) temporal.col(f).setZero();
    else if (mask.temporal[f] != 1.0) temporal.col(f) *= mask.temporal[f];
  }
  for (Eigen::Index f = 0; f < spatial.cols(); ++f) {
    if (mask.spatial[f] == 0.0) spatial.col(f).setZero();
    else if (mask.spatial[f] != 1.0) spatial.col(f) *= mask.spatial[f];
  }
}

Var forward(Tape& tape, const DmfVars& params, std::span<const data::WindowSample* const> windows,
            const MaskState& mask, const DmfConfig& config, FusionTrace* trace) {
  if (windows.empty()) throw std::invalid_argument("forward: empty batch");
  const int l = windows.front()->input_length();
  Eigen::Index total = 0;
  for (const auto* w : windows) {
    if (w->input_length() != l) throw ShapeError("forward: windows disagree on input length");
    if (w->node_count() == 0) throw std::invalid_argument("forward: window has no predicted nodes");
    total += w->node_count();
  }
  const int F = config.input_features();
  const int H = config.hidden;

  const bool use_d = config.mode == GraphMode::fused || config.mode == GraphMode::distance ||
                     config.mode == GraphMode::identity;
  const bool use_tt = config.mode == GraphMode::fused || config.mode == GraphMode::travel_time;

  const GateWeights gw = gate_weights(params);
  LstmState state{tape.constant(Matrix::Zero(total, H)), tape.constant(Matrix::Zero(total, H))};

  Matrix prop_d(total, F), prop_tt(total, F);
  for (int s = 0; s < l; ++s) {
    Eigen::Index row = 0;
    for (const auto* w : windows) {
      const data::StepInput& step = w->steps[static_cast<std::size_t>(s)];
      Matrix temporal = step.temporal;
      Matrix spatial = step.spatial;
      apply_mask(mask, temporal, spatial);
      const Matrix x = concat_node_features(temporal, spatial);
      if (x.cols() != F) throw ShapeError("forward: feature width differs from model configuration");
      // Only the predicted rows of Ã X are needed downstream.
      for (Eigen::Index r : step.window_rows) {
        if (config.mode == GraphMode::identity) {
          prop_d.row(row) = x.row(r);
        } else {
          if (use_d) prop_d.row(row).noalias() = step.graph->norm_distance.row(r) * x;
          if (use_tt) prop_tt.row(row).noalias() = step.graph->norm_travel_time.row(r) * x;
        }
        ++row;
      }
    }

    Var fused;
    Matrix alpha;
    if (config.mode == GraphMode::fused) {
      Var zd = nc::relu(nc::matmul(tape.constant(prop_d), params[kGcnD]));
      Var ztt = nc::relu(nc::matmul(tape.constant(prop_tt), params[kGcnTt]));
      Fusion fu = attention_fuse(zd, ztt, params[kAttD], params[kAttTt]);
      fused = fu.fused;
      if (trace) {
        trace->alpha.push_back(fu.alpha.value());
        trace->z_distance.push_back(zd.value());
        trace->z_travel_time.push_back(ztt.value());
      }
    } else if (use_tt) {
      fused = nc::relu(nc::matmul(tape.constant(prop_tt), params[kGcnTt]));
      if (trace) {
        trace->alpha.push_back((Matrix(total, 2) << Matrix::Zero(total, 1), Matrix::Ones(total, 1)).finished());
        trace->z_travel_time.push_back(fused.value());
      }
    } else {
      fused = nc::relu(nc::matmul(tape.constant(prop_d), params[kGcnD]));
      if (trace) {
        trace->alpha.push_back((Matrix(total, 2) << Matrix::Ones(total, 1), Matrix::Zero(total, 1)).finished());
        trace->z_distance.push_back(fused.value());
      }
    }
    if (trace) trace->z_fused.push_back(fused.value());
    state = lstm_step_with(fused, state, gw);
  }
  return predict_head(state.h, params);
}

Matrix stack_targets(std::span<const data::WindowSample* const> windows) {
  Eigen::Index total = 0;
  for (const auto* w : windows) total += w->node_count();
  const Eigen::Index p = windows.empty() ? 0 : windows.front()->horizon();
  Matrix y(total, p);
  Eigen::Index row = 0;
  for (const auto* w : windows) {
    y.middleRows(row, w->node_count()) = w->target;
    row += w->node_count();
  }
  return y;
}

Matrix predict(const DmfParameters& params, const data::WindowSample& window, const MaskState& mask,
               const DmfConfig& config, FusionTrace* trace) {
  Tape tape;
  const DmfVars vars = DmfVars::bind(tape, params, false);
  const data::WindowSample* one[] = {&window};
  return forward(tape, vars, one, mask, config, trace).value();
}

}  // namespace evacnet::dmf
