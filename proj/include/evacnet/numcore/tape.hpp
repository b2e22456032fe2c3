#pragma once

// Dynamic reverse-mode differentiation over dense Eigen matrices.
//
// A BasicTape records every operation of one forward pass in creation order,
// which is already a topological order: an operation can only consume values
// that exist when it is recorded. backward() walks the records in reverse and
// visits each one exactly once. Tapes are rebuilt per forward pass because the
// node count of a traffic graph changes from window to window.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evacnet/error.hpp"

namespace evacnet::numcore {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
class BasicTape;

/// Handle to a value recorded on a tape. Cheap to copy; only valid while the
/// owning tape is alive.
template <typename Scalar>
struct BasicVar {
  BasicTape<Scalar>* tape = nullptr;
  std::uint32_t index = 0;

  const MatrixX<Scalar>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class BasicTape {
 public:
  using Matrix = MatrixX<Scalar>;
  using Var = BasicVar<Scalar>;
  using BackwardFn = std::function<void(BasicTape&, const Matrix& grad_out)>;

  explicit BasicTape(bool check_finite = false) : check_finite_(check_finite) {}

  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  /// Leaf that receives a gradient.
  Var variable(Matrix value) { return push(std::move(value), true, {}); }

  /// Leaf excluded from differentiation (detached input).
  Var constant(Matrix value) { return push(std::move(value), false, {}); }

  /// Records an operation result. `backward` receives the gradient flowing
  /// into this node and must route it to the parents through accumulate().
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward) {
    bool needs = false;
    for (const Var& p : parents) {
      if (p.tape != this) throw std::logic_error("operand belongs to a different tape");
      if (p.index >= nodes_.size()) throw std::logic_error("cyclic or dangling tape reference");
      needs = needs || nodes_[p.index].requires_grad;
    }
    if (check_finite_ && !value.allFinite()) {
      throw NumericError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
    }
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Matrix& value(Var v) const { return nodes_.at(v.index).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }

  /// Gradient of the last backward() target with respect to `v`; zero for
  /// nodes that did not participate.
  Matrix grad(Var v) const {
    const Node& n = nodes_.at(v.index);
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.index];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(Var loss) {
    if (backward_done_) throw std::logic_error("backward() called twice on the same tape");
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward() requires a scalar loss");
    backward_done_ = true;
    if (!nodes_[loss.index].requires_grad) return;
    nodes_[loss.index].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  bool check_finite() const { return check_finite_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Matrix value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(fn)});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  bool check_finite_;
  bool backward_done_ = false;
};

using Tape = BasicTape<double>;
using Var = BasicVar<double>;
using Matrix = MatrixX<double>;

namespace detail {

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename Scalar>
void require_same_shape(BasicVar<Scalar> a, BasicVar<Scalar> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                     " vs " + shape_str(b.rows(), b.cols()));
  }
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  // Split on sign so exp() never overflows.
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
BasicVar<Scalar> matmul(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree " + detail::shape_str(a.rows(), a.cols()) +
                     " x " + detail::shape_str(b.rows(), b.cols()));
  }
  auto& t = *a.tape;
  MatrixX<Scalar> out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

template <typename Scalar>
BasicVar<Scalar> operator+(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  detail::require_same_shape(a, b, "add");
  MatrixX<Scalar> out = a.value() + b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

template <typename Scalar>
BasicVar<Scalar> operator-(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  detail::require_same_shape(a, b, "sub");
  MatrixX<Scalar> out = a.value() - b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

template <typename Scalar>
BasicVar<Scalar> operator*(Scalar k, BasicVar<Scalar> a) {
  MatrixX<Scalar> out = k * a.value();
  return a.tape->record(std::move(out), {a}, [a, k](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, k * g);
  });
}

template <typename Scalar>
BasicVar<Scalar> transpose(BasicVar<Scalar> a) {
  MatrixX<Scalar> out = a.value().transpose();
  return a.tape->record(std::move(out), {a}, [a](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, g.transpose());
  });
}

/// a + row, with `row` (1 x cols) broadcast down every row of `a`.
template <typename Scalar>
BasicVar<Scalar> add_rowwise(BasicVar<Scalar> a, BasicVar<Scalar> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_rowwise: bias must be 1 x cols");
  MatrixX<Scalar> out = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(out), {a, row}, [a, row](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

/// Elementwise product.
template <typename Scalar>
BasicVar<Scalar> cwise_product(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  detail::require_same_shape(a, b, "cwise_product");
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

/// out(i, :) = a(i, :) * s(i) for a column vector s.
template <typename Scalar>
BasicVar<Scalar> scale_rows(BasicVar<Scalar> a, BasicVar<Scalar> s) {
  if (s.cols() != 1 || s.rows() != a.rows()) throw ShapeError("scale_rows: scale must be rows x 1");
  MatrixX<Scalar> out = s.value().col(0).asDiagonal() * a.value();
  return a.tape->record(std::move(out), {a, s}, [a, s](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, tp.value(s).col(0).asDiagonal() * g);
    if (tp.requires_grad(s)) tp.accumulate(s, g.cwiseProduct(tp.value(a)).rowwise().sum());
  });
}

/// Multiplies column j by the constant mask[j].
template <typename Scalar>
BasicVar<Scalar> scale_columns(BasicVar<Scalar> a, const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& mask) {
  if (mask.size() != a.cols()) throw ShapeError("scale_columns: mask width mismatch");
  MatrixX<Scalar> out = a.value() * mask.asDiagonal();
  return a.tape->record(std::move(out), {a}, [a, mask](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, g * mask.asDiagonal());
  });
}

/// Block-diagonal left multiplication by constant matrices: rows of `x` are
/// partitioned consecutively by the block sizes and each part is multiplied
/// by its block. Used to propagate a batch of independent graphs at once.
template <typename Scalar>
BasicVar<Scalar> block_left_multiply(std::vector<const MatrixX<Scalar>*> blocks, BasicVar<Scalar> x) {
  Eigen::Index total = 0;
  for (const auto* b : blocks) {
    if (b->rows() != b->cols()) throw ShapeError("block_left_multiply: blocks must be square");
    total += b->rows();
  }
  if (total != x.rows()) throw ShapeError("block_left_multiply: block sizes do not cover rows of x");
  const auto& xv = x.value();
  MatrixX<Scalar> out(xv.rows(), xv.cols());
  Eigen::Index off = 0;
  for (const auto* b : blocks) {
    out.middleRows(off, b->rows()).noalias() = (*b) * xv.middleRows(off, b->rows());
    off += b->rows();
  }
  return x.tape->record(std::move(out), {x}, [x, blocks = std::move(blocks)](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    MatrixX<Scalar> gx(g.rows(), g.cols());
    Eigen::Index o = 0;
    for (const auto* b : blocks) {
      gx.middleRows(o, b->rows()).noalias() = b->transpose() * g.middleRows(o, b->rows());
      o += b->rows();
    }
    tp.accumulate(x, gx);
  });
}

// ---------------------------------------------------------------------------
// Activations

template <typename Scalar>
BasicVar<Scalar> relu(BasicVar<Scalar> a) {
  MatrixX<Scalar> out = a.value().cwiseMax(Scalar(0));
  return a.tape->record(std::move(out), {a}, [a](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, (tp.value(a).array() > Scalar(0)).select(g, Scalar(0)));
  });
}

template <typename Scalar>
BasicVar<Scalar> sigmoid(BasicVar<Scalar> a) {
  MatrixX<Scalar> out = a.value().unaryExpr([](Scalar x) { return detail::sigmoid(x); });
  MatrixX<Scalar> y = out;
  return a.tape->record(std::move(out), {a}, [a, y = std::move(y)](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, (g.array() * y.array() * (Scalar(1) - y.array())).matrix());
  });
}

template <typename Scalar>
BasicVar<Scalar> tanh(BasicVar<Scalar> a) {
  MatrixX<Scalar> out = a.value().array().tanh().matrix();
  MatrixX<Scalar> y = out;
  return a.tape->record(std::move(out), {a}, [a, y = std::move(y)](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, (g.array() * (Scalar(1) - y.array().square())).matrix());
  });
}

/// Softmax normalized along `axis` (1: each row sums to one, 0: each column).
template <typename Scalar>
BasicVar<Scalar> softmax(BasicVar<Scalar> a, int axis = 1) {
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  MatrixX<Scalar> x = axis == 1 ? a.value() : MatrixX<Scalar>(a.value().transpose());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    x.row(i) = (x.row(i).array() - m).exp().matrix();
    x.row(i) /= x.row(i).sum();
  }
  MatrixX<Scalar> out = axis == 1 ? x : MatrixX<Scalar>(x.transpose());
  MatrixX<Scalar> y = out;
  return a.tape->record(std::move(out), {a}, [a, axis, y = std::move(y)](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    // dx = y * (g - sum(g * y)) along the normalized axis
    MatrixX<Scalar> dx;
    if (axis == 1) {
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = g.cwiseProduct(y).rowwise().sum();
      dx = y.cwiseProduct(g - dots.replicate(1, g.cols()));
    } else {
      Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dots = g.cwiseProduct(y).colwise().sum();
      dx = y.cwiseProduct(g - dots.replicate(g.rows(), 1));
    }
    tp.accumulate(a, dx);
  });
}

// ---------------------------------------------------------------------------
// Structural

template <typename Scalar>
BasicVar<Scalar> concat_cols(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row counts differ");
  MatrixX<Scalar> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index ac = a.cols();
  return a.tape->record(std::move(out), {a, b}, [a, b, ac](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, g.leftCols(ac));
    tp.accumulate(b, g.rightCols(g.cols() - ac));
  });
}

template <typename Scalar>
BasicVar<Scalar> slice_cols(BasicVar<Scalar> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: range out of bounds");
  MatrixX<Scalar> out = a.value().middleCols(start, count);
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape->record(std::move(out), {a}, [a, start, count, rows, cols](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    MatrixX<Scalar> ga = MatrixX<Scalar>::Zero(rows, cols);
    ga.middleCols(start, count) = g;
    tp.accumulate(a, ga);
  });
}

/// Selects rows of `a` by index (repeats allowed).
template <typename Scalar>
BasicVar<Scalar> gather_rows(BasicVar<Scalar> a, std::vector<Eigen::Index> idx) {
  MatrixX<Scalar> out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(k)) = a.value().row(idx[k]);
  }
  const Eigen::Index rows = a.rows();
  return a.tape->record(std::move(out), {a}, [a, rows, idx = std::move(idx)](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    MatrixX<Scalar> ga = MatrixX<Scalar>::Zero(rows, g.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) ga.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
    tp.accumulate(a, ga);
  });
}

/// out(i, 0) = a(i, cols[i]).
template <typename Scalar>
BasicVar<Scalar> pick_per_row(BasicVar<Scalar> a, std::vector<Eigen::Index> cols) {
  if (static_cast<Eigen::Index>(cols.size()) != a.rows()) throw ShapeError("pick_per_row: one column per row required");
  MatrixX<Scalar> out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (cols[i] < 0 || cols[i] >= a.cols()) throw ShapeError("pick_per_row: column out of range");
    out(i, 0) = a.value()(i, cols[i]);
  }
  const Eigen::Index nc = a.cols();
  return a.tape->record(std::move(out), {a}, [a, nc, cols = std::move(cols)](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    MatrixX<Scalar> ga = MatrixX<Scalar>::Zero(g.rows(), nc);
    for (Eigen::Index i = 0; i < g.rows(); ++i) ga(i, cols[i]) = g(i, 0);
    tp.accumulate(a, ga);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
BasicVar<Scalar> sum(BasicVar<Scalar> a) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->record(std::move(out), {a}, [a, r, c](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(a, MatrixX<Scalar>::Constant(r, c, g(0, 0)));
  });
}

template <typename Scalar>
BasicVar<Scalar> mean(BasicVar<Scalar> a) {
  const auto n = static_cast<Scalar>(a.value().size());
  return (Scalar(1) / n) * sum(a);
}

/// Mean of w ⊙ (pred - target)² with constant targets and weights; weights
/// default to one.
template <typename Scalar>
BasicVar<Scalar> weighted_mse(BasicVar<Scalar> pred, const MatrixX<Scalar>& target, const MatrixX<Scalar>* weights = nullptr) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("mse: prediction/target shape mismatch");
  if (weights && (weights->rows() != target.rows() || weights->cols() != target.cols())) throw ShapeError("mse: weight shape mismatch");
  MatrixX<Scalar> diff = pred.value() - target;
  MatrixX<Scalar> wdiff = weights ? MatrixX<Scalar>(diff.cwiseProduct(*weights)) : diff;
  const auto n = static_cast<Scalar>(diff.size());
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = diff.cwiseProduct(wdiff).sum() / n;
  return pred.tape->record(std::move(out), {pred}, [pred, n, wdiff = std::move(wdiff)](BasicTape<Scalar>& tp, const MatrixX<Scalar>& g) {
    tp.accumulate(pred, (Scalar(2) * g(0, 0) / n) * wdiff);
  });
}

template <typename Scalar>
BasicVar<Scalar> mse(BasicVar<Scalar> pred, const MatrixX<Scalar>& target) {
  return weighted_mse<Scalar>(pred, target, nullptr);
}

}  // namespace evacnet::numcore
