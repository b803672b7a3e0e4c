#pragma once

// Reverse-mode differentiation over dense rank-2 tensors.
//
// A Tape records every primitive applied to its Vars in execution order, so
// parents always precede children. Tensors are Eigen::MatrixXd; a batch of
// row vectors is a B x n matrix and biases are 1 x n rows.

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace longimpute::ad {

using Matrix = Eigen::MatrixXd;

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonScalarLoss : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A training loss became NaN or infinite.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1 x 1 node.
  double scalar() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the gradient of node `self` into its parents' buffers.
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A differentiable leaf (a parameter or an input whose gradient is wanted).
  Var leaf(Matrix value);
  /// A leaf that never needs a gradient.
  Var constant(Matrix value);
  /// Records a derived node. `backward` may be empty for nodes that do not
  /// depend on any differentiable leaf.
  Var push(Matrix value, std::vector<std::size_t> parents, Backward backward);

  /// Reverse sweep from a 1 x 1 loss. Gradients of all nodes are reset first,
  /// so calling backward twice yields the same result.
  void backward(Var loss);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  /// Accumulation target used by Backward implementations.
  Matrix& grad_mut(std::size_t id) { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  std::size_t size() const { return nodes_.size(); }
  /// Parent ids of a node; parents always have smaller ids.
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Primitives. Each throws ShapeMismatch on incompatible operands.

Var matmul(Var a, Var b);
/// a * b^T, the layout used by dense layers with (out x in) weights.
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
/// Adds a 1 x n row to every row of a B x n matrix.
Var add_row(Var a, Var row);
Var scale(Var a, double factor);
/// Scales a tensor by a 1 x 1 node.
Var scale(Var a, Var scalar);
Var add_scalar(Var a, double c);
Var neg(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
/// Horizontal concatenation of equal-height tensors.
Var concat_cols(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
/// Vertical concatenation of equal-width tensors.
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
/// Gathers the listed rows (repeats allowed) into a new tensor.
Var gather_rows(Var a, std::span<const Eigen::Index> rows);
Var sum(Var a);
Var mean(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

void check_same_shape(const Matrix& a, const Matrix& b, const char* op);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  long step = 0;
};

/// One bias-corrected Adam update, in place. The state is lazily sized on
/// first use.
void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config);

}  // namespace longimpute::ad
