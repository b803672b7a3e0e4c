#include "longimpute/autodiff.hpp"

#include <cmath>

namespace longimpute::ad {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
  return tape_of(a);
}

// Accumulates into a parent's gradient if it takes part in differentiation.
template <typename Expr>
void accumulate(Tape& tape, std::size_t parent, const Expr& g) {
  if (tape.requires_grad(parent)) tape.grad_mut(parent) += g;
}

}  // namespace

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
  }
}

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeMismatch("scalar() on a " + shape_str(v) + " tensor");
  return v(0, 0);
}

Var Tape::leaf(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::push(Matrix value, std::vector<std::size_t> parents, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (auto p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("loss is not on this tape");
  if (loss.value().size() != 1) {
    throw NonScalarLoss("loss must be 1x1, got " + shape_str(loss.value()));
  }
  for (auto& n : nodes_) {
    if (n.requires_grad) {
      n.grad.setZero(n.value.rows(), n.value.cols());
    } else {
      n.grad.resize(0, 0);
    }
  }
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad(0, 0) = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (nodes_[i].backward) nodes_[i].backward(*this, i);
  }
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeMismatch("matmul: " + shape_str(a.value()) + " * " + shape_str(b.value()));
  }
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, ia, g * tp.value(ib).transpose());
    accumulate(tp, ib, tp.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.cols()) {
    throw ShapeMismatch("matmul_nt: " + shape_str(a.value()) + " * (" + shape_str(b.value()) + ")^T");
  }
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value().transpose(), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, ia, g * tp.value(ib));
    accumulate(tp, ib, g.transpose() * tp.value(ia));
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const auto ia = a.id();
  return t.push(a.value().transpose(), {ia}, [ia](Tape& tp, std::size_t self) {
    accumulate(tp, ia, tp.grad(self).transpose());
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape(a.value(), b.value(), "add");
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    accumulate(tp, ia, tp.grad(self));
    accumulate(tp, ib, tp.grad(self));
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    accumulate(tp, ia, tp.grad(self));
    accumulate(tp, ib, -tp.grad(self));
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape(a.value(), b.value(), "mul");
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, ia, g.cwiseProduct(tp.value(ib)));
    accumulate(tp, ib, g.cwiseProduct(tp.value(ia)));
  });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeMismatch("add_row: " + shape_str(a.value()) + " + row " + shape_str(row.value()));
  }
  const auto ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(out), {ia, ir}, [ia, ir](Tape& tp, std::size_t self) {
    accumulate(tp, ia, tp.grad(self));
    accumulate(tp, ir, tp.grad(self).colwise().sum());
  });
}

Var scale(Var a, double factor) {
  Tape& t = tape_of(a);
  const auto ia = a.id();
  return t.push(a.value() * factor, {ia}, [ia, factor](Tape& tp, std::size_t self) {
    accumulate(tp, ia, tp.grad(self) * factor);
  });
}

Var scale(Var a, Var scalar) {
  Tape& t = tape_of(a, scalar);
  if (scalar.value().size() != 1) {
    throw ShapeMismatch("scale: factor must be 1x1, got " + shape_str(scalar.value()));
  }
  const auto ia = a.id(), is = scalar.id();
  return t.push(a.value() * scalar.scalar(), {ia, is}, [ia, is](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, ia, g * tp.value(is)(0, 0));
    if (tp.requires_grad(is)) tp.grad_mut(is)(0, 0) += g.cwiseProduct(tp.value(ia)).sum();
  });
}

Var add_scalar(Var a, double c) {
  Tape& t = tape_of(a);
  const auto ia = a.id();
  return t.push(a.value().array() + c, {ia}, [ia](Tape& tp, std::size_t self) {
    accumulate(tp, ia, tp.grad(self));
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  const auto ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) {
    // Split by sign so neither branch overflows.
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return t.push(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    const Matrix& y = tp.value(self);
    accumulate(tp, ia, tp.grad(self).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

Var tanh(Var a) {
  Tape& t = tape_of(a);
  const auto ia = a.id();
  return t.push(a.value().array().tanh().matrix(), {ia}, [ia](Tape& tp, std::size_t self) {
    const Matrix& y = tp.value(self);
    accumulate(tp, ia, tp.grad(self).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  const auto ia = a.id();
  return t.push(a.value().array().exp().matrix(), {ia}, [ia](Tape& tp, std::size_t self) {
    accumulate(tp, ia, tp.grad(self).cwiseProduct(tp.value(self)));
  });
}

Var log(Var a) {
  Tape& t = tape_of(a);
  const auto ia = a.id();
  return t.push(a.value().array().log().matrix(), {ia}, [ia](Tape& tp, std::size_t self) {
    accumulate(tp, ia, tp.grad(self).cwiseQuotient(tp.value(ia)));
  });
}

Var square(Var a) {
  Tape& t = tape_of(a);
  const auto ia = a.id();
  return t.push(a.value().array().square().matrix(), {ia}, [ia](Tape& tp, std::size_t self) {
    accumulate(tp, ia, 2.0 * tp.grad(self).cwiseProduct(tp.value(ia)));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no operands");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    if (p.rows() != rows) throw ShapeMismatch("concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  auto parent_ids = ids;
  return t.push(std::move(out), std::move(parent_ids), [ids](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Eigen::Index off = 0;
    for (auto id : ids) {
      const auto w = tp.value(id).cols();
      accumulate(tp, id, g.middleCols(off, w));
      off += w;
    }
  });
}

Var concat_cols(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat_cols(std::span<const Var>(parts));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no operands");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    if (p.cols() != cols) throw ShapeMismatch("concat_rows: column counts differ");
    rows += p.rows();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  auto parent_ids = ids;
  return t.push(std::move(out), std::move(parent_ids), [ids](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Eigen::Index off = 0;
    for (auto id : ids) {
      const auto h = tp.value(id).rows();
      accumulate(tp, id, g.middleRows(off, h));
      off += h;
    }
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeMismatch("slice_cols out of range on " + shape_str(a.value()));
  }
  const auto ia = a.id();
  return t.push(a.value().middleCols(start, count), {ia}, [ia, start, count](Tape& tp, std::size_t self) {
    if (tp.requires_grad(ia)) tp.grad_mut(ia).middleCols(start, count) += tp.grad(self);
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeMismatch("slice_rows out of range on " + shape_str(a.value()));
  }
  const auto ia = a.id();
  return t.push(a.value().middleRows(start, count), {ia}, [ia, start, count](Tape& tp, std::size_t self) {
    if (tp.requires_grad(ia)) tp.grad_mut(ia).middleRows(start, count) += tp.grad(self);
  });
}

Var gather_rows(Var a, std::span<const Eigen::Index> rows) {
  Tape& t = tape_of(a);
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeMismatch("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const auto ia = a.id();
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return t.push(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad_mut(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  const auto ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    if (tp.requires_grad(ia)) tp.grad_mut(ia).array() += tp.grad(self)(0, 0);
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeMismatch("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config) {
  if (params.size() != grads.size()) throw ShapeMismatch("adam_step: parameter/gradient count differs");
  if (state.first_moment.empty()) {
    for (const Matrix* p : params) {
      state.first_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
      state.second_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeMismatch("adam_step: state size differs");
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    check_same_shape(p, grads[i], "adam_step");
    check_same_shape(p, state.first_moment[i], "adam_step");
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = config.beta1 * m + (1.0 - config.beta1) * grads[i];
    v = config.beta2 * v + (1.0 - config.beta2) * grads[i].cwiseAbs2();
    p.array() -= config.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + config.epsilon);
  }
}

}  // namespace longimpute::ad
