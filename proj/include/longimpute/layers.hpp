#pragma once

// Recurrent cells and dense layers, written once over a value type T:
// T = ad::Matrix holds trainable values, T = ad::Var holds the same values
// bound to a Tape for one forward/backward pass.

#include "longimpute/autodiff.hpp"

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace longimpute {

using ad::Matrix;
using ad::Var;

/// LSTM cell with the canonical input/forget/cell/output gates. Every weight
/// is H x (D_in + H) acting on [x_t, h_prev]; biases are 1 x H rows.
template <typename T>
struct LstmCell {
  T w_input, w_forget, w_cell, w_output;
  T b_input, b_forget, b_cell, b_output;

  template <typename Self, typename F>
  static void fields(Self& s, F&& f) {
    f("w_input", s.w_input);
    f("w_forget", s.w_forget);
    f("w_cell", s.w_cell);
    f("w_output", s.w_output);
    f("b_input", s.b_input);
    f("b_forget", s.b_forget);
    f("b_cell", s.b_cell);
    f("b_output", s.b_output);
  }
};

/// GRU cell (reset/update gates). The candidate sees [x_t, r * h_prev];
/// h_t = u * h_prev + (1 - u) * candidate.
template <typename T>
struct GruCell {
  T w_reset, w_update, w_candidate;
  T b_reset, b_update, b_candidate;

  template <typename Self, typename F>
  static void fields(Self& s, F&& f) {
    f("w_reset", s.w_reset);
    f("w_update", s.w_update);
    f("w_candidate", s.w_candidate);
    f("b_reset", s.b_reset);
    f("b_update", s.b_update);
    f("b_candidate", s.b_candidate);
  }
};

/// y = x W^T + b with W of shape (out x in).
template <typename T>
struct Dense {
  T weight, bias;

  template <typename Self, typename F>
  static void fields(Self& s, F&& f) {
    f("weight", s.weight);
    f("bias", s.bias);
  }
};

using LstmCellParams = LstmCell<Matrix>;
using GruCellParams = GruCell<Matrix>;
using DenseParams = Dense<Matrix>;

/// Calls f(name, member) for every field of a nested parameter struct,
/// prefixing names with `prefix` + ".".
template <template <typename> class S, typename T, typename F>
void for_each_field(S<T>& s, const std::string& prefix, F&& f) {
  S<T>::fields(s, [&](const char* name, T& value) { f(prefix + "." + name, value); });
}
template <template <typename> class S, typename T, typename F>
void for_each_field(const S<T>& s, const std::string& prefix, F&& f) {
  S<T>::fields(s, [&](const char* name, const T& value) { f(prefix + "." + name, value); });
}

/// Named flat view of a model's trainable matrices.
template <typename Model>
std::vector<std::pair<std::string, Matrix*>> named_parameters(Model& model) {
  std::vector<std::pair<std::string, Matrix*>> out;
  Model::fields(model, [&](const std::string& name, Matrix& m) { out.emplace_back(name, &m); });
  return out;
}

template <typename Model>
std::vector<Matrix*> parameter_pointers(Model& model) {
  std::vector<Matrix*> out;
  Model::fields(model, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

/// Binds every trainable matrix of `params` as a leaf of `tape`. Models with
/// non-parameter structure (a cell kind, a variable-length list) provide a
/// static `like(params)` that returns an unbound skeleton of the same layout.
template <template <typename> class Model>
Model<Var> bind(ad::Tape& tape, const Model<Matrix>& params) {
  Model<Var> out{};
  if constexpr (requires { Model<Var>::like(params); }) out = Model<Var>::like(params);
  std::vector<const Matrix*> src;
  Model<Matrix>::fields(params, [&](const std::string&, const Matrix& m) { src.push_back(&m); });
  std::size_t i = 0;
  Model<Var>::fields(out, [&](const std::string&, Var& v) { v = tape.leaf(*src[i++]); });
  return out;
}

/// Gradients of every bound leaf, in field order.
template <template <typename> class Model>
std::vector<Matrix> gradients(Model<Var>& bound) {
  std::vector<Matrix> out;
  Model<Var>::fields(bound, [&](const std::string&, Var& v) { out.push_back(v.grad()); });
  return out;
}

LstmCellParams make_lstm(Eigen::Index input_size, Eigen::Index hidden_size, std::mt19937_64& rng);
GruCellParams make_gru(Eigen::Index input_size, Eigen::Index hidden_size, std::mt19937_64& rng);
DenseParams make_dense(Eigen::Index input_size, Eigen::Index output_size, std::mt19937_64& rng);

LstmCellParams zero_lstm(Eigen::Index input_size, Eigen::Index hidden_size);
GruCellParams zero_gru(Eigen::Index input_size, Eigen::Index hidden_size);
DenseParams zero_dense(Eigen::Index input_size, Eigen::Index output_size);

Eigen::Index hidden_size(const LstmCellParams& p);
Eigen::Index input_size(const LstmCellParams& p);
Eigen::Index hidden_size(const GruCellParams& p);
Eigen::Index input_size(const GruCellParams& p);

/// Checks the H x (D_in + H) / 1 x H layout; throws ad::ShapeMismatch.
void check_shapes(const LstmCellParams& p);
void check_shapes(const GruCellParams& p);

struct LstmState {
  Var h;
  Var c;
};

/// One LSTM step on a batch: x_t is B x D_in, h_prev and c_prev are B x H.
LstmState lstm_cell(const LstmCell<Var>& p, Var x_t, Var h_prev, Var c_prev);

/// One GRU step on a batch; returns h_t.
Var gru_cell(const GruCell<Var>& p, Var x_t, Var h_prev);

Var dense(const Dense<Var>& p, Var x);

}  // namespace longimpute
