#include "longimpute/layers.hpp"

#include <cmath>

namespace longimpute {

namespace {

Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  // Fill in a fixed (row-major) order so initialization does not depend on
  // Eigen's storage order.
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  }
  return m;
}

void expect_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ad::ShapeMismatch(std::string(what) + " has shape " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                            std::to_string(cols));
  }
}

}  // namespace

LstmCellParams make_lstm(Eigen::Index input_size, Eigen::Index hidden_size, std::mt19937_64& rng) {
  const Eigen::Index fan_in = input_size + hidden_size;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  LstmCellParams p;
  p.w_input = uniform(hidden_size, fan_in, bound, rng);
  p.w_forget = uniform(hidden_size, fan_in, bound, rng);
  p.w_cell = uniform(hidden_size, fan_in, bound, rng);
  p.w_output = uniform(hidden_size, fan_in, bound, rng);
  p.b_input = uniform(1, hidden_size, bound, rng);
  p.b_forget = Matrix::Constant(1, hidden_size, 1.0);
  p.b_cell = uniform(1, hidden_size, bound, rng);
  p.b_output = uniform(1, hidden_size, bound, rng);
  return p;
}

GruCellParams make_gru(Eigen::Index input_size, Eigen::Index hidden_size, std::mt19937_64& rng) {
  const Eigen::Index fan_in = input_size + hidden_size;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  GruCellParams p;
  p.w_reset = uniform(hidden_size, fan_in, bound, rng);
  p.w_update = uniform(hidden_size, fan_in, bound, rng);
  p.w_candidate = uniform(hidden_size, fan_in, bound, rng);
  p.b_reset = uniform(1, hidden_size, bound, rng);
  p.b_update = uniform(1, hidden_size, bound, rng);
  p.b_candidate = uniform(1, hidden_size, bound, rng);
  return p;
}

DenseParams make_dense(Eigen::Index input_size, Eigen::Index output_size, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(input_size));
  DenseParams p;
  p.weight = uniform(output_size, input_size, bound, rng);
  p.bias = uniform(1, output_size, bound, rng);
  return p;
}

LstmCellParams zero_lstm(Eigen::Index input_size, Eigen::Index hidden_size) {
  const Eigen::Index fan_in = input_size + hidden_size;
  LstmCellParams p;
  LstmCellParams::fields(p, [&](const char* name, Matrix& m) {
    m = name[0] == 'w' ? Matrix::Zero(hidden_size, fan_in) : Matrix::Zero(1, hidden_size);
  });
  return p;
}

GruCellParams zero_gru(Eigen::Index input_size, Eigen::Index hidden_size) {
  const Eigen::Index fan_in = input_size + hidden_size;
  GruCellParams p;
  GruCellParams::fields(p, [&](const char* name, Matrix& m) {
    m = name[0] == 'w' ? Matrix::Zero(hidden_size, fan_in) : Matrix::Zero(1, hidden_size);
  });
  return p;
}

DenseParams zero_dense(Eigen::Index input_size, Eigen::Index output_size) {
  return {Matrix::Zero(output_size, input_size), Matrix::Zero(1, output_size)};
}

Eigen::Index hidden_size(const LstmCellParams& p) { return p.w_input.rows(); }
Eigen::Index input_size(const LstmCellParams& p) { return p.w_input.cols() - p.w_input.rows(); }
Eigen::Index hidden_size(const GruCellParams& p) { return p.w_reset.rows(); }
Eigen::Index input_size(const GruCellParams& p) { return p.w_reset.cols() - p.w_reset.rows(); }

void check_shapes(const LstmCellParams& p) {
  const auto H = hidden_size(p);
  const auto W = p.w_input.cols();
  LstmCellParams::fields(p, [&](const char* name, const Matrix& m) {
    if (name[0] == 'w') {
      expect_shape(m, H, W, name);
    } else {
      expect_shape(m, 1, H, name);
    }
  });
}

void check_shapes(const GruCellParams& p) {
  const auto H = hidden_size(p);
  const auto W = p.w_reset.cols();
  GruCellParams::fields(p, [&](const char* name, const Matrix& m) {
    if (name[0] == 'w') {
      expect_shape(m, H, W, name);
    } else {
      expect_shape(m, 1, H, name);
    }
  });
}

LstmState lstm_cell(const LstmCell<Var>& p, Var x_t, Var h_prev, Var c_prev) {
  const Var xh = ad::concat_cols(x_t, h_prev);
  const Var i = ad::sigmoid(ad::add_row(ad::matmul_nt(xh, p.w_input), p.b_input));
  const Var f = ad::sigmoid(ad::add_row(ad::matmul_nt(xh, p.w_forget), p.b_forget));
  const Var g = ad::tanh(ad::add_row(ad::matmul_nt(xh, p.w_cell), p.b_cell));
  const Var o = ad::sigmoid(ad::add_row(ad::matmul_nt(xh, p.w_output), p.b_output));
  ad::check_same_shape(c_prev.value(), f.value(), "lstm_cell c_prev");
  const Var c = ad::mul(f, c_prev) + ad::mul(i, g);
  const Var h = ad::mul(o, ad::tanh(c));
  return {h, c};
}

Var gru_cell(const GruCell<Var>& p, Var x_t, Var h_prev) {
  const Var xh = ad::concat_cols(x_t, h_prev);
  const Var r = ad::sigmoid(ad::add_row(ad::matmul_nt(xh, p.w_reset), p.b_reset));
  const Var u = ad::sigmoid(ad::add_row(ad::matmul_nt(xh, p.w_update), p.b_update));
  const Var xrh = ad::concat_cols(x_t, ad::mul(r, h_prev));
  const Var n = ad::tanh(ad::add_row(ad::matmul_nt(xrh, p.w_candidate), p.b_candidate));
  // h = u*h_prev + (1-u)*n = n + u*(h_prev - n)
  return n + ad::mul(u, h_prev - n);
}

Var dense(const Dense<Var>& p, Var x) { return ad::add_row(ad::matmul_nt(x, p.weight), p.bias); }

}  // namespace longimpute
