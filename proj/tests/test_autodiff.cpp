#include "longimpute/autodiff.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <random>

namespace {

using namespace longimpute::ad;
using testing_support::check_gradients;
using testing_support::random_matrix;

struct Case {
  const char* name;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  testing_support::LossFn loss;
  bool positive = false;  // inputs must be positive (log)
};

std::vector<Case> primitive_cases() {
  // Each loss weights the output by a fixed pattern so every entry of the
  // gradient is exercised, not just the all-ones seed.
  auto weighted = [](Tape& t, Var v) {
    Matrix w(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = 0.3 + 0.17 * static_cast<double>(i % 7);
    return sum(mul(v, t.constant(w)));
  };
  return {
      {"matmul", {{3, 4}, {4, 2}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, matmul(v[0], v[1])); }},
      {"matmul_nt", {{3, 4}, {5, 4}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, matmul_nt(v[0], v[1])); }},
      {"transpose", {{2, 3}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, transpose(v[0])); }},
      {"add_sub", {{3, 3}, {3, 3}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, v[0] + v[1] - scale(v[1], 3.0)); }},
      {"mul", {{2, 5}, {2, 5}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, mul(v[0], v[1])); }},
      {"add_row", {{4, 3}, {1, 3}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, add_row(v[0], v[1])); }},
      {"scale_by_node", {{3, 2}, {1, 1}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, scale(v[0], v[1])); }},
      {"add_scalar_neg", {{3, 2}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, neg(add_scalar(v[0], 0.7))); }},
      {"sigmoid", {{3, 3}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, sigmoid(v[0])); }},
      {"tanh", {{3, 3}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, tanh(v[0])); }},
      {"exp", {{3, 3}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, exp(v[0])); }},
      {"log", {{3, 3}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, log(v[0])); }, true},
      {"square", {{3, 3}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, square(v[0])); }},
      {"concat_cols", {{3, 2}, {3, 4}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, concat_cols(v[0], v[1])); }},
      {"concat_rows", {{2, 3}, {4, 3}}, [=](Tape& t, const std::vector<Var>& v) {
         std::vector<Var> parts{v[0], v[1], v[0]};
         return weighted(t, concat_rows(parts));
       }},
      {"slice_cols", {{3, 6}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, slice_cols(v[0], 2, 3)); }},
      {"slice_rows", {{6, 3}}, [=](Tape& t, const std::vector<Var>& v) { return weighted(t, slice_rows(v[0], 1, 4)); }},
      {"gather_rows", {{5, 3}}, [=](Tape& t, const std::vector<Var>& v) {
         std::vector<Eigen::Index> rows{4, 0, 4, 2};
         return weighted(t, gather_rows(v[0], rows));
       }},
      {"mean", {{4, 3}}, [](Tape&, const std::vector<Var>& v) { return mean(square(v[0])); }},
      {"composite", {{3, 4}, {2, 4}, {1, 2}}, [](Tape&, const std::vector<Var>& v) {
         Var h = tanh(add_row(matmul_nt(v[0], v[1]), v[2]));
         return mean(mul(sigmoid(h), h));
       }},
  };
}

TEST(Autodiff, PrimitiveGradientsMatchCentralDifferences) {
  std::mt19937_64 rng(11);
  for (const auto& c : primitive_cases()) {
    for (int rep = 0; rep < 3; ++rep) {
      std::vector<Matrix> inputs;
      for (auto [r, k] : c.shapes) {
        Matrix m = random_matrix(r, k, rng);
        if (c.positive) m = m.array().abs() + 0.5;
        inputs.push_back(m);
      }
      const auto res = check_gradients(c.loss, inputs);
      EXPECT_LT(res.relative_error, 1e-6) << c.name << " rep " << rep;
    }
  }
}

TEST(Autodiff, BackwardTwiceGivesSameGradient) {
  Tape tape;
  Var x = tape.leaf(Matrix::Constant(2, 2, 0.5));
  Var loss = sum(square(x));
  tape.backward(loss);
  const Matrix first = x.grad();
  tape.backward(loss);
  EXPECT_TRUE(first.isApprox(x.grad()));
  EXPECT_TRUE(first.isApprox(Matrix::Constant(2, 2, 1.0)));
}

TEST(Autodiff, ReusedNodeAccumulatesGradient) {
  Tape tape;
  Var x = tape.leaf(Matrix::Constant(1, 1, 3.0));
  Var y = mul(x, x);
  Var loss = sum(add(y, x));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 7.0);
}

TEST(Autodiff, ConstantsReceiveNoGradientWork) {
  Tape tape;
  Var c = tape.constant(Matrix::Ones(2, 2));
  Var x = tape.leaf(Matrix::Ones(2, 2));
  tape.backward(sum(mul(c, x)));
  EXPECT_FALSE(tape.requires_grad(c.id()));
  EXPECT_TRUE(tape.requires_grad(x.id()));
  EXPECT_TRUE(x.grad().isApprox(Matrix::Ones(2, 2)));
}

TEST(Autodiff, ParentsPrecedeChildren) {
  Tape tape;
  Var a = tape.leaf(Matrix::Ones(2, 2));
  Var b = tanh(matmul(a, a));
  Var c = add(b, a);
  for (std::size_t id = 0; id < tape.size(); ++id) {
    for (auto p : tape.parents(id)) EXPECT_LT(p, id);
  }
  EXPECT_EQ(c.id() + 1, tape.size());
}

TEST(Autodiff, ShapeErrors) {
  Tape tape;
  Var a = tape.leaf(Matrix::Ones(2, 3));
  Var b = tape.leaf(Matrix::Ones(2, 2));
  EXPECT_THROW(matmul(a, b), ShapeMismatch);
  EXPECT_THROW(add(a, b), ShapeMismatch);
  EXPECT_THROW(mul(a, b), ShapeMismatch);
  EXPECT_THROW(add_row(a, tape.leaf(Matrix::Ones(1, 2))), ShapeMismatch);
  EXPECT_THROW(slice_cols(a, 2, 2), ShapeMismatch);
  EXPECT_THROW(tape.backward(a), NonScalarLoss);
}

TEST(Autodiff, AdamFirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * sign(g) (up to epsilon).
  Matrix p = Matrix::Zero(1, 3);
  Matrix g(1, 3);
  g << 2.0, -0.5, 1e-3;
  AdamState state;
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  Matrix* params[] = {&p};
  Matrix grads[] = {g};
  adam_step(params, grads, state, cfg);
  EXPECT_NEAR(p(0, 0), -0.1, 1e-6);
  EXPECT_NEAR(p(0, 1), 0.1, 1e-6);
  EXPECT_NEAR(p(0, 2), -0.1, 1e-4);
  EXPECT_EQ(state.step, 1);
}

TEST(Autodiff, AdamMinimizesQuadratic) {
  Matrix p = Matrix::Constant(2, 2, 3.0);
  AdamState state;
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  for (int i = 0; i < 2000; ++i) {
    Matrix* params[] = {&p};
    Matrix grads[] = {2.0 * (p.array() - 1.0).matrix()};
    adam_step(params, grads, state, cfg);
  }
  EXPECT_TRUE(p.isApprox(Matrix::Ones(2, 2), 1e-3));
}

}  // namespace
