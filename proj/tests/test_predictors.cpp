#include "longimpute/predictors.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace {

using namespace longimpute;
using testing_support::check_gradients;
using testing_support::random_matrix;

pred::RegressorConfig small_config(pred::CellKind kind) {
  pred::RegressorConfig c;
  c.kind = kind;
  c.hidden_dim = 4;
  c.max_epochs = 20;
  c.batch_size = 4;
  c.fixed_length = 6;
  return c;
}

TEST(Regressor, ForwardAndMaskedMseGradients) {
  std::mt19937_64 rng(50);
  for (int rep = 0; rep < 6; ++rep) {
    const auto kind = rep % 2 == 0 ? pred::CellKind::Lstm : pred::CellKind::Gru;
    auto params = pred::make_regressor(kind, 3, 3, rng);
    std::vector<Matrix> values;
    for (auto* m : parameter_pointers(params)) values.push_back(*m * 2.0);
    const std::size_t n_params = values.size();
    const Eigen::Index B = 2, T = 3;
    for (Eigen::Index t = 0; t < T; ++t) values.push_back(random_matrix(B, 3, rng));
    const Matrix targets = (random_matrix(B, T, rng).array().tanh() + 1.0) / 2.0;
    Matrix mask = Matrix::Ones(B, T);
    mask(1, 2) = 0.0;
    auto loss = [&](ad::Tape&, const std::vector<Var>& v) {
      pred::Regressor<Var> r = pred::Regressor<Var>::like(params);
      std::size_t k = 0;
      pred::Regressor<Var>::fields(r, [&](const std::string&, Var& x) { x = v[k++]; });
      const auto out = pred::forward(r, std::span<const Var>(v).subspan(n_params));
      return pred::masked_mse(out, targets, mask);
    };
    EXPECT_LT(check_gradients(loss, values).relative_error, 1e-4) << "rep " << rep;
  }
}

TEST(Regressor, MaskedMseIgnoresUnmarkedPositionsAndIsZeroWhenEmpty) {
  ad::Tape tape;
  std::vector<Var> preds{tape.constant(Matrix::Constant(2, 1, 0.5)), tape.constant(Matrix::Constant(2, 1, 0.9))};
  Matrix targets(2, 2), mask(2, 2);
  targets << 0.5, 0.1, 0.7, 0.0;
  mask << 1, 1, 1, 0;
  EXPECT_NEAR(pred::masked_mse(preds, targets, mask).scalar(), (0.0 + 0.64 + 0.04) / 3.0, 1e-15);
  EXPECT_EQ(pred::masked_mse(preds, targets, Matrix::Zero(2, 2)).scalar(), 0.0);
}

TEST(Rmse, ClosedFormsAndPermutationInvariance) {
  Eigen::VectorXd p(2), a(2);
  p << 1, 2;
  a << 1, 4;
  EXPECT_NEAR(pred::rmse(p, a), std::sqrt(2.0), 1e-15);
  EXPECT_EQ(pred::rmse(a, a), 0.0);
  EXPECT_EQ(pred::rmse(Eigen::VectorXd(), Eigen::VectorXd()), 0.0);

  std::mt19937_64 rng(51);
  for (int rep = 0; rep < 50; ++rep) {
    const Eigen::VectorXd x = random_matrix(9, 1, rng), y = random_matrix(9, 1, rng);
    std::vector<int> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::VectorXd xs(9), ys(9);
    for (int i = 0; i < 9; ++i) {
      xs(i) = x(perm[static_cast<std::size_t>(i)]);
      ys(i) = y(perm[static_cast<std::size_t>(i)]);
    }
    EXPECT_NEAR(pred::rmse(x, y), pred::rmse(xs, ys), 1e-14);
  }
}

Dataset constant_target(std::mt19937_64& rng, std::size_t P, double value) {
  Dataset d = testing_support::random_dataset(rng, P, 6);
  for (auto& s : d.subjects) {
    for (auto& step : s.steps) step.target = value;
  }
  return d;
}

TEST(Training, ConstantTargetIsLearned) {
  std::mt19937_64 rng(52);
  const Dataset tr = constant_target(rng, 24, 0.3), va = constant_target(rng, 8, 0.3);
  auto cfg = small_config(pred::CellKind::Gru);
  cfg.max_epochs = 100;
  const auto r = pred::train_regressor(tr, va, cfg, 1);
  EXPECT_LT(pred::evaluate(r.model, va), 0.05);
  EXPECT_LE(static_cast<int>(r.history.size()), cfg.max_epochs + 1);
}

TEST(Training, SameSeedSameHistory) {
  std::mt19937_64 rng(53);
  const Dataset tr = testing_support::random_dataset(rng, 12, 6), va = testing_support::random_dataset(rng, 4, 6);
  for (auto kind : {pred::CellKind::Lstm, pred::CellKind::Gru}) {
    const auto a = pred::train_regressor(tr, va, small_config(kind), 9);
    const auto b = pred::train_regressor(tr, va, small_config(kind), 9);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t e = 0; e < a.history.size(); ++e) {
      EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
      EXPECT_EQ(a.history[e].val_loss, b.history[e].val_loss);
    }
    EXPECT_EQ(a.best_epoch, b.best_epoch);
  }
}

pred::RegressorModel zero_model(const Dataset& d) {
  pred::RegressorModel m;
  m.params = pred::zero_regressor(pred::CellKind::Lstm, 3, 4);
  m.scaler.fit(feature_rows(d));
  m.trained = true;
  return m;
}

TEST(Targets, ZeroWeightModelPredictsOneHalf) {
  std::mt19937_64 rng(54);
  Dataset gen = testing_support::random_dataset(rng, 5, 4);
  for (auto& s : gen.subjects) {
    for (auto& step : s.steps) {
      step.observed = false;
      step.target.reset();
    }
  }
  const Dataset out = pred::predict_targets(zero_model(gen), gen);
  for (const auto& s : out.subjects) {
    for (const auto& step : s.steps) EXPECT_EQ(*step.target, 0.5);
  }
}

TEST(Targets, OutputsInUnitIntervalAndDeterministic) {
  std::mt19937_64 rng(55);
  const Dataset tr = testing_support::random_dataset(rng, 12, 6), va = testing_support::random_dataset(rng, 4, 6);
  const auto r = pred::train_regressor(tr, va, small_config(pred::CellKind::Lstm), 4);
  Dataset gen = testing_support::random_dataset(rng, 6, 5);
  for (auto& s : gen.subjects) {
    for (auto& step : s.steps) {
      step.features *= 40.0;  // far outside the training range
      step.target.reset();
    }
  }
  const Dataset a = pred::predict_targets(r.model, gen), b = pred::predict_targets(r.model, gen);
  for (std::size_t i = 0; i < a.subjects.size(); ++i) {
    for (std::size_t t = 0; t < a.subjects[i].steps.size(); ++t) {
      const double v = *a.subjects[i].steps[t].target;
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
      EXPECT_EQ(v, *b.subjects[i].steps[t].target);
    }
  }
}

// Each generated row is labelled at its position inside the merged sequence,
// which is exactly what a standalone run over that merged sequence gives.
TEST(Targets, ContextPredictionMatchesRunOverMergedSequence) {
  std::mt19937_64 rng(56);
  const Dataset tr = testing_support::random_dataset(rng, 12, 6), va = testing_support::random_dataset(rng, 4, 6);
  const auto r = pred::train_regressor(tr, va, small_config(pred::CellKind::Gru), 4);

  Dataset context = testing_support::random_dataset(rng, 3, 4);
  context.row_order.clear();
  Dataset generated = context;
  generated.subjects.resize(2);
  for (auto& s : generated.subjects) {
    s.steps.resize(2);
    s.steps[0].event_time = 0.5;
    s.steps[1].event_time = 100.0;
    for (auto& step : s.steps) {
      step.observed = false;
      step.target.reset();
      step.features = Eigen::VectorXd::Constant(3, 0.4);
    }
  }
  const Dataset labelled = pred::predict_targets(r.model, generated, context, "f2");
  const Dataset merged = merge_by_id(context, generated, "f2");
  Dataset unlabelled = merged;
  for (auto& s : unlabelled.subjects) {
    for (auto& step : s.steps) step.target.reset();
  }
  const Dataset direct = pred::predict_targets(r.model, unlabelled);
  for (const auto& g : labelled.subjects) {
    const auto& m = direct.subjects[*direct.find(g.subject_id)];
    std::size_t k = 0;
    for (std::size_t t = 0; t < m.steps.size(); ++t) {
      if (merged.subjects[*merged.find(g.subject_id)].steps[t].observed) continue;
      EXPECT_DOUBLE_EQ(*g.steps.at(k++).target, *m.steps[t].target);
    }
    EXPECT_EQ(k, g.steps.size());
  }
}

TEST(Evaluation, UntrainedModelRejected) {
  std::mt19937_64 rng(57);
  pred::RegressorModel m;
  m.params = pred::zero_regressor(pred::CellKind::Gru, 3, 2);
  EXPECT_THROW(pred::evaluate(m, testing_support::random_dataset(rng, 2, 3)), pred::NotTrained);
}

TEST(Evaluation, PerfectPredictionsGiveZeroRmse) {
  std::mt19937_64 rng(58);
  Dataset d = testing_support::random_dataset(rng, 4, 5);
  for (auto& s : d.subjects) {
    for (auto& step : s.steps) step.target = 0.5;
  }
  EXPECT_EQ(pred::evaluate(zero_model(d), d), 0.0);
}

TEST(Selection, LowestMeanWinsAndTiesGoToFirstCell) {
  std::vector<pred::EvalResult> rs{
      {"original", "lstm", "zero", 1, 0.3}, {"original", "lstm", "zero", 2, 0.1},
      {"original", "gru", "ffill", 1, 0.15}, {"original", "gru", "ffill", 2, 0.25},
      {"original", "gru", "zero", 1, 0.19}, {"original", "gru", "zero", 2, 0.21},
  };
  auto best = pred::select_best(rs);
  EXPECT_EQ(best.model, "lstm");
  EXPECT_EQ(best.padding, "zero");
  EXPECT_NEAR(best.mean_rmse, 0.2, 1e-15);
  rs[4].rmse = 0.18;
  best = pred::select_best(rs);
  EXPECT_EQ(best.model, "gru");
  EXPECT_EQ(best.padding, "zero");
}

TEST(Selection, CsvRowFormat) {
  EXPECT_EQ(pred::eval_csv_header(), "dataset,model,padding,seed,rmse");
  EXPECT_EQ(pred::eval_csv_row({"vae", "gru", "bfill", 3, 0.25}), "vae,gru,bfill,3,0.25");
}

TEST(Checkpoint, RegressorRoundTrip) {
  std::mt19937_64 rng(59);
  const Dataset tr = testing_support::random_dataset(rng, 8, 5), va = testing_support::random_dataset(rng, 3, 5);
  for (auto kind : {pred::CellKind::Lstm, pred::CellKind::Gru}) {
    const auto r = pred::train_regressor(tr, va, small_config(kind), 2);
    const auto back = pred::from_checkpoint(decode_checkpoint(encode_checkpoint(pred::to_checkpoint(r.model))));
    EXPECT_EQ(back.config.kind, kind);
    EXPECT_EQ(pred::evaluate(back, va), pred::evaluate(r.model, va));
  }
}

TEST(Config, RegressorConfigJsonRoundTrip) {
  auto c = small_config(pred::CellKind::Gru);
  c.padding = Padding::Ffill;
  const auto back = pred::regressor_config_from_json(pred::to_json(c));
  EXPECT_EQ(pred::to_json(back), pred::to_json(c));
  EXPECT_EQ(back.kind, pred::CellKind::Gru);
}

}  // namespace
