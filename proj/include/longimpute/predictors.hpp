#pragma once

// Downstream per-step score-rate regressors (LSTM or GRU with a sigmoid head)
// and their RMSE evaluation.

#include "longimpute/checkpoint.hpp"
#include "longimpute/core_types.hpp"
#include "longimpute/layers.hpp"
#include "longimpute/pipeline.hpp"

#include <json.hpp>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace longimpute::pred {

class NotTrained : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class CellKind { Lstm, Gru };

const char* to_string(CellKind kind);
CellKind cell_kind_from_string(const std::string& name);

/// Recurrent cell (only the one matching `kind` is trained) and a dense
/// hidden -> 1 head.
template <typename T>
struct Regressor {
  CellKind kind = CellKind::Lstm;
  LstmCell<T> lstm;
  GruCell<T> gru;
  Dense<T> head;

  template <typename U>
  static Regressor like(const Regressor<U>& other) {
    Regressor out{};
    out.kind = other.kind;
    return out;
  }

  template <typename Self, typename F>
  static void fields(Self& s, F&& f) {
    if (s.kind == CellKind::Lstm) {
      for_each_field(s.lstm, "lstm", f);
    } else {
      for_each_field(s.gru, "gru", f);
    }
    for_each_field(s.head, "head", f);
  }
};

using RegressorParams = Regressor<Matrix>;

RegressorParams make_regressor(CellKind kind, Eigen::Index input_size, Eigen::Index hidden_size,
                               std::mt19937_64& rng);
RegressorParams zero_regressor(CellKind kind, Eigen::Index input_size, Eigen::Index hidden_size);

/// Per-step outputs in (0, 1): T entries of B x 1.
std::vector<Var> forward(const Regressor<Var>& model, std::span<const Var> inputs);

/// Mean squared error over positions with target_mask = 1 (B x T masks).
/// Returns 0 when no position is marked.
Var masked_mse(std::span<const Var> predictions, const Matrix& targets, const Matrix& target_mask);

struct RegressorConfig {
  CellKind kind = CellKind::Lstm;
  Eigen::Index hidden_dim = 16;
  double learning_rate = 5e-3;
  int max_epochs = 100;
  int patience = 10;
  double min_delta = 1e-5;
  std::size_t batch_size = 8;
  Padding padding = Padding::Zero;
  /// 0 selects the corpus default of the training part.
  Eigen::Index fixed_length = 0;

  void check() const;
};

nlohmann::json to_json(const RegressorConfig& config);
RegressorConfig regressor_config_from_json(const nlohmann::json& j);

struct RegressorModel {
  RegressorConfig config;
  RegressorParams params;
  MinMaxScaler scaler;
  Eigen::Index fixed_length = 1;
  bool trained = false;
};

struct EpochLoss {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct RegressorResult {
  RegressorModel model;
  std::vector<EpochLoss> history;  // epoch 0 is the untrained model
  int best_epoch = 0;
};

/// Adam on the masked MSE of aligned, scaled training sequences, early
/// stopping on the validation loss; returns the best-validation weights.
/// Throws ad::NonFiniteLoss on NaN or infinite losses.
RegressorResult train_regressor(const Dataset& train_part, const Dataset& val_part, const RegressorConfig& config,
                                std::uint64_t seed);

struct Predictions {
  Eigen::VectorXd predicted;
  Eigen::VectorXd actual;
};

/// Predictions for every step carrying a target, over each subject's whole
/// sequence (no truncation), in subject-major order.
Predictions predict_rows(const RegressorModel& model, const Dataset& dataset);

/// sqrt(mean((predicted - actual)^2)); 0 for empty input.
double rmse(const Eigen::VectorXd& predicted, const Eigen::VectorXd& actual);

double evaluate(const RegressorModel& model, const Dataset& test_part);

/// Copy of `generated` with every step's target set to the model output.
/// Each generated subject is run on its standalone sequence.
Dataset predict_targets(const RegressorModel& model, const Dataset& generated);

/// As above, but each generated row is predicted in place inside its
/// subject's merged sequence (merge_by_id of `context` and `generated`), the
/// sequence it will have after full by-ID imputation.
Dataset predict_targets(const RegressorModel& model, const Dataset& generated, const Dataset& context,
                        const std::string& sequence_feature = "sequence_number");

struct EvalResult {
  std::string dataset;
  std::string model;
  std::string padding;
  std::uint64_t seed = 0;
  double rmse = 0.0;
};

std::string eval_csv_header();
std::string eval_csv_row(const EvalResult& r);

struct Selection {
  std::string model;
  std::string padding;
  double mean_rmse = 0.0;
};

/// (model, padding) cell with the lowest mean RMSE over its seeds; ties go to
/// the cell seen first.
Selection select_best(std::span<const EvalResult> results);

Checkpoint to_checkpoint(const RegressorModel& model);
RegressorModel from_checkpoint(const Checkpoint& ckpt);

}  // namespace longimpute::pred
