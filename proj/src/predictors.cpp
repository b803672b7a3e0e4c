#include "longimpute/predictors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>

namespace longimpute::pred {

namespace {

constexpr double kClipNorm = 5.0;
constexpr std::size_t kEvalBatch = 64;

struct BatchLoss {
  double loss = 0.0;
  double weight = 0.0;
};

BatchLoss run_batch(const SequenceBatch& batch, Regressor<Var>& bound, ad::Tape& tape, Var* loss_out) {
  std::vector<Var> inputs;
  for (const auto& x : batch.inputs) inputs.push_back(tape.constant(x));
  const auto preds = forward(bound, inputs);
  const Var loss = masked_mse(preds, batch.targets, batch.target_mask);
  if (loss_out) *loss_out = loss;
  return {loss.scalar(), batch.target_mask.sum()};
}

double mean_loss(const RegressorModel& model, std::span<const AlignedSubject> subjects) {
  std::vector<std::size_t> order(subjects.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double total = 0.0, weight = 0.0;
  for (const auto& idx : batches_of(order, model.config.batch_size)) {
    ad::Tape tape;
    auto bound = bind<Regressor>(tape, model.params);
    const BatchLoss b = run_batch(make_batch(subjects, idx), bound, tape, nullptr);
    total += b.loss * b.weight;
    weight += b.weight;
  }
  return weight > 0.0 ? total / weight : 0.0;
}

void clip_gradients(std::vector<Matrix>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    for (auto& g : grads) g *= max_norm / norm;
  }
}

// Runs the model over whole sequences; returns one T_p vector per subject.
std::vector<Eigen::VectorXd> run_full(const RegressorModel& model, const Dataset& dataset) {
  if (!model.trained) throw NotTrained("regressor used before training");
  Eigen::Index longest = 1;
  for (const auto& s : dataset.subjects) longest = std::max(longest, static_cast<Eigen::Index>(s.steps.size()));
  const auto aligned = align_subjects(dataset, model.scaler, {Padding::Zero, longest});
  std::vector<std::size_t> order(aligned.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Eigen::VectorXd> out(aligned.size());
  for (const auto& idx : batches_of(order, kEvalBatch)) {
    const SequenceBatch batch = make_batch(aligned, idx);
    ad::Tape tape;
    const auto bound = bind<Regressor>(tape, model.params);
    std::vector<Var> inputs;
    for (const auto& x : batch.inputs) inputs.push_back(tape.constant(x));
    const auto preds = forward(bound, inputs);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto n = static_cast<Eigen::Index>(dataset.subjects[idx[i]].steps.size());
      Eigen::VectorXd v(n);
      for (Eigen::Index t = 0; t < n; ++t) v(t) = preds[static_cast<std::size_t>(t)].value()(static_cast<Eigen::Index>(i), 0);
      out[idx[i]] = std::move(v);
    }
  }
  return out;
}

}  // namespace

const char* to_string(CellKind kind) { return kind == CellKind::Lstm ? "lstm" : "gru"; }

CellKind cell_kind_from_string(const std::string& name) {
  if (name == "lstm") return CellKind::Lstm;
  if (name == "gru") return CellKind::Gru;
  throw std::invalid_argument("unknown regressor cell: " + name);
}

RegressorParams make_regressor(CellKind kind, Eigen::Index input_size, Eigen::Index hidden_size,
                               std::mt19937_64& rng) {
  RegressorParams p;
  p.kind = kind;
  if (kind == CellKind::Lstm) {
    p.lstm = make_lstm(input_size, hidden_size, rng);
  } else {
    p.gru = make_gru(input_size, hidden_size, rng);
  }
  p.head = make_dense(hidden_size, 1, rng);
  return p;
}

RegressorParams zero_regressor(CellKind kind, Eigen::Index input_size, Eigen::Index hidden_size) {
  RegressorParams p;
  p.kind = kind;
  if (kind == CellKind::Lstm) {
    p.lstm = zero_lstm(input_size, hidden_size);
  } else {
    p.gru = zero_gru(input_size, hidden_size);
  }
  p.head = zero_dense(hidden_size, 1);
  return p;
}

std::vector<Var> forward(const Regressor<Var>& model, std::span<const Var> inputs) {
  if (inputs.empty()) throw EmptySequence("regressor input has no time steps");
  ad::Tape& tape = *inputs.front().tape();
  const Eigen::Index B = inputs.front().rows();
  const Eigen::Index H = model.head.weight.cols();
  Var h = tape.constant(Matrix::Zero(B, H));
  Var c = h;
  std::vector<Var> out;
  out.reserve(inputs.size());
  for (const Var& x : inputs) {
    if (model.kind == CellKind::Lstm) {
      const LstmState s = lstm_cell(model.lstm, x, h, c);
      h = s.h;
      c = s.c;
    } else {
      h = gru_cell(model.gru, x, h);
    }
    out.push_back(ad::sigmoid(dense(model.head, h)));
  }
  return out;
}

Var masked_mse(std::span<const Var> predictions, const Matrix& targets, const Matrix& target_mask) {
  if (predictions.empty() || static_cast<Eigen::Index>(predictions.size()) != targets.cols() ||
      targets.rows() != target_mask.rows() || targets.cols() != target_mask.cols()) {
    throw ad::ShapeMismatch("masked_mse: prediction/target layout differs");
  }
  ad::Tape& tape = *predictions.front().tape();
  const double count = target_mask.sum();
  Var total;
  for (std::size_t t = 0; t < predictions.size(); ++t) {
    const auto col = static_cast<Eigen::Index>(t);
    const Var diff = ad::mul(ad::sub(predictions[t], tape.constant(targets.col(col))), tape.constant(target_mask.col(col)));
    const Var term = ad::sum(ad::square(diff));
    total = total.valid() ? total + term : term;
  }
  return ad::scale(total, count > 0.0 ? 1.0 / count : 0.0);
}

void RegressorConfig::check() const {
  if (hidden_dim < 1) throw std::invalid_argument("regressor hidden size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (max_epochs < 0 || patience < 0) throw std::invalid_argument("epoch counts must be non-negative");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (fixed_length < 0) throw std::invalid_argument("fixed length must be non-negative");
}

nlohmann::json to_json(const RegressorConfig& c) {
  return {{"kind", to_string(c.kind)},       {"hidden_dim", c.hidden_dim}, {"learning_rate", c.learning_rate},
          {"max_epochs", c.max_epochs},      {"patience", c.patience},     {"min_delta", c.min_delta},
          {"batch_size", c.batch_size},      {"padding", to_string(c.padding)},
          {"fixed_length", c.fixed_length}};
}

RegressorConfig regressor_config_from_json(const nlohmann::json& j) {
  RegressorConfig c;
  c.kind = cell_kind_from_string(j.value("kind", std::string("lstm")));
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.min_delta = j.value("min_delta", c.min_delta);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.padding = padding_from_string(j.value("padding", std::string("zero")));
  c.fixed_length = j.value("fixed_length", c.fixed_length);
  c.check();
  return c;
}

RegressorResult train_regressor(const Dataset& train_part, const Dataset& val_part, const RegressorConfig& config,
                                std::uint64_t seed) {
  config.check();
  if (train_part.subjects.empty()) throw EmptyPart("regressor training set is empty");
  RegressorModel model;
  model.config = config;
  model.scaler.fit(feature_rows(train_part));
  model.fixed_length = config.fixed_length > 0 ? config.fixed_length : default_fixed_length(train_part);
  std::mt19937_64 rng(seed);
  model.params = make_regressor(config.kind, static_cast<Eigen::Index>(train_part.feature_schema.size()),
                                config.hidden_dim, rng);
  model.trained = true;

  const PaddingStrategy strategy{config.padding, model.fixed_length};
  const auto train_set = align_subjects(train_part, model.scaler, strategy);
  const auto val_set = align_subjects(val_part, model.scaler, strategy);
  std::span<const AlignedSubject> monitor = val_set.empty() ? std::span<const AlignedSubject>(train_set)
                                                            : std::span<const AlignedSubject>(val_set);

  RegressorResult result;
  double best_val = mean_loss(model, monitor);
  if (!std::isfinite(best_val)) throw ad::NonFiniteLoss("non-finite validation loss");
  result.history.push_back({0, mean_loss(model, train_set), best_val});
  RegressorParams best = model.params;
  int wait = 0;
  ad::AdamState adam;
  const ad::AdamConfig adam_config{config.learning_rate};
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0, weight = 0.0;
    for (const auto& idx : batches_of(order, config.batch_size)) {
      const SequenceBatch batch = make_batch(train_set, idx);
      if (batch.target_mask.sum() == 0.0) continue;
      ad::Tape tape;
      auto bound = bind<Regressor>(tape, model.params);
      Var loss;
      const BatchLoss b = run_batch(batch, bound, tape, &loss);
      if (!std::isfinite(b.loss)) throw ad::NonFiniteLoss("non-finite training loss");
      tape.backward(loss);
      auto grads = gradients(bound);
      clip_gradients(grads, kClipNorm);
      const auto ptrs = parameter_pointers(model.params);
      ad::adam_step(ptrs, grads, adam, adam_config);
      total += b.loss * b.weight;
      weight += b.weight;
    }
    const double val = mean_loss(model, monitor);
    if (!std::isfinite(val)) throw ad::NonFiniteLoss("non-finite validation loss");
    result.history.push_back({epoch, weight > 0.0 ? total / weight : 0.0, val});
    if (val < best_val - config.min_delta) {
      best_val = val;
      best = model.params;
      result.best_epoch = epoch;
      wait = 0;
    } else if (++wait > config.patience) {
      break;
    }
  }
  model.params = std::move(best);
  result.model = std::move(model);
  return result;
}

Predictions predict_rows(const RegressorModel& model, const Dataset& dataset) {
  const auto outputs = run_full(model, dataset);
  std::vector<double> pred, actual;
  for (std::size_t i = 0; i < dataset.subjects.size(); ++i) {
    const auto& steps = dataset.subjects[i].steps;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      if (!steps[t].target) continue;
      pred.push_back(outputs[i](static_cast<Eigen::Index>(t)));
      actual.push_back(*steps[t].target);
    }
  }
  Predictions p;
  p.predicted = Eigen::Map<Eigen::VectorXd>(pred.data(), static_cast<Eigen::Index>(pred.size()));
  p.actual = Eigen::Map<Eigen::VectorXd>(actual.data(), static_cast<Eigen::Index>(actual.size()));
  return p;
}

double rmse(const Eigen::VectorXd& predicted, const Eigen::VectorXd& actual) {
  if (predicted.size() != actual.size()) throw std::invalid_argument("rmse: length mismatch");
  if (predicted.size() == 0) return 0.0;
  return std::sqrt((predicted - actual).squaredNorm() / static_cast<double>(predicted.size()));
}

double evaluate(const RegressorModel& model, const Dataset& test_part) {
  const Predictions p = predict_rows(model, test_part);
  return rmse(p.predicted, p.actual);
}

Dataset predict_targets(const RegressorModel& model, const Dataset& generated) {
  const auto outputs = run_full(model, generated);
  Dataset out = generated;
  for (std::size_t i = 0; i < out.subjects.size(); ++i) {
    auto& steps = out.subjects[i].steps;
    for (std::size_t t = 0; t < steps.size(); ++t) steps[t].target = outputs[i](static_cast<Eigen::Index>(t));
  }
  return out;
}

Dataset predict_targets(const RegressorModel& model, const Dataset& generated, const Dataset& context,
                        const std::string& sequence_feature) {
  for (const auto& s : context.subjects) {
    for (const auto& step : s.steps) {
      if (!step.observed) throw std::invalid_argument("context dataset already holds generated rows");
    }
  }
  for (const auto& g : generated.subjects) {
    for (std::size_t t = 1; t < g.steps.size(); ++t) {
      if (g.steps[t].event_time < g.steps[t - 1].event_time) {
        throw std::invalid_argument("generated rows of " + g.subject_id + " are not time-ordered");
      }
    }
  }
  const Dataset merged = merge_by_id(context, generated, sequence_feature);
  const auto outputs = run_full(model, merged);
  Dataset out = generated;
  for (auto& g : out.subjects) {
    const std::size_t m = *merged.find(g.subject_id);
    const auto& steps = merged.subjects[m].steps;
    std::size_t k = 0;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      if (steps[t].observed) continue;
      g.steps.at(k++).target = outputs[m](static_cast<Eigen::Index>(t));
    }
  }
  return out;
}

std::string eval_csv_header() { return "dataset,model,padding,seed,rmse"; }

std::string eval_csv_row(const EvalResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", r.rmse);
  return r.dataset + ',' + r.model + ',' + r.padding + ',' + std::to_string(r.seed) + ',' + buf;
}

Selection select_best(std::span<const EvalResult> results) {
  if (results.empty()) throw std::invalid_argument("select_best: no results");
  std::vector<std::pair<std::string, std::string>> cells;
  std::map<std::pair<std::string, std::string>, std::pair<double, int>> sums;
  for (const auto& r : results) {
    const auto key = std::make_pair(r.model, r.padding);
    if (!sums.count(key)) cells.push_back(key);
    auto& [s, n] = sums[key];
    s += r.rmse;
    ++n;
  }
  Selection best;
  bool first = true;
  for (const auto& key : cells) {
    const auto [s, n] = sums[key];
    const double mean = s / n;
    if (first || mean < best.mean_rmse) {
      best = {key.first, key.second, mean};
      first = false;
    }
  }
  return best;
}

Checkpoint to_checkpoint(const RegressorModel& model) {
  Checkpoint ckpt;
  ckpt.meta = {{"model", "regressor"},
               {"config", to_json(model.config)},
               {"fixed_length", model.fixed_length},
               {"trained", model.trained}};
  auto& params = const_cast<RegressorParams&>(model.params);
  for (const auto& [name, m] : named_parameters(params)) ckpt.add(name, *m);
  if (model.scaler.fitted()) {
    ckpt.add("scaler.min", model.scaler.min());
    ckpt.add("scaler.max", model.scaler.max());
  }
  return ckpt;
}

RegressorModel from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("model", "") != "regressor") throw IoFailure("checkpoint is not a regressor");
  RegressorModel m;
  m.config = regressor_config_from_json(ckpt.meta.at("config"));
  m.fixed_length = ckpt.meta.at("fixed_length").get<Eigen::Index>();
  m.trained = ckpt.meta.value("trained", false);
  m.params.kind = m.config.kind;
  for (const auto& [name, ptr] : named_parameters(m.params)) *ptr = ckpt.tensor(name);
  m.scaler = MinMaxScaler(ckpt.tensor("scaler.min"), ckpt.tensor("scaler.max"));
  return m;
}

}  // namespace longimpute::pred
