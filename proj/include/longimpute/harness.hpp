#pragma once

// Experiment orchestration: configuration, the four on-disk phases, the
// multi-seed run matrix and report emission.
//
// Layout under out_dir:
//   input/     dataset.csv schedule.csv missing.csv splits.json manifest.json
//   generate/  <source>_seed<s>.ckpt, _history.csv, _missing.csv, _heldout.csv;
//              distances.csv, losses.csv, manifest.json
//   predict/   baseline.csv selection.json best_seed<s>.ckpt
//              <source>_seed<s>_labeled.csv manifest.json
//   retrain/   retrain.csv fractions.csv manifest.json
//   report/    rmse_by_padding.csv rmse_by_source.csv fraction_sweep.csv
//              feature_distance.csv generation_loss.csv summary.json
// Every manifest and report file carries the config hash; a phase refuses
// inputs written under a different hash.

#include "longimpute/generative.hpp"
#include "longimpute/predictors.hpp"
#include "longimpute/synth.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace longimpute::harness {

class ConfigInvalid : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Phase { Input, Generate, PredictTargets, Retrain };

const char* to_string(Phase phase);
Phase phase_from_string(const std::string& name);

struct ExperimentConfig {
  // Data: a synthetic spec, or CSV paths.
  std::optional<synth::SynthSpec> synth = synth::SynthSpec{};
  std::uint64_t data_seed = 7;
  std::string dataset_path;
  std::string schedule_path;
  std::string school_column = "school_id";

  std::vector<double> gen_ratios{0.5, 0.1, 0.2, 0.2};
  std::vector<double> pred_ratios{0.7, 0.1, 0.2};
  std::uint64_t split_seed = 0;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<Padding> paddings{Padding::Zero, Padding::Ffill, Padding::Bfill};
  /// 0 selects the corpus average rounded to 10.
  Eigen::Index fixed_length = 0;

  std::vector<gen::ModelKind> generators{gen::ModelKind::VaeNs, gen::ModelKind::Vae, gen::ModelKind::Lvae};
  gen::ElboConfig generative;
  /// Kernel override as written in the config (columns by index or name).
  std::optional<nlohmann::json> kernel;

  std::vector<pred::CellKind> regressors{pred::CellKind::Lstm, pred::CellKind::Gru};
  pred::RegressorConfig regressor;

  /// Percent of generated subjects imputed in the sweep, each in (0, 100].
  std::vector<double> fractions{10, 20, 30, 50, 80, 100};
  std::string sequence_feature = "sequence_number";
  std::filesystem::path out_dir = "run";

  void check() const;
};

/// Every field except out_dir (artifacts do not depend on where they live).
nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a 64 of the canonical JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// Deterministic seed derivation (splitmix64 over the parts).
std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

/// 1-D Wasserstein-1 distance between two empirical distributions.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

// ---- loaded inputs ----

struct Inputs {
  Dataset dataset;
  std::map<std::string, Schedule> schedules;
  std::vector<MissingSkeleton> skeletons;
  Eigen::Index fixed_length = 1;
};

/// Reads input/ (written by the Input phase) and checks its hash.
Inputs load_inputs(const ExperimentConfig& config);

SplitAssignment generation_split(const ExperimentConfig& config, const Dataset& dataset, gen::ModelKind source);
SplitAssignment prediction_split(const ExperimentConfig& config, const Dataset& dataset, ImputeMode mode);
ImputeMode impute_mode_of(gen::ModelKind source);

// ---- cells ----

pred::RegressorConfig regressor_config(const ExperimentConfig& config, pred::CellKind kind, Padding padding,
                                       Eigen::Index fixed_length);
std::uint64_t regressor_seed(std::uint64_t seed, pred::CellKind kind);
std::uint64_t selection_seed(std::uint64_t seed);

struct CellOutcome {
  pred::RegressorResult result;
  double val_rmse = 0.0;
  double test_rmse = 0.0;
};

/// Trains one regressor on `parts` and scores it on Val and Test.
CellOutcome run_cell(const ExperimentConfig& config, const PartDatasets& parts, pred::CellKind kind, Padding padding,
                     Eigen::Index fixed_length, std::uint64_t seed);

/// Imputes `fraction` of `labeled` into the prediction split of `source`
/// and runs one cell on the result.
CellOutcome retrain_cell(const ExperimentConfig& config, const Inputs& inputs, const Dataset& labeled,
                         gen::ModelKind source, double fraction, pred::CellKind kind, Padding padding,
                         std::uint64_t seed);

// ---- phases ----

void run_phase(const ExperimentConfig& config, Phase phase);

// ---- report ----

struct FractionResult {
  std::string source;
  std::string model;
  double fraction = 0.0;
  std::uint64_t seed = 0;
  double rmse = 0.0;
};

struct DistanceResult {
  std::string source;
  std::string feature;
  std::uint64_t seed = 0;
  double distance = 0.0;
};

struct LossResult {
  std::string source;
  std::uint64_t seed = 0;
  int best_epoch = 0;
  double val_loss = 0.0;
};

/// Aggregate over seeds of one keyed cell.
struct Cell {
  std::vector<std::string> keys;
  std::size_t n = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;

  bool operator==(const Cell&) const = default;
};

struct Table {
  std::vector<std::string> key_columns;
  std::vector<Cell> cells;

  const Cell* find(const std::vector<std::string>& keys) const;
  bool operator==(const Table&) const = default;
};

/// Groups (keys, value) rows in first-seen key order; mean is the plain sum
/// over the group divided by its size.
Table aggregate(std::vector<std::string> key_columns,
                const std::vector<std::pair<std::vector<std::string>, double>>& rows);

struct RunReport {
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  pred::Selection selection;
  std::vector<pred::EvalResult> baseline;      // dataset "original" (test) and "original_val"
  std::vector<pred::EvalResult> retrain;       // dataset = source
  std::vector<FractionResult> fractions;
  std::vector<DistanceResult> distances;
  std::vector<LossResult> losses;

  Table by_padding;        // model, padding
  Table by_source;         // source, model, padding (original at the selected padding)
  Table fraction_sweep;    // source, model, fraction
  Table feature_distance;  // source, feature
  Table generation_loss;   // source
};

/// Collects phase outputs from out_dir into a report.
RunReport collect_report(const ExperimentConfig& config);

/// Table CSV: a "# config_hash=<h> seeds=<s1;s2;...>" line, then
/// "<key columns...>,n,mean,min,max" and one row per cell.
std::string table_to_csv(const Table& table, const std::string& hash, std::span<const std::uint64_t> seeds);
Table parse_table_csv(const std::string& text);

/// Writes report/ under out_dir.
void emit_report(const RunReport& report, const std::filesystem::path& out_dir);

/// All four phases, then collect_report and emit_report.
RunReport run_matrix(const ExperimentConfig& config);

/// Raises the glibc mmap threshold so large temporary matrices are reused
/// rather than mapped and unmapped on every allocation. No-op elsewhere.
void tune_allocator();

}  // namespace longimpute::harness
