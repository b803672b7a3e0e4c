// Command-line front end for the imputation toolkit.
//
// Phase commands (train-gen, predict-targets, retrain, report, run-all) work
// on an experiment directory; the others are standalone file-to-file tools.

#include "longimpute/harness.hpp"
#include "longimpute/io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

using namespace longimpute;
namespace fs = std::filesystem;

struct Common {
  std::string config_path;
  std::string out_dir = "run";
  std::optional<std::uint64_t> seed;
};

struct Overrides {
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> paddings;
  std::vector<std::string> generators;
  std::vector<std::string> regressors;
  std::vector<double> fractions;
  std::vector<double> gen_ratios;
  std::vector<double> pred_ratios;
  std::optional<std::uint64_t> split_seed;
  std::optional<std::uint64_t> data_seed;
  std::optional<long> fixed_length;
  std::optional<int> gen_epochs;
  std::optional<int> pred_epochs;
  std::string dataset;
  std::string schedule;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Experiment config (JSON)");
  cmd->add_option("--out-dir", c.out_dir, "Output directory");
  cmd->add_option("--seed", c.seed, "Run seed (replaces the config seed list)");
}

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seeds", o.seeds, "Seed list");
  cmd->add_option("--paddings", o.paddings, "Padding strategies: zero ffill bfill");
  cmd->add_option("--generators", o.generators, "Generative sources: vae_ns vae lvae");
  cmd->add_option("--regressors", o.regressors, "Regressor cells: lstm gru");
  cmd->add_option("--fractions", o.fractions, "Imputed percentages, each in (0, 100]");
  cmd->add_option("--gen-ratios", o.gen_ratios, "Generation split ratios (4)");
  cmd->add_option("--pred-ratios", o.pred_ratios, "Prediction split ratios (3)");
  cmd->add_option("--split-seed", o.split_seed, "Split shuffle seed");
  cmd->add_option("--data-seed", o.data_seed, "Synthetic data seed");
  cmd->add_option("--fixed-length", o.fixed_length, "Aligned length T (0 = corpus default)");
  cmd->add_option("--gen-epochs", o.gen_epochs, "Generative max epochs");
  cmd->add_option("--pred-epochs", o.pred_epochs, "Regressor max epochs");
  cmd->add_option("--dataset", o.dataset, "Dataset CSV instead of synthetic data");
  cmd->add_option("--schedule", o.schedule, "Schedule CSV (with --dataset)");
}

harness::ExperimentConfig make_config(const Common& c, const Overrides& o) {
  harness::ExperimentConfig cfg = c.config_path.empty() ? harness::ExperimentConfig{} : harness::load_config(c.config_path);
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (c.seed) cfg.seeds = {*c.seed};
  if (!o.paddings.empty()) {
    cfg.paddings.clear();
    for (const auto& p : o.paddings) cfg.paddings.push_back(padding_from_string(p));
  }
  if (!o.generators.empty()) {
    cfg.generators.clear();
    for (const auto& g : o.generators) cfg.generators.push_back(gen::model_kind_from_string(g));
  }
  if (!o.regressors.empty()) {
    cfg.regressors.clear();
    for (const auto& r : o.regressors) cfg.regressors.push_back(pred::cell_kind_from_string(r));
  }
  if (!o.fractions.empty()) cfg.fractions = o.fractions;
  if (!o.gen_ratios.empty()) cfg.gen_ratios = o.gen_ratios;
  if (!o.pred_ratios.empty()) cfg.pred_ratios = o.pred_ratios;
  if (o.split_seed) cfg.split_seed = *o.split_seed;
  if (o.data_seed) cfg.data_seed = *o.data_seed;
  if (o.fixed_length) cfg.fixed_length = *o.fixed_length;
  if (o.gen_epochs) cfg.generative.max_epochs = *o.gen_epochs;
  if (o.pred_epochs) cfg.regressor.max_epochs = *o.pred_epochs;
  if (!o.dataset.empty()) {
    cfg.synth.reset();
    cfg.dataset_path = o.dataset;
    cfg.schedule_path = o.schedule;
  }
  cfg.out_dir = c.out_dir;
  cfg.check();
  return cfg;
}

void print_table(const std::string& title, const harness::Table& t) {
  std::cout << title << "\n";
  for (const auto& cell : t.cells) {
    std::string keys;
    for (const auto& k : cell.keys) keys += (keys.empty() ? "" : " ") + k;
    std::printf("  %-28s mean %.5f  min %.5f  max %.5f  (n=%zu)\n", keys.c_str(), cell.mean, cell.min, cell.max, cell.n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  harness::tune_allocator();
  CLI::App app{"Longitudinal imputation with LSTM-VAE / LSTM-LVAE generators"};
  app.require_subcommand(1);

  Common common;
  Overrides over;

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic corpus, its schedules and planted missing steps");
  add_common(synth_cmd, common);
  add_overrides(synth_cmd, over);

  std::string data_path, schedule_path, generated_path, checkpoint_path, school_column = "school_id";
  std::string mode = "subject";
  std::vector<double> ratios;
  double fraction = 100.0;
  std::string train_path, val_path, test_path, model_kind = "lstm", padding = "zero";

  auto* validate_cmd = app.add_subcommand("validate", "Check a dataset CSV against its invariants");
  add_common(validate_cmd, common);
  validate_cmd->add_option("--data", data_path, "Dataset CSV")->required();

  auto* split_cmd = app.add_subcommand("split", "Split a dataset CSV into part files");
  add_common(split_cmd, common);
  split_cmd->add_option("--data", data_path, "Dataset CSV")->required();
  split_cmd->add_option("--mode", mode, "subject or row")->check(CLI::IsMember({"subject", "row"}));
  split_cmd->add_option("--ratios", ratios, "Part ratios (3 or 4)")->required();

  auto* missing_cmd = app.add_subcommand("identify-missing", "List schedule steps each subject skipped");
  add_common(missing_cmd, common);
  missing_cmd->add_option("--data", data_path, "Dataset CSV")->required();
  missing_cmd->add_option("--schedule", schedule_path, "Schedule CSV")->required();
  missing_cmd->add_option("--school-column", school_column, "Column naming each subject's school");

  auto* train_gen_cmd = app.add_subcommand("train-gen", "Input and Generate phases of an experiment");
  add_common(train_gen_cmd, common);
  add_overrides(train_gen_cmd, over);

  auto* generate_cmd = app.add_subcommand("generate", "Generate rows for a skeleton CSV from a generator checkpoint");
  add_common(generate_cmd, common);
  generate_cmd->add_option("--checkpoint", checkpoint_path, "Generator checkpoint")->required();
  generate_cmd->add_option("--missing", schedule_path, "Skeleton CSV (subject_id,school_id,event_time)")->required();
  generate_cmd->add_option("--data", data_path, "Dataset CSV holding the subjects' descriptors")->required();

  auto* train_pred_cmd = app.add_subcommand("train-pred", "Train one regressor on part CSVs");
  add_common(train_pred_cmd, common);
  add_overrides(train_pred_cmd, over);
  train_pred_cmd->add_option("--train", train_path, "Training CSV")->required();
  train_pred_cmd->add_option("--val", val_path, "Validation CSV")->required();
  train_pred_cmd->add_option("--test", test_path, "Test CSV");
  train_pred_cmd->add_option("--model", model_kind, "lstm or gru")->check(CLI::IsMember({"lstm", "gru"}));
  train_pred_cmd->add_option("--padding", padding, "zero, ffill or bfill")->check(CLI::IsMember({"zero", "ffill", "bfill"}));

  auto* predict_cmd = app.add_subcommand("predict-targets", "PredictTargets phase of an experiment");
  add_common(predict_cmd, common);
  add_overrides(predict_cmd, over);

  auto* impute_cmd = app.add_subcommand("impute", "Merge labeled generated rows into the parts of a split");
  add_common(impute_cmd, common);
  impute_cmd->add_option("--data", data_path, "Original dataset CSV")->required();
  impute_cmd->add_option("--generated", generated_path, "Labeled generated CSV")->required();
  impute_cmd->add_option("--mode", mode, "subject (by id) or row")->check(CLI::IsMember({"subject", "row"}));
  impute_cmd->add_option("--ratios", ratios, "Part ratios (3)")->required();
  impute_cmd->add_option("--fraction", fraction, "Percent of generated subjects to impute");

  auto* retrain_cmd = app.add_subcommand("retrain", "Retrain phase of an experiment");
  add_common(retrain_cmd, common);
  add_overrides(retrain_cmd, over);

  auto* report_cmd = app.add_subcommand("report", "Aggregate phase outputs into report/");
  add_common(report_cmd, common);
  add_overrides(report_cmd, over);

  auto* run_all_cmd = app.add_subcommand("run-all", "All phases and the report");
  add_common(run_all_cmd, common);
  add_overrides(run_all_cmd, over);

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path out = common.out_dir;
    const std::uint64_t seed = common.seed.value_or(0);
    if (*synth_cmd) {
      auto cfg = make_config(common, over);
      const auto spec = cfg.synth.value_or(synth::SynthSpec{});
      const auto sr = synth::synth_generate(spec, common.seed.value_or(cfg.data_seed));
      io::write_dataset_csv(sr.dataset, out / "dataset.csv");
      io::write_text(out / "schedule.csv", io::schedule_to_csv(sr.schedules));
      std::string truth = "subject_id,event_time,target\n";
      for (const auto& [id, times] : sr.missing) {
        std::size_t k = 0;
        for (double t : times) truth += id + "," + io::format_double(t) + "," + io::format_double(sr.missing_targets.at(id)[k++]) + "\n";
      }
      io::write_text(out / "missing_truth.csv", truth);
      std::cout << "wrote " << sr.dataset.subjects.size() << " subjects, " << total_rows(sr.dataset) << " rows to " << out << "\n";
    } else if (*validate_cmd) {
      const auto violations = validate(io::read_dataset_csv(data_path));
      for (const auto& v : violations) std::cout << to_string(v.kind) << " " << v.subject_id << ": " << v.detail << "\n";
      std::cout << violations.size() << " violations\n";
      return violations.empty() ? 0 : 1;
    } else if (*split_cmd) {
      const Dataset d = io::read_dataset_csv(data_path);
      const auto s = split(d, mode == "row" ? SplitMode::RowBased : SplitMode::SubjectBased, ratios, seed);
      for (const auto& [name, part] : materialize(d, s)) {
        io::write_dataset_csv(part, out / (std::string(to_string(name)) + ".csv"));
        std::cout << to_string(name) << ": " << part.subjects.size() << " subjects, " << total_rows(part) << " rows\n";
      }
    } else if (*missing_cmd) {
      const Dataset d = io::read_dataset_csv(data_path);
      const auto schedules = io::parse_schedule_csv(io::read_text(schedule_path));
      const auto skeletons = identify_missing(d, school_map(d, school_column), schedules);
      io::write_text(out / "missing.csv", io::skeleton_to_csv(skeletons));
      std::size_t n = 0;
      for (const auto& s : skeletons) n += s.times.size();
      std::cout << n << " missing steps over " << skeletons.size() << " subjects\n";
    } else if (*train_gen_cmd) {
      auto cfg = make_config(common, over);
      harness::run_phase(cfg, harness::Phase::Input);
      harness::run_phase(cfg, harness::Phase::Generate);
    } else if (*generate_cmd) {
      const Dataset d = io::read_dataset_csv(data_path);
      const auto model = gen::from_checkpoint(load_checkpoint(checkpoint_path));
      const auto skeletons = io::parse_skeleton_csv(io::read_text(schedule_path), d);
      Dataset g = gen::generate_missing(model, skeletons, seed);
      g.category_labels = d.category_labels;
      io::write_dataset_csv(g, out / "generated.csv");
      std::cout << total_rows(g) << " generated rows\n";
    } else if (*train_pred_cmd) {
      auto cfg = make_config(common, over);
      const Dataset train = io::read_dataset_csv(train_path);
      const Dataset val = io::read_dataset_csv(val_path, &train.category_labels);
      const auto kind = pred::cell_kind_from_string(model_kind);
      const auto rc = harness::regressor_config(cfg, kind, padding_from_string(padding),
                                                cfg.fixed_length);
      const auto r = pred::train_regressor(train, val, rc, seed);
      save_checkpoint(pred::to_checkpoint(r.model), out / "regressor.ckpt");
      std::printf("best epoch %d, val rmse %.6f\n", r.best_epoch, pred::evaluate(r.model, val));
      if (!test_path.empty()) {
        std::printf("test rmse %.6f\n", pred::evaluate(r.model, io::read_dataset_csv(test_path, &train.category_labels)));
      }
    } else if (*predict_cmd) {
      auto cfg = make_config(common, over);
      harness::run_phase(cfg, harness::Phase::PredictTargets);
    } else if (*impute_cmd) {
      const Dataset d = io::read_dataset_csv(data_path);
      const Dataset g = io::read_dataset_csv(generated_path, &d.category_labels);
      const bool by_row = mode == "row";
      const auto s = split(d, by_row ? SplitMode::RowBased : SplitMode::SubjectBased, ratios, seed);
      const auto parts = impute(d, s, g, by_row ? ImputeMode::ByRow : ImputeMode::ById, fraction / 100.0,
                                harness::selection_seed(seed));
      for (const auto& [name, part] : parts) {
        io::write_dataset_csv(part, out / (std::string(to_string(name)) + ".csv"));
        std::cout << to_string(name) << ": " << part.subjects.size() << " subjects, " << total_rows(part) << " rows\n";
      }
    } else if (*retrain_cmd) {
      auto cfg = make_config(common, over);
      harness::run_phase(cfg, harness::Phase::Retrain);
    } else if (*report_cmd || *run_all_cmd) {
      auto cfg = make_config(common, over);
      const auto report = *run_all_cmd ? harness::run_matrix(cfg) : harness::collect_report(cfg);
      if (*report_cmd) harness::emit_report(report, cfg.out_dir);
      std::cout << "config " << report.config_hash << ", selected " << report.selection.model << "/"
                << report.selection.padding << "\n";
      print_table("rmse by padding", report.by_padding);
      print_table("rmse by source", report.by_source);
      print_table("generation val loss", report.generation_loss);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
