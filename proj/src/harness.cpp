#include "longimpute/harness.hpp"

#include "longimpute/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace longimpute::harness {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kConfigKeys = {
    "synth",      "data_seed",  "dataset",    "schedule",   "school_column", "gen_ratios",       "pred_ratios",
    "split_seed", "seeds",      "paddings",   "fixed_length", "generators",  "generative",       "kernel",
    "regressors", "regressor",  "fractions",  "sequence_feature", "out_dir"};

std::string hash_line(const std::string& hash, std::span<const std::uint64_t> seeds) {
  std::string out = "# config_hash=" + hash + " seeds=";
  for (std::size_t i = 0; i < seeds.size(); ++i) out += (i ? ";" : "") + std::to_string(seeds[i]);
  return out + "\n";
}

void write_manifest(const fs::path& dir, const ExperimentConfig& config, Phase phase) {
  nlohmann::json m{{"config_hash", config_hash(config)}, {"phase", to_string(phase)}, {"seeds", config.seeds}};
  io::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

void require_manifest(const fs::path& dir, const ExperimentConfig& config) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) throw MissingArtifact("missing " + path.string() + "; run the earlier phase first");
  const auto m = nlohmann::json::parse(io::read_text(path));
  if (m.value("config_hash", "") != config_hash(config)) {
    throw ConfigInvalid(path.string() + " was written under a different config");
  }
}

// Rows of a results CSV written by this module, after checking its hash line.
std::vector<std::vector<std::string>> read_results(const fs::path& path, const std::string& hash) {
  const std::string text = io::read_text(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# config_hash=" + hash + " ", 0) != 0) {
    throw ConfigInvalid(path.string() + " does not carry config hash " + hash);
  }
  std::getline(in, line);  // header
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(io::split_csv_line(line));
  }
  return rows;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw IoFailure("bad number " + s);
  return v;
}

std::string fraction_key(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", f);
  return buf;
}

std::string source_file(const fs::path& dir, gen::ModelKind source, std::uint64_t seed, const char* suffix) {
  return (dir / (std::string(gen::to_string(source)) + "_seed" + std::to_string(seed) + suffix)).string();
}

std::vector<double> column_of(const Dataset& d, std::size_t k) {
  std::vector<double> out;
  for (const auto& s : d.subjects) {
    for (const auto& step : s.steps) {
      if (step.features.size() > 0) out.push_back(step.features(static_cast<Eigen::Index>(k)));
    }
  }
  return out;
}

gen::ElboConfig elbo_config(const ExperimentConfig& config, const Dataset& dataset, Eigen::Index fixed_length) {
  gen::ElboConfig ec = config.generative;
  ec.fixed_length = fixed_length;
  if (config.kernel) {
    std::vector<std::string> columns;
    for (const auto& f : dataset.descriptor_schema) columns.push_back(f.name);
    if (ec.use_event_time) columns.push_back("event_time");
    ec.kernel = gen::kernel_from_json(*config.kernel, &columns);
  }
  return ec;
}

fs::path dir_of(const ExperimentConfig& config, const char* name) { return config.out_dir / name; }

void phase_input(const ExperimentConfig& config) {
  const fs::path dir = dir_of(config, "input");
  fs::create_directories(dir);
  if (config.synth) {
    const auto sr = synth::synth_generate(*config.synth, config.data_seed);
    io::write_dataset_csv(sr.dataset, dir / "dataset.csv");
    io::write_text(dir / "schedule.csv", io::schedule_to_csv(sr.schedules));
  } else {
    io::write_dataset_csv(io::read_dataset_csv(config.dataset_path), dir / "dataset.csv");
    io::write_text(dir / "schedule.csv", io::schedule_to_csv(io::parse_schedule_csv(io::read_text(config.schedule_path))));
  }
  const Dataset dataset = io::read_dataset_csv(dir / "dataset.csv");
  const auto violations = validate(dataset);
  if (!violations.empty()) {
    throw ConfigInvalid("dataset is not well-formed (" + std::to_string(violations.size()) +
                        " violations, first: " + violations.front().detail + ")");
  }
  const auto schedules = io::parse_schedule_csv(io::read_text(dir / "schedule.csv"));
  const auto skeletons = identify_missing(dataset, school_map(dataset, config.school_column), schedules);
  io::write_text(dir / "missing.csv", io::skeleton_to_csv(skeletons));

  nlohmann::json splits = nlohmann::json::object();
  auto describe = [&](const std::string& name, const SplitAssignment& s) {
    nlohmann::json parts = nlohmann::json::object();
    for (const auto& p : s.parts) parts[to_string(p.name)] = {{"subjects", p.subject_ids.size()}, {"rows", p.rows.size()}};
    splits[name] = {{"mode", s.mode == SplitMode::SubjectBased ? "subject" : "row"}, {"ratios", s.ratios}, {"parts", parts}};
  };
  describe("generation_by_subject", split(dataset, SplitMode::SubjectBased, config.gen_ratios, config.split_seed));
  describe("generation_by_row", split(dataset, SplitMode::RowBased, config.gen_ratios, config.split_seed));
  describe("prediction_by_subject", split(dataset, SplitMode::SubjectBased, config.pred_ratios, config.split_seed));
  describe("prediction_by_row", split(dataset, SplitMode::RowBased, config.pred_ratios, config.split_seed));
  io::write_text(dir / "splits.json", splits.dump(2) + "\n");
  write_manifest(dir, config, Phase::Input);
}

void phase_generate(const ExperimentConfig& config) {
  const Inputs in = load_inputs(config);
  const fs::path dir = dir_of(config, "generate");
  fs::create_directories(dir);
  const std::string hash = config_hash(config);
  const PartDatasets reference =
      materialize(in.dataset, generation_split(config, in.dataset, gen::ModelKind::Vae));
  const Dataset& heldout = reference.at(PartName::Generate);
  const auto heldout_skeleton = skeleton_of(heldout);

  std::string distances = hash_line(hash, config.seeds) + "source,feature,seed,distance\n";
  std::string losses = hash_line(hash, config.seeds) + "source,seed,best_epoch,val_loss\n";
  for (const auto seed : config.seeds) {
    for (const auto source : config.generators) {
      const auto tag = static_cast<std::uint64_t>(source) + 1;
      const PartDatasets parts = materialize(in.dataset, generation_split(config, in.dataset, source));
      // Every generator starts from the same network weights and batch order
      // for a given seed, so the models are compared pairwise.
      const auto result = gen::train(source, parts.at(PartName::Train), parts.at(PartName::Val),
                                     elbo_config(config, in.dataset, in.fixed_length), derive_seed(seed, 1, 1));
      save_checkpoint(gen::to_checkpoint(result.model), source_file(dir, source, seed, ".ckpt"));
      io::write_text(source_file(dir, source, seed, "_history.csv"), gen::history_csv(result.history));

      Dataset generated = gen::generate_missing(result.model, in.skeletons, derive_seed(seed, tag, 2));
      generated.category_labels = in.dataset.category_labels;
      io::write_dataset_csv(generated, source_file(dir, source, seed, "_missing.csv"));

      Dataset quality = gen::generate_missing(result.model, heldout_skeleton, derive_seed(seed, tag, 3));
      quality.category_labels = in.dataset.category_labels;
      io::write_dataset_csv(quality, source_file(dir, source, seed, "_heldout.csv"));
      for (std::size_t k = 0; k < in.dataset.feature_schema.size(); ++k) {
        const double w = wasserstein_1d(column_of(quality, k), column_of(heldout, k));
        distances += std::string(gen::to_string(source)) + "," + in.dataset.feature_schema[k] + "," +
                     std::to_string(seed) + "," + io::format_double(w) + "\n";
      }
      losses += std::string(gen::to_string(source)) + "," + std::to_string(seed) + "," +
                std::to_string(result.best_epoch) + "," +
                io::format_double(result.history[static_cast<std::size_t>(result.best_epoch)].val_loss) + "\n";
    }
  }
  io::write_text(dir / "distances.csv", distances);
  io::write_text(dir / "losses.csv", losses);
  write_manifest(dir, config, Phase::Generate);
}

void phase_predict(const ExperimentConfig& config) {
  const Inputs in = load_inputs(config);
  require_manifest(dir_of(config, "generate"), config);
  const fs::path gen_dir = dir_of(config, "generate");
  const fs::path dir = dir_of(config, "predict");
  fs::create_directories(dir);
  const std::string hash = config_hash(config);
  const PartDatasets parts = materialize(in.dataset, prediction_split(config, in.dataset, ImputeMode::ById));

  std::vector<pred::EvalResult> rows, val_rows;
  std::map<std::tuple<std::uint64_t, pred::CellKind, Padding>, pred::RegressorModel> models;
  for (const auto seed : config.seeds) {
    for (const auto kind : config.regressors) {
      for (const auto padding : config.paddings) {
        const CellOutcome o = run_cell(config, parts, kind, padding, in.fixed_length, seed);
        rows.push_back({"original", pred::to_string(kind), to_string(padding), seed, o.test_rmse});
        val_rows.push_back({"original_val", pred::to_string(kind), to_string(padding), seed, o.val_rmse});
        models.emplace(std::make_tuple(seed, kind, padding), o.result.model);
      }
    }
  }
  const pred::Selection sel = pred::select_best(val_rows);
  std::string csv = hash_line(hash, config.seeds) + pred::eval_csv_header() + "\n";
  for (const auto& r : rows) csv += pred::eval_csv_row(r) + "\n";
  for (const auto& r : val_rows) csv += pred::eval_csv_row(r) + "\n";
  io::write_text(dir / "baseline.csv", csv);
  nlohmann::json sj{{"config_hash", hash},
                    {"model", sel.model},
                    {"padding", sel.padding},
                    {"mean_val_rmse", sel.mean_rmse},
                    {"rule", "global minimum of mean validation RMSE over model x padding cells"}};
  io::write_text(dir / "selection.json", sj.dump(2) + "\n");

  const auto kind = pred::cell_kind_from_string(sel.model);
  const auto padding = padding_from_string(sel.padding);
  for (const auto seed : config.seeds) {
    const auto& best = models.at(std::make_tuple(seed, kind, padding));
    save_checkpoint(pred::to_checkpoint(best), dir / ("best_seed" + std::to_string(seed) + ".ckpt"));
    for (const auto source : config.generators) {
      const Dataset generated = io::read_dataset_csv(source_file(gen_dir, source, seed, "_missing.csv"),
                                                     &in.dataset.category_labels);
      Dataset labeled = pred::predict_targets(best, generated, in.dataset, config.sequence_feature);
      io::write_dataset_csv(labeled, source_file(dir, source, seed, "_labeled.csv"));
    }
  }
  write_manifest(dir, config, Phase::PredictTargets);
}

pred::Selection read_selection(const ExperimentConfig& config) {
  const auto j = nlohmann::json::parse(io::read_text(dir_of(config, "predict") / "selection.json"));
  if (j.value("config_hash", "") != config_hash(config)) throw ConfigInvalid("selection.json has a different config hash");
  return {j.at("model").get<std::string>(), j.at("padding").get<std::string>(), j.at("mean_val_rmse").get<double>()};
}

void phase_retrain(const ExperimentConfig& config) {
  const Inputs in = load_inputs(config);
  require_manifest(dir_of(config, "predict"), config);
  const fs::path pred_dir = dir_of(config, "predict");
  const fs::path dir = dir_of(config, "retrain");
  fs::create_directories(dir);
  const std::string hash = config_hash(config);
  const pred::Selection sel = read_selection(config);
  const Padding padding = padding_from_string(sel.padding);

  std::string retrain = hash_line(hash, config.seeds) + pred::eval_csv_header() + "\n";
  std::string fractions = hash_line(hash, config.seeds) + "source,model,fraction,seed,rmse\n";
  for (const auto source : config.generators) {
    std::map<std::uint64_t, Dataset> labeled;
    for (const auto seed : config.seeds) {
      labeled[seed] = io::read_dataset_csv(source_file(pred_dir, source, seed, "_labeled.csv"), &in.dataset.category_labels);
    }
    for (const auto kind : config.regressors) {
      for (const auto seed : config.seeds) {
        const CellOutcome o = retrain_cell(config, in, labeled[seed], source, 1.0, kind, padding, seed);
        retrain += pred::eval_csv_row({gen::to_string(source), pred::to_string(kind), sel.padding, seed, o.test_rmse}) + "\n";
      }
    }
    if (impute_mode_of(source) != ImputeMode::ById) continue;
    for (const double f : config.fractions) {
      for (const auto kind : config.regressors) {
        for (const auto seed : config.seeds) {
          const CellOutcome o = retrain_cell(config, in, labeled[seed], source, f / 100.0, kind, padding, seed);
          fractions += std::string(gen::to_string(source)) + "," + pred::to_string(kind) + "," + fraction_key(f) + "," +
                       std::to_string(seed) + "," + io::format_double(o.test_rmse) + "\n";
        }
      }
    }
  }
  io::write_text(dir / "retrain.csv", retrain);
  io::write_text(dir / "fractions.csv", fractions);
  write_manifest(dir, config, Phase::Retrain);
}

}  // namespace

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::Input: return "input";
    case Phase::Generate: return "generate";
    case Phase::PredictTargets: return "predict_targets";
    case Phase::Retrain: return "retrain";
  }
  return "?";
}

Phase phase_from_string(const std::string& name) {
  if (name == "input") return Phase::Input;
  if (name == "generate") return Phase::Generate;
  if (name == "predict_targets") return Phase::PredictTargets;
  if (name == "retrain") return Phase::Retrain;
  throw ConfigInvalid("unknown phase: " + name);
}

void ExperimentConfig::check() const {
  auto check_ratios = [](const std::vector<double>& r, std::size_t n, const char* what) {
    if (r.size() != n) throw ConfigInvalid(std::string(what) + " needs " + std::to_string(n) + " ratios");
    double sum = 0.0;
    for (double v : r) {
      if (!(v > 0.0)) throw ConfigInvalid(std::string(what) + " ratios must be positive");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigInvalid(std::string(what) + " ratios must sum to 1");
  };
  check_ratios(gen_ratios, 4, "gen_ratios");
  check_ratios(pred_ratios, 3, "pred_ratios");
  if (seeds.empty()) throw ConfigInvalid("seeds must not be empty");
  if (paddings.empty()) throw ConfigInvalid("paddings must not be empty");
  if (generators.empty() || regressors.empty()) throw ConfigInvalid("generators and regressors must not be empty");
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 100.0)) throw ConfigInvalid("fractions must lie in (0, 100]");
  }
  if (fixed_length < 0) throw ConfigInvalid("fixed_length must be non-negative");
  if (!synth && (dataset_path.empty() || schedule_path.empty())) {
    throw ConfigInvalid("config needs either a synth spec or dataset and schedule paths");
  }
  try {
    generative.check();
    regressor.check();
    if (synth) synth->check();
  } catch (const std::invalid_argument& e) {
    throw ConfigInvalid(e.what());
  }
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["synth"] = c.synth ? synth::to_json(*c.synth) : nlohmann::json(nullptr);
  j["data_seed"] = c.data_seed;
  j["dataset"] = c.dataset_path;
  j["schedule"] = c.schedule_path;
  j["school_column"] = c.school_column;
  j["gen_ratios"] = c.gen_ratios;
  j["pred_ratios"] = c.pred_ratios;
  j["split_seed"] = c.split_seed;
  j["seeds"] = c.seeds;
  j["paddings"] = nlohmann::json::array();
  for (auto p : c.paddings) j["paddings"].push_back(to_string(p));
  j["fixed_length"] = c.fixed_length;
  j["generators"] = nlohmann::json::array();
  for (auto g : c.generators) j["generators"].push_back(gen::to_string(g));
  j["generative"] = gen::to_json(c.generative);
  j["kernel"] = c.kernel ? *c.kernel : nlohmann::json(nullptr);
  j["regressors"] = nlohmann::json::array();
  for (auto r : c.regressors) j["regressors"].push_back(pred::to_string(r));
  j["regressor"] = pred::to_json(c.regressor);
  j["fractions"] = c.fractions;
  j["sequence_feature"] = c.sequence_feature;
  return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigInvalid("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!kConfigKeys.count(key)) throw ConfigInvalid("unknown config key: " + key);
  }
  ExperimentConfig c;
  try {
    if (j.contains("synth")) c.synth = j.at("synth").is_null() ? std::nullopt
                                                                : std::optional(synth::synth_spec_from_json(j.at("synth")));
    c.data_seed = j.value("data_seed", c.data_seed);
    c.dataset_path = j.value("dataset", c.dataset_path);
    c.schedule_path = j.value("schedule", c.schedule_path);
    if (!c.dataset_path.empty() && !j.contains("synth")) c.synth.reset();
    c.school_column = j.value("school_column", c.school_column);
    c.gen_ratios = j.value("gen_ratios", c.gen_ratios);
    c.pred_ratios = j.value("pred_ratios", c.pred_ratios);
    c.split_seed = j.value("split_seed", c.split_seed);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("paddings")) {
      c.paddings.clear();
      for (const auto& p : j.at("paddings")) c.paddings.push_back(padding_from_string(p.get<std::string>()));
    }
    c.fixed_length = j.value("fixed_length", c.fixed_length);
    if (j.contains("generators")) {
      c.generators.clear();
      for (const auto& g : j.at("generators")) c.generators.push_back(gen::model_kind_from_string(g.get<std::string>()));
    }
    if (j.contains("generative")) c.generative = gen::elbo_config_from_json(j.at("generative"));
    if (j.contains("kernel") && !j.at("kernel").is_null()) c.kernel = j.at("kernel");
    if (j.contains("regressors")) {
      c.regressors.clear();
      for (const auto& r : j.at("regressors")) c.regressors.push_back(pred::cell_kind_from_string(r.get<std::string>()));
    }
    if (j.contains("regressor")) c.regressor = pred::regressor_config_from_json(j.at("regressor"));
    c.fractions = j.value("fractions", c.fractions);
    c.sequence_feature = j.value("sequence_feature", c.sequence_feature);
    c.out_dir = j.value("out_dir", c.out_dir.string());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigInvalid(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigInvalid(std::string("config: ") + e.what());
  }
  c.check();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  try {
    return config_from_json(nlohmann::json::parse(io::read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigInvalid(path.string() + ": " + e.what());
  }
}

std::string config_hash(const ExperimentConfig& config) {
  const std::string text = to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(a) ^ b) ^ c);
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein_1d needs two non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<double> all(a);
  all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  const auto na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  double total = 0.0;
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k + 1 < all.size(); ++k) {
    while (ia < a.size() && a[ia] <= all[k]) ++ia;
    while (ib < b.size() && b[ib] <= all[k]) ++ib;
    total += std::abs(static_cast<double>(ia) / na - static_cast<double>(ib) / nb) * (all[k + 1] - all[k]);
  }
  return total;
}

Inputs load_inputs(const ExperimentConfig& config) {
  const fs::path dir = dir_of(config, "input");
  require_manifest(dir, config);
  Inputs in;
  in.dataset = io::read_dataset_csv(dir / "dataset.csv");
  in.schedules = io::parse_schedule_csv(io::read_text(dir / "schedule.csv"));
  in.skeletons = io::parse_skeleton_csv(io::read_text(dir / "missing.csv"), in.dataset);
  in.fixed_length = config.fixed_length > 0 ? config.fixed_length : default_fixed_length(in.dataset);
  return in;
}

ImputeMode impute_mode_of(gen::ModelKind source) {
  return source == gen::ModelKind::VaeNs ? ImputeMode::ByRow : ImputeMode::ById;
}

SplitAssignment generation_split(const ExperimentConfig& config, const Dataset& dataset, gen::ModelKind source) {
  const auto mode = impute_mode_of(source) == ImputeMode::ByRow ? SplitMode::RowBased : SplitMode::SubjectBased;
  return split(dataset, mode, config.gen_ratios, config.split_seed);
}

SplitAssignment prediction_split(const ExperimentConfig& config, const Dataset& dataset, ImputeMode mode) {
  const auto smode = mode == ImputeMode::ByRow ? SplitMode::RowBased : SplitMode::SubjectBased;
  return split(dataset, smode, config.pred_ratios, config.split_seed);
}

pred::RegressorConfig regressor_config(const ExperimentConfig& config, pred::CellKind kind, Padding padding,
                                       Eigen::Index fixed_length) {
  pred::RegressorConfig rc = config.regressor;
  rc.kind = kind;
  rc.padding = padding;
  rc.fixed_length = fixed_length;
  return rc;
}

std::uint64_t regressor_seed(std::uint64_t seed, pred::CellKind kind) {
  return derive_seed(seed, 100 + static_cast<std::uint64_t>(kind));
}

std::uint64_t selection_seed(std::uint64_t seed) { return derive_seed(seed, 200); }

CellOutcome run_cell(const ExperimentConfig& config, const PartDatasets& parts, pred::CellKind kind, Padding padding,
                     Eigen::Index fixed_length, std::uint64_t seed) {
  CellOutcome o;
  o.result = pred::train_regressor(parts.at(PartName::Train), parts.at(PartName::Val),
                                   regressor_config(config, kind, padding, fixed_length), regressor_seed(seed, kind));
  o.val_rmse = pred::evaluate(o.result.model, parts.at(PartName::Val));
  o.test_rmse = pred::evaluate(o.result.model, parts.at(PartName::Test));
  return o;
}

CellOutcome retrain_cell(const ExperimentConfig& config, const Inputs& inputs, const Dataset& labeled,
                         gen::ModelKind source, double fraction, pred::CellKind kind, Padding padding,
                         std::uint64_t seed) {
  const ImputeMode mode = impute_mode_of(source);
  const SplitAssignment s = prediction_split(config, inputs.dataset, mode);
  const PartDatasets parts =
      impute(inputs.dataset, s, labeled, mode, fraction, selection_seed(seed), config.sequence_feature);
  return run_cell(config, parts, kind, padding, inputs.fixed_length, seed);
}

void run_phase(const ExperimentConfig& config, Phase phase) {
  config.check();
  switch (phase) {
    case Phase::Input: return phase_input(config);
    case Phase::Generate: return phase_generate(config);
    case Phase::PredictTargets: return phase_predict(config);
    case Phase::Retrain: return phase_retrain(config);
  }
}

const Cell* Table::find(const std::vector<std::string>& keys) const {
  for (const auto& c : cells) {
    if (c.keys == keys) return &c;
  }
  return nullptr;
}

Table aggregate(std::vector<std::string> key_columns,
                const std::vector<std::pair<std::vector<std::string>, double>>& rows) {
  Table t;
  t.key_columns = std::move(key_columns);
  std::vector<std::vector<double>> values;
  for (const auto& [keys, v] : rows) {
    if (keys.size() != t.key_columns.size()) throw std::invalid_argument("aggregate: key arity mismatch");
    std::size_t i = 0;
    while (i < t.cells.size() && t.cells[i].keys != keys) ++i;
    if (i == t.cells.size()) {
      t.cells.push_back({keys, 0, 0.0, 0.0, 0.0});
      values.emplace_back();
    }
    values[i].push_back(v);
  }
  for (std::size_t i = 0; i < t.cells.size(); ++i) {
    auto& c = t.cells[i];
    double sum = 0.0;
    for (double v : values[i]) sum += v;
    c.n = values[i].size();
    c.mean = sum / static_cast<double>(c.n);
    c.min = *std::min_element(values[i].begin(), values[i].end());
    c.max = *std::max_element(values[i].begin(), values[i].end());
  }
  return t;
}

RunReport collect_report(const ExperimentConfig& config) {
  for (const char* d : {"input", "generate", "predict", "retrain"}) require_manifest(dir_of(config, d), config);
  RunReport r;
  r.config_hash = config_hash(config);
  r.seeds = config.seeds;
  r.selection = read_selection(config);
  for (const auto& row : read_results(dir_of(config, "predict") / "baseline.csv", r.config_hash)) {
    r.baseline.push_back({row.at(0), row.at(1), row.at(2), std::stoull(row.at(3)), to_double(row.at(4))});
  }
  for (const auto& row : read_results(dir_of(config, "retrain") / "retrain.csv", r.config_hash)) {
    r.retrain.push_back({row.at(0), row.at(1), row.at(2), std::stoull(row.at(3)), to_double(row.at(4))});
  }
  for (const auto& row : read_results(dir_of(config, "retrain") / "fractions.csv", r.config_hash)) {
    r.fractions.push_back({row.at(0), row.at(1), to_double(row.at(2)), std::stoull(row.at(3)), to_double(row.at(4))});
  }
  for (const auto& row : read_results(dir_of(config, "generate") / "distances.csv", r.config_hash)) {
    r.distances.push_back({row.at(0), row.at(1), std::stoull(row.at(2)), to_double(row.at(3))});
  }
  for (const auto& row : read_results(dir_of(config, "generate") / "losses.csv", r.config_hash)) {
    r.losses.push_back({row.at(0), std::stoull(row.at(1)), std::stoi(row.at(2)), to_double(row.at(3))});
  }

  std::vector<std::pair<std::vector<std::string>, double>> rows;
  for (const auto& e : r.baseline) {
    if (e.dataset == "original") rows.push_back({{e.model, e.padding}, e.rmse});
  }
  r.by_padding = aggregate({"model", "padding"}, rows);

  rows.clear();
  for (const auto& e : r.baseline) {
    if (e.dataset == "original" && e.padding == r.selection.padding) rows.push_back({{"original", e.model, e.padding}, e.rmse});
  }
  for (const auto& e : r.retrain) rows.push_back({{e.dataset, e.model, e.padding}, e.rmse});
  r.by_source = aggregate({"source", "model", "padding"}, rows);

  rows.clear();
  for (const auto& f : r.fractions) rows.push_back({{f.source, f.model, fraction_key(f.fraction)}, f.rmse});
  r.fraction_sweep = aggregate({"source", "model", "fraction"}, rows);

  rows.clear();
  for (const auto& d : r.distances) rows.push_back({{d.source, d.feature}, d.distance});
  r.feature_distance = aggregate({"source", "feature"}, rows);

  rows.clear();
  for (const auto& l : r.losses) rows.push_back({{l.source}, l.val_loss});
  r.generation_loss = aggregate({"source"}, rows);
  return r;
}

std::string table_to_csv(const Table& table, const std::string& hash, std::span<const std::uint64_t> seeds) {
  std::string out = hash_line(hash, seeds);
  for (const auto& k : table.key_columns) out += k + ",";
  out += "n,mean,min,max\n";
  for (const auto& c : table.cells) {
    for (const auto& k : c.keys) out += k + ",";
    out += std::to_string(c.n) + "," + io::format_double(c.mean) + "," + io::format_double(c.min) + "," +
           io::format_double(c.max) + "\n";
  }
  return out;
}

Table parse_table_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') lines.push_back(line);
  }
  if (lines.empty()) throw IoFailure("table CSV has no header");
  auto header = io::split_csv_line(lines[0]);
  if (header.size() < 4 || header[header.size() - 4] != "n") throw IoFailure("table CSV header must end with n,mean,min,max");
  Table t;
  t.key_columns.assign(header.begin(), header.end() - 4);
  const std::size_t k = t.key_columns.size();
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = io::split_csv_line(lines[i]);
    if (cells.size() != header.size()) throw IoFailure("table CSV row has the wrong width");
    Cell c;
    c.keys.assign(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(k));
    c.n = std::stoull(cells[k]);
    c.mean = to_double(cells[k + 1]);
    c.min = to_double(cells[k + 2]);
    c.max = to_double(cells[k + 3]);
    t.cells.push_back(std::move(c));
  }
  return t;
}

void emit_report(const RunReport& report, const fs::path& out_dir) {
  const fs::path dir = out_dir / "report";
  fs::create_directories(dir);
  io::write_text(dir / "rmse_by_padding.csv", table_to_csv(report.by_padding, report.config_hash, report.seeds));
  io::write_text(dir / "rmse_by_source.csv", table_to_csv(report.by_source, report.config_hash, report.seeds));
  io::write_text(dir / "fraction_sweep.csv", table_to_csv(report.fraction_sweep, report.config_hash, report.seeds));
  io::write_text(dir / "feature_distance.csv", table_to_csv(report.feature_distance, report.config_hash, report.seeds));
  io::write_text(dir / "generation_loss.csv", table_to_csv(report.generation_loss, report.config_hash, report.seeds));

  nlohmann::json s;
  s["config_hash"] = report.config_hash;
  s["seeds"] = report.seeds;
  s["selection"] = {{"model", report.selection.model},
                    {"padding", report.selection.padding},
                    {"mean_val_rmse", report.selection.mean_rmse},
                    {"rule", "global minimum of mean validation RMSE over model x padding cells"},
                    {"source", "predict/selection.json"}};
  nlohmann::json sources = nlohmann::json::object();
  for (const auto& c : report.by_source.cells) sources[c.keys[0] + "/" + c.keys[1]] = c.mean;
  s["mean_rmse_by_source"] = sources;
  nlohmann::json losses = nlohmann::json::object();
  for (const auto& c : report.generation_loss.cells) losses[c.keys[0]] = c.mean;
  s["mean_generation_val_loss"] = losses;
  io::write_text(dir / "summary.json", s.dump(2) + "\n");
}

RunReport run_matrix(const ExperimentConfig& config) {
  for (Phase p : {Phase::Input, Phase::Generate, Phase::PredictTargets, Phase::Retrain}) run_phase(config, p);
  RunReport report = collect_report(config);
  emit_report(report, config.out_dir);
  return report;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace longimpute::harness
