#include "longimpute/harness.hpp"
#include "longimpute/io.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

namespace {

using namespace longimpute;
namespace fs = std::filesystem;
using harness::ConfigInvalid;
using harness::ExperimentConfig;

ExperimentConfig tiny_config(const std::string& dir) {
  ExperimentConfig c;
  synth::SynthSpec spec;
  spec.subjects = 40;
  spec.schedule_length = 8;
  c.synth = spec;
  c.seeds = {1};
  c.paddings = {Padding::Zero, Padding::Ffill};
  c.generative.max_epochs = 3;
  c.generative.latent_dim = 2;
  c.generative.hidden_dim = 4;
  c.regressor.max_epochs = 3;
  c.regressor.hidden_dim = 4;
  c.fractions = {50, 100};
  c.out_dir = fs::temp_directory_path() / dir;
  fs::remove_all(c.out_dir);
  return c;
}

TEST(Config, JsonRoundTripAndHash) {
  auto c = tiny_config("longimpute_cfg");
  c.kernel = nlohmann::json::parse(R"({"components": []})");
  const auto back = harness::config_from_json(harness::to_json(c));
  EXPECT_EQ(harness::to_json(back), harness::to_json(c));
  EXPECT_EQ(harness::config_hash(back), harness::config_hash(c));
  EXPECT_EQ(harness::config_hash(c).size(), 16u);

  auto moved = c;
  moved.out_dir = "/elsewhere";
  EXPECT_EQ(harness::config_hash(moved), harness::config_hash(c));
  auto reseeded = c;
  reseeded.seeds = {2};
  EXPECT_NE(harness::config_hash(reseeded), harness::config_hash(c));
}

TEST(Config, InvalidConfigsRejected) {
  EXPECT_THROW(harness::config_from_json(nlohmann::json::parse(R"({"epochs": 3})")), ConfigInvalid);
  EXPECT_THROW(harness::config_from_json(nlohmann::json::parse("[1]")), ConfigInvalid);
  EXPECT_THROW(harness::config_from_json(nlohmann::json::parse(R"({"gen_ratios": [0.5, 0.5]})")), ConfigInvalid);
  EXPECT_THROW(harness::config_from_json(nlohmann::json::parse(R"({"pred_ratios": [0.7, 0.2, 0.2]})")), ConfigInvalid);
  EXPECT_THROW(harness::config_from_json(nlohmann::json::parse(R"({"fractions": [0]})")), ConfigInvalid);
  EXPECT_THROW(harness::config_from_json(nlohmann::json::parse(R"({"seeds": []})")), ConfigInvalid);
  EXPECT_THROW(harness::config_from_json(nlohmann::json::parse(R"({"paddings": ["middle"]})")), ConfigInvalid);
  EXPECT_THROW(harness::config_from_json(nlohmann::json::parse(R"({"synth": null})")), ConfigInvalid);
  EXPECT_THROW(harness::load_config("/nonexistent/config.json"), MissingArtifact);
  EXPECT_THROW(harness::phase_from_string("train"), ConfigInvalid);
  for (auto p : {harness::Phase::Input, harness::Phase::Generate, harness::Phase::PredictTargets, harness::Phase::Retrain}) {
    EXPECT_EQ(harness::phase_from_string(harness::to_string(p)), p);
  }
}

TEST(Seeds, DerivedSeedsAreDeterministicAndSpread) {
  EXPECT_EQ(harness::derive_seed(3, 1, 1), harness::derive_seed(3, 1, 1));
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a) {
    for (std::uint64_t b = 0; b < 5; ++b) seen.insert(harness::derive_seed(a, b, 2));
  }
  EXPECT_EQ(seen.size(), 100u);
}

// Oracle: W1 between empirical measures is the integral of |F_a - F_b|,
// evaluated on a fine grid.
double w1_grid(const std::vector<double>& a, const std::vector<double>& b) {
  const double lo = std::min(*std::min_element(a.begin(), a.end()), *std::min_element(b.begin(), b.end()));
  const double hi = std::max(*std::max_element(a.begin(), a.end()), *std::max_element(b.begin(), b.end()));
  auto cdf = [](const std::vector<double>& v, double x) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double y) { return y <= x; })) /
           static_cast<double>(v.size());
  };
  const int n = 200000;
  const double dx = (hi - lo) / n;
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += std::abs(cdf(a, lo + (i + 0.5) * dx) - cdf(b, lo + (i + 0.5) * dx)) * dx;
  return total;
}

TEST(Wasserstein, ClosedFormsAndGridOracle) {
  EXPECT_NEAR(harness::wasserstein_1d({0.0}, {2.5}), 2.5, 1e-15);
  EXPECT_NEAR(harness::wasserstein_1d({1, 2, 3}, {1, 2, 3}), 0.0, 1e-15);
  // Equal-size samples: mean absolute difference of sorted values.
  EXPECT_NEAR(harness::wasserstein_1d({3, 1, 2}, {5, 4, 6}), 3.0, 1e-15);
  EXPECT_THROW(harness::wasserstein_1d({}, {1.0}), std::invalid_argument);

  std::mt19937_64 rng(70);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> a(7 + rep), b(4 + 2 * rep);
    for (auto& x : a) x = n(rng);
    for (auto& x : b) x = n(rng) + 0.5;
    EXPECT_NEAR(harness::wasserstein_1d(a, b), w1_grid(a, b), 1e-4);
    EXPECT_NEAR(harness::wasserstein_1d(a, b), harness::wasserstein_1d(b, a), 1e-14);
  }
}

TEST(Aggregate, MatchesBruteForceGrouping) {
  std::mt19937_64 rng(71);
  std::uniform_int_distribution<int> key(0, 3);
  std::uniform_real_distribution<double> val(0.0, 1.0);
  for (int rep = 0; rep < 30; ++rep) {
    std::vector<std::pair<std::vector<std::string>, double>> rows;
    for (int i = 0; i < 40; ++i) rows.push_back({{std::to_string(key(rng)), std::to_string(key(rng) % 2)}, val(rng)});
    const auto t = harness::aggregate({"a", "b"}, rows);
    std::map<std::vector<std::string>, std::vector<double>> groups;
    for (const auto& [k, v] : rows) groups[k].push_back(v);
    ASSERT_EQ(t.cells.size(), groups.size());
    for (const auto& [k, vs] : groups) {
      const auto* cell = t.find(k);
      ASSERT_NE(cell, nullptr);
      double sum = 0.0;
      for (double v : vs) sum += v;
      EXPECT_EQ(cell->n, vs.size());
      EXPECT_NEAR(cell->mean, sum / static_cast<double>(vs.size()), 1e-12);
      EXPECT_EQ(cell->min, *std::min_element(vs.begin(), vs.end()));
      EXPECT_EQ(cell->max, *std::max_element(vs.begin(), vs.end()));
    }
    // First-seen key order.
    EXPECT_EQ(t.cells.front().keys, rows.front().first);
  }
  EXPECT_THROW(harness::aggregate({"a"}, {{{"x", "y"}, 1.0}}), std::invalid_argument);
}

TEST(Tables, CsvRoundTrip) {
  const auto t = harness::aggregate({"source", "model"}, {{{"vae", "lstm"}, 0.125}, {{"vae", "lstm"}, 0.1 / 3.0},
                                                          {{"lvae", "gru"}, 1e-7}});
  const std::vector<std::uint64_t> seeds{1, 2};
  const std::string text = harness::table_to_csv(t, "00ff", seeds);
  EXPECT_EQ(text.substr(0, text.find('\n')), "# config_hash=00ff seeds=1;2");
  EXPECT_EQ(harness::parse_table_csv(text), t);
  EXPECT_THROW(harness::parse_table_csv(""), IoFailure);
  EXPECT_THROW(harness::parse_table_csv("source,n,mean,min,max\nvae,1,2\n"), IoFailure);

  const auto empty = harness::aggregate({"source", "model", "fraction"}, {});
  const std::string header_only = harness::table_to_csv(empty, "00ff", seeds);
  EXPECT_EQ(std::count(header_only.begin(), header_only.end(), '\n'), 2);
  EXPECT_EQ(harness::parse_table_csv(header_only), empty);
}

TEST(Phases, RefuseMissingOrForeignInputs) {
  auto c = tiny_config("longimpute_phases");
  EXPECT_THROW(harness::run_phase(c, harness::Phase::Generate), MissingArtifact);
  harness::run_phase(c, harness::Phase::Input);
  auto other = c;
  other.split_seed = 5;
  EXPECT_THROW(harness::run_phase(other, harness::Phase::Generate), ConfigInvalid);
  EXPECT_THROW(harness::run_phase(c, harness::Phase::PredictTargets), MissingArtifact);
  fs::remove_all(c.out_dir);
}

class TinyMatrix : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    config_ = new ExperimentConfig(tiny_config("longimpute_matrix_a"));
    report_ = new harness::RunReport(harness::run_matrix(*config_));
  }
  static void TearDownTestSuite() {
    fs::remove_all(config_->out_dir);
    delete report_;
    delete config_;
  }
  static ExperimentConfig* config_;
  static harness::RunReport* report_;
};

ExperimentConfig* TinyMatrix::config_ = nullptr;
harness::RunReport* TinyMatrix::report_ = nullptr;

TEST_F(TinyMatrix, OneEntryPerCellForASingleSeed) {
  const auto& r = *report_;
  EXPECT_EQ(r.by_padding.cells.size(), 2u * 2u);
  for (const auto& cell : r.by_padding.cells) EXPECT_EQ(cell.n, 1u);
  // original plus three generators, each with two regressors.
  EXPECT_EQ(r.by_source.cells.size(), 4u * 2u);
  for (const auto& cell : r.by_source.cells) {
    EXPECT_EQ(cell.n, 1u);
    EXPECT_EQ(cell.keys[2], r.selection.padding);
  }
  // VAE-NS imputes by row and is left out of the sweep.
  EXPECT_EQ(r.fraction_sweep.cells.size(), 2u * 2u * 2u);
  EXPECT_EQ(r.generation_loss.cells.size(), 3u);
  EXPECT_EQ(r.feature_distance.cells.size(), 3u * 6u);
  for (const auto& e : r.retrain) EXPECT_TRUE(std::isfinite(e.rmse));
}

TEST_F(TinyMatrix, FullFractionEqualsFullImputation) {
  std::size_t checked = 0;
  for (const auto& f : report_->fractions) {
    if (f.fraction != 100.0) continue;
    for (const auto& e : report_->retrain) {
      if (e.dataset == f.source && e.model == f.model && e.seed == f.seed) {
        EXPECT_EQ(e.rmse, f.rmse) << f.source << " " << f.model;
        ++checked;
      }
    }
  }
  EXPECT_EQ(checked, 2u * 2u);
}

TEST_F(TinyMatrix, ReportFilesCarryTheHashAndParse) {
  const fs::path dir = config_->out_dir / "report";
  for (const char* name : {"rmse_by_padding.csv", "rmse_by_source.csv", "fraction_sweep.csv",
                           "feature_distance.csv", "generation_loss.csv"}) {
    const std::string text = io::read_text(dir / name);
    EXPECT_NE(text.find("config_hash=" + report_->config_hash), std::string::npos) << name;
    EXPECT_NO_THROW(harness::parse_table_csv(text)) << name;
  }
  EXPECT_EQ(harness::parse_table_csv(io::read_text(dir / "rmse_by_source.csv")), report_->by_source);
  const auto summary = nlohmann::json::parse(io::read_text(dir / "summary.json"));
  EXPECT_EQ(summary.at("config_hash"), report_->config_hash);
}

TEST_F(TinyMatrix, RerunIsBytewiseIdenticalAndEmptySweepIsHeaderOnly) {
  auto again = *config_;
  again.out_dir = fs::temp_directory_path() / "longimpute_matrix_b";
  fs::remove_all(again.out_dir);
  harness::run_matrix(again);
  for (const char* name : {"rmse_by_padding.csv", "rmse_by_source.csv", "fraction_sweep.csv",
                           "feature_distance.csv", "generation_loss.csv", "summary.json"}) {
    EXPECT_EQ(io::read_text(again.out_dir / "report" / name), io::read_text(config_->out_dir / "report" / name)) << name;
  }
  fs::remove_all(again.out_dir);

  auto no_sweep = *config_;
  no_sweep.fractions.clear();
  no_sweep.generators = {gen::ModelKind::Vae};
  no_sweep.paddings = {Padding::Zero};
  no_sweep.out_dir = fs::temp_directory_path() / "longimpute_matrix_c";
  fs::remove_all(no_sweep.out_dir);
  const auto r = harness::run_matrix(no_sweep);
  EXPECT_TRUE(r.fraction_sweep.cells.empty());
  const std::string sweep = io::read_text(no_sweep.out_dir / "report" / "fraction_sweep.csv");
  EXPECT_EQ(std::count(sweep.begin(), sweep.end(), '\n'), 2);
  fs::remove_all(no_sweep.out_dir);
}

}  // namespace
