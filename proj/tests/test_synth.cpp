#include "longimpute/synth.hpp"

#include "longimpute/pipeline.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace {

using namespace longimpute;

TEST(Synth, ShapesFollowTheSpec) {
  synth::SynthSpec spec;
  spec.subjects = 30;
  const auto r = synth::synth_generate(spec, 1);
  EXPECT_EQ(r.dataset.subjects.size(), 30u);
  EXPECT_EQ(r.dataset.feature_schema.size(), spec.features);
  EXPECT_EQ(r.dataset.feature_schema.back(), "sequence_number");
  EXPECT_EQ(r.dataset.descriptor_schema.size(), spec.descriptors);
  EXPECT_EQ(r.schedules.size(), spec.schools);
  EXPECT_TRUE(validate(r.dataset).empty());
  for (const auto& s : r.dataset.subjects) {
    EXPECT_GE(s.steps.size(), 2u);
    EXPECT_EQ(r.school_of.at(s.subject_id), s.school_id);
    for (const auto& step : s.steps) {
      ASSERT_TRUE(step.target.has_value());
      EXPECT_GE(*step.target, 0.0);
      EXPECT_LE(*step.target, 1.0);
    }
  }
}

TEST(Synth, SameSeedSameCorpus) {
  synth::SynthSpec spec;
  spec.subjects = 10;
  const auto a = synth::synth_generate(spec, 4), b = synth::synth_generate(spec, 4), c = synth::synth_generate(spec, 5);
  EXPECT_EQ(a.dataset.subjects[3].steps[1].features, b.dataset.subjects[3].steps[1].features);
  EXPECT_EQ(a.missing, b.missing);
  EXPECT_NE(a.dataset.subjects[3].descriptors, c.dataset.subjects[3].descriptors);
}

TEST(Synth, ZeroRateDropsNothing) {
  synth::SynthSpec spec;
  spec.subjects = 25;
  spec.rate = 0.0;
  for (auto mode : {synth::Missingness::Mcar, synth::Missingness::Mnar}) {
    spec.missingness = mode;
    const auto r = synth::synth_generate(spec, 2);
    EXPECT_TRUE(r.missing.empty());
    for (const auto& s : r.dataset.subjects) EXPECT_EQ(s.steps.size(), r.schedules.at(s.school_id).size());
  }
}

// The recovered missing set equals schedule minus observed, which is the
// planted set.
TEST(Synth, IdentifiedMissingEqualsPlantedMissing) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    synth::SynthSpec spec;
    spec.subjects = 40;
    spec.missingness = seed % 2 ? synth::Missingness::Mcar : synth::Missingness::Mnar;
    spec.rate = 0.05 * static_cast<double>(seed % 8);
    const auto r = synth::synth_generate(spec, seed);
    const auto sk = identify_missing(r.dataset, school_map(r.dataset, "school_id"), r.schedules);
    std::map<std::string, Schedule> found;
    for (const auto& s : sk) found[s.subject_id] = Schedule(s.times.begin(), s.times.end());
    EXPECT_EQ(found, r.missing) << "seed " << seed;
    for (const auto& [id, times] : r.missing) EXPECT_EQ(r.missing_targets.at(id).size(), times.size());
  }
}

double point_biserial(const std::vector<double>& x, const std::vector<bool>& flag) {
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double sd = 0.0, m1 = 0.0, m0 = 0.0, n1 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sd += (x[i] - mean) * (x[i] - mean);
    (flag[i] ? m1 : m0) += x[i];
    n1 += flag[i] ? 1.0 : 0.0;
  }
  sd = std::sqrt(sd / n);
  m1 /= n1;
  m0 /= n - n1;
  return (m1 - m0) / sd * std::sqrt(n1 / n * (1.0 - n1 / n));
}

TEST(Synth, NotAtRandomMissingnessFavoursLowTargets) {
  synth::SynthSpec spec;
  spec.missingness = synth::Missingness::Mnar;
  const auto r = synth::synth_generate(spec, 3);
  std::vector<double> targets;
  std::vector<bool> missing;
  for (const auto& s : r.dataset.subjects) {
    for (const auto& step : s.steps) {
      targets.push_back(*step.target);
      missing.push_back(false);
    }
  }
  for (const auto& [id, ts] : r.missing_targets) {
    for (double t : ts) {
      targets.push_back(t);
      missing.push_back(true);
    }
  }
  const double rho = point_biserial(targets, missing);
  EXPECT_LT(rho, -0.1);

  spec.missingness = synth::Missingness::Mcar;
  const auto m = synth::synth_generate(spec, 3);
  targets.clear();
  missing.clear();
  for (const auto& s : m.dataset.subjects) {
    for (const auto& step : s.steps) {
      targets.push_back(*step.target);
      missing.push_back(false);
    }
  }
  for (const auto& [id, ts] : m.missing_targets) {
    for (double t : ts) {
      targets.push_back(t);
      missing.push_back(true);
    }
  }
  EXPECT_GT(point_biserial(targets, missing), -0.1);
}

// Permutation test on |corr(first continuous descriptor, subject mean of f0)|:
// p-value = share of descriptor shuffles reaching the observed statistic.
double permutation_p_value(const Dataset& d, std::uint64_t seed) {
  std::vector<double> x, y;
  for (const auto& s : d.subjects) {
    x.push_back(s.descriptors(0));
    double m = 0.0;
    for (const auto& step : s.steps) m += step.features(0);
    y.push_back(m / static_cast<double>(s.steps.size()));
  }
  auto corr = [&](const std::vector<double>& a) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      sab += (a[i] - ma) * (y[i] - mb);
      saa += (a[i] - ma) * (a[i] - ma);
      sbb += (y[i] - mb) * (y[i] - mb);
    }
    return std::abs(sab / std::sqrt(saa * sbb));
  };
  const double observed = corr(x);
  std::mt19937_64 rng(seed);
  const int rounds = 1999;
  int hits = 0;
  for (int r = 0; r < rounds; ++r) {
    std::shuffle(x.begin(), x.end(), rng);
    hits += corr(x) >= observed ? 1 : 0;
  }
  return (hits + 1.0) / (rounds + 1.0);
}

TEST(Synth, ZeroCouplingMakesDescriptorsExchangeable) {
  synth::SynthSpec spec;
  spec.subjects = 300;
  spec.coupling = 0.0;
  EXPECT_GT(permutation_p_value(synth::synth_generate(spec, 8).dataset, 1), 0.01);
  // The same test has power when the coupling is on.
  spec.coupling = 0.9;
  EXPECT_LT(permutation_p_value(synth::synth_generate(spec, 8).dataset, 1), 0.01);
}

TEST(Synth, InvalidSpecsRejected) {
  synth::SynthSpec spec;
  spec.coupling = 1.5;
  EXPECT_THROW(spec.check(), std::invalid_argument);
  spec = {};
  spec.rate = 1.0;
  EXPECT_THROW(spec.check(), std::invalid_argument);
  spec = {};
  spec.features = 1;
  EXPECT_THROW(spec.check(), std::invalid_argument);
}

TEST(Synth, SpecJsonRoundTrip) {
  synth::SynthSpec spec;
  spec.subjects = 77;
  spec.missingness = synth::Missingness::Mnar;
  spec.coupling = 0.4;
  EXPECT_EQ(synth::to_json(synth::synth_spec_from_json(synth::to_json(spec))), synth::to_json(spec));
}

}  // namespace
