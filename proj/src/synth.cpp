#include "longimpute/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <tuple>

namespace longimpute::synth {

namespace {

constexpr double kCategoryEffect[3] = {-0.7, 0.0, 0.7};
constexpr double kBinaryRate = 0.4;
constexpr double kAbilityNoise = 0.8;  // stationary sd of the ability-tracking latent
constexpr double kAbilityRho = 0.6;
constexpr double kStateRho = 0.8;

DescriptorKind kind_at(std::size_t q) {
  switch (q % 4) {
    case 2: return DescriptorKind::Categorical;
    case 3: return DescriptorKind::Binary;
    default: return DescriptorKind::Continuous;
  }
}

std::string descriptor_name(std::size_t q) {
  static const char* base[4] = {"age", "prior", "track", "gifted"};
  return q < 4 ? base[q] : std::string(base[q % 4]) + std::to_string(q / 4);
}

double weight_at(std::size_t q) { return q % 4 == 0 ? 0.8 : -0.5; }

double round_to(double v, double unit) { return std::round(v / unit) * unit; }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

const char* to_string(Missingness m) { return m == Missingness::Mcar ? "mcar" : "mnar"; }

Missingness missingness_from_string(const std::string& name) {
  if (name == "mcar") return Missingness::Mcar;
  if (name == "mnar") return Missingness::Mnar;
  throw std::invalid_argument("unknown missingness mode: " + name);
}

void SynthSpec::check() const {
  if (subjects == 0 || schools == 0) throw std::invalid_argument("synth needs subjects and schools");
  if (schedule_length < 2) throw std::invalid_argument("synth schedule needs at least two quizzes");
  if (features < 2) throw std::invalid_argument("synth needs at least two features");
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("missing rate must be in [0, 1)");
  if (!(coupling >= 0.0 && coupling <= 1.0)) throw std::invalid_argument("coupling must be in [0, 1]");
  if (!(time_span > 0.0)) throw std::invalid_argument("time span must be positive");
  if (feature_noise < 0.0 || target_noise < 0.0) throw std::invalid_argument("noise levels must be non-negative");
}

nlohmann::json to_json(const SynthSpec& s) {
  return {{"subjects", s.subjects},          {"schools", s.schools},
          {"schedule_length", s.schedule_length}, {"features", s.features},
          {"descriptors", s.descriptors},    {"coupling", s.coupling},
          {"missingness", to_string(s.missingness)}, {"rate", s.rate},
          {"feature_noise", s.feature_noise}, {"target_noise", s.target_noise},
          {"time_span", s.time_span}};
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.subjects = j.value("subjects", s.subjects);
  s.schools = j.value("schools", s.schools);
  s.schedule_length = j.value("schedule_length", s.schedule_length);
  s.features = j.value("features", s.features);
  s.descriptors = j.value("descriptors", s.descriptors);
  s.coupling = j.value("coupling", s.coupling);
  s.missingness = missingness_from_string(j.value("missingness", std::string("mcar")));
  s.rate = j.value("rate", s.rate);
  s.feature_noise = j.value("feature_noise", s.feature_noise);
  s.target_noise = j.value("target_noise", s.target_noise);
  s.time_span = j.value("time_span", s.time_span);
  s.check();
  return s;
}

SynthResult synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  spec.check();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  const std::size_t Dm = spec.features - 1;
  Eigen::MatrixXd A(static_cast<Eigen::Index>(Dm), 2);
  Eigen::VectorXd bias(static_cast<Eigen::Index>(Dm));
  for (Eigen::Index k = 0; k < A.rows(); ++k) {
    A(k, 0) = 0.9 * n01(rng);
    A(k, 1) = 0.9 * n01(rng);
    bias(k) = 0.3 * n01(rng);
  }

  SynthResult out;
  Dataset& d = out.dataset;
  for (std::size_t k = 0; k < Dm; ++k) d.feature_schema.push_back("f" + std::to_string(k));
  d.feature_schema.push_back("sequence_number");
  double signal_var = 0.0;
  for (std::size_t q = 0; q < spec.descriptors; ++q) {
    const auto kind = kind_at(q);
    d.descriptor_schema.push_back({descriptor_name(q), kind});
    d.category_labels.push_back(kind == DescriptorKind::Categorical ? std::vector<std::string>{"c0", "c1", "c2"}
                                                                     : std::vector<std::string>{});
    if (kind == DescriptorKind::Continuous) signal_var += weight_at(q) * weight_at(q);
    if (kind == DescriptorKind::Categorical) signal_var += 2.0 / 3.0 * 0.49;
    if (kind == DescriptorKind::Binary) signal_var += 0.64 * kBinaryRate * (1.0 - kBinaryRate);
  }

  std::vector<std::string> schools;
  const double step = spec.time_span / static_cast<double>(spec.schedule_length);
  for (std::size_t s = 0; s < spec.schools; ++s) {
    schools.push_back("school_" + std::to_string(s));
    Schedule& sched = out.schedules[schools.back()];
    for (std::size_t j = 0; j < spec.schedule_length; ++j) {
      sched.insert(round_to(static_cast<double>(j) * step + 0.8 * step * u01(rng), 0.01));
    }
  }

  std::uniform_int_distribution<std::size_t> pick_school(0, spec.schools - 1);
  std::uniform_int_distribution<int> pick_category(0, 2);
  char id[32];
  for (std::size_t p = 0; p < spec.subjects; ++p) {
    std::snprintf(id, sizeof id, "s%04zu", p + 1);
    SubjectSeries s;
    s.subject_id = id;
    s.school_id = schools[pick_school(rng)];
    out.school_of[s.subject_id] = s.school_id;
    s.descriptors.resize(static_cast<Eigen::Index>(spec.descriptors));
    double signal = 0.0;
    for (std::size_t q = 0; q < spec.descriptors; ++q) {
      double v = 0.0;
      switch (kind_at(q)) {
        case DescriptorKind::Continuous:
          v = round_to(n01(rng), 1e-4);
          signal += weight_at(q) * v;
          break;
        case DescriptorKind::Categorical:
          v = pick_category(rng);
          signal += kCategoryEffect[static_cast<int>(v)];
          break;
        case DescriptorKind::Binary:
          v = u01(rng) < kBinaryRate ? 1.0 : 0.0;
          signal += 0.8 * (v - kBinaryRate);
          break;
      }
      s.descriptors(static_cast<Eigen::Index>(q)) = v;
    }
    const double standardized = signal_var > 0.0 ? signal / std::sqrt(signal_var) : 0.0;
    const double ability = spec.coupling * standardized + std::sqrt(1.0 - spec.coupling * spec.coupling) * n01(rng);

    const Schedule& sched = out.schedules.at(s.school_id);
    double e1 = kAbilityNoise * n01(rng);
    double z2 = n01(rng);
    std::vector<TimeStep> all;
    std::vector<bool> keep;
    for (double t : sched) {
      if (!all.empty()) {
        e1 = kAbilityRho * e1 + std::sqrt(1.0 - kAbilityRho * kAbilityRho) * kAbilityNoise * n01(rng);
        z2 = kStateRho * z2 + std::sqrt(1.0 - kStateRho * kStateRho) * n01(rng);
      }
      const double tau = t / spec.time_span;
      const double z1 = ability + 0.8 * tau + e1;
      TimeStep ts;
      ts.event_time = t;
      ts.features.resize(static_cast<Eigen::Index>(spec.features));
      for (Eigen::Index k = 0; k < A.rows(); ++k) {
        ts.features(k) = std::tanh(A(k, 0) * z1 + A(k, 1) * z2 + bias(k)) + spec.feature_noise * n01(rng);
      }
      const double target = sigmoid(1.2 * ability + 0.5 * z2 + 0.3 * tau) + spec.target_noise * n01(rng);
      ts.target = std::clamp(target, 0.0, 1.0);
      double p_miss = spec.rate;
      if (spec.missingness == Missingness::Mnar) p_miss = std::min(0.95, 2.0 * spec.rate * sigmoid(-6.0 * (*ts.target - 0.5)));
      keep.push_back(u01(rng) >= p_miss);
      all.push_back(std::move(ts));
    }
    // Every subject keeps at least two observed steps.
    for (std::size_t j = 0; j < all.size() && std::count(keep.begin(), keep.end(), true) < 2; ++j) keep[j] = true;

    for (std::size_t j = 0; j < all.size(); ++j) {
      if (keep[j]) {
        s.steps.push_back(all[j]);
        s.steps.back().features(static_cast<Eigen::Index>(Dm)) = static_cast<double>(s.steps.size());
      } else {
        out.missing[s.subject_id].insert(all[j].event_time);
        out.missing_targets[s.subject_id].push_back(*all[j].target);
      }
    }
    d.subjects.push_back(std::move(s));
  }

  // File order: global event time, ties by subject.
  std::vector<std::tuple<double, std::size_t, std::size_t>> rows;
  for (std::size_t p = 0; p < d.subjects.size(); ++p) {
    for (std::size_t t = 0; t < d.subjects[p].steps.size(); ++t) rows.emplace_back(d.subjects[p].steps[t].event_time, p, t);
  }
  std::sort(rows.begin(), rows.end());
  for (const auto& [time, p, t] : rows) d.row_order.push_back({p, t});
  return out;
}

}  // namespace longimpute::synth
