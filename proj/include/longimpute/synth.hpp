#pragma once

// Synthetic longitudinal corpus with planted missingness.
//
// Each subject belongs to a school with a quiz schedule. A subject-level
// ability mixes a descriptor signal (weight `coupling`) with independent
// noise; per-step latents follow AR(1) paths around it, features are a fixed
// nonlinear map of the latents plus noise, and the target is a score rate in
// [0, 1]. Schedule steps are then dropped MCAR or MNAR (low targets more
// likely missing). The last feature is the per-subject sequence number.

#include "longimpute/core_types.hpp"
#include "longimpute/pipeline.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>

namespace longimpute::synth {

enum class Missingness { Mcar, Mnar };

const char* to_string(Missingness m);
Missingness missingness_from_string(const std::string& name);

struct SynthSpec {
  std::size_t subjects = 200;
  std::size_t schools = 4;
  std::size_t schedule_length = 40;
  /// D, including the trailing sequence_number feature (at least 2).
  std::size_t features = 6;
  /// Q; kinds cycle continuous, continuous, categorical, binary.
  std::size_t descriptors = 4;
  double coupling = 0.9;
  Missingness missingness = Missingness::Mcar;
  double rate = 0.25;
  double feature_noise = 0.1;
  double target_noise = 0.05;
  double time_span = 100.0;

  void check() const;
};

nlohmann::json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

struct SynthResult {
  Dataset dataset;  // observed rows only, file order sorted by event time
  std::map<std::string, Schedule> schedules;
  std::map<std::string, std::string> school_of;
  /// Planted missing times per subject (subjects with none are absent).
  std::map<std::string, Schedule> missing;
  /// Targets the dropped steps would have had, aligned with `missing`.
  std::map<std::string, std::vector<double>> missing_targets;
};

SynthResult synth_generate(const SynthSpec& spec, std::uint64_t seed);

}  // namespace longimpute::synth
