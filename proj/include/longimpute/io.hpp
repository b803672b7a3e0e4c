#pragma once

// CSV serialization of datasets, school schedules and missing skeletons.
//
// Dataset CSV: one row per (subject_id, event_time). Reserved columns are
// subject_id, event_time, school_id, target and observed; columns named
// "name:kind" (kind = continuous | categorical | binary) are descriptors,
// repeated per row and required constant within a subject; every other
// column is a feature. Empty target cells mean no target. Rows are kept in
// file order (Dataset::row_order).

#include "longimpute/checkpoint.hpp"
#include "longimpute/core_types.hpp"
#include "longimpute/pipeline.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace longimpute::io {

/// Splits one CSV line on commas. Quoted fields are not supported.
std::vector<std::string> split_csv_line(const std::string& line);

/// Shortest exact decimal form ("%.17g").
std::string format_double(double v);

/// `known_labels`, when given, fixes the codes of already known categories
/// (new labels get the next free code).
Dataset parse_dataset_csv(const std::string& text,
                          const std::vector<std::vector<std::string>>* known_labels = nullptr);
std::string dataset_to_csv(const Dataset& dataset);

Dataset read_dataset_csv(const std::filesystem::path& path,
                         const std::vector<std::vector<std::string>>* known_labels = nullptr);
void write_dataset_csv(const Dataset& dataset, const std::filesystem::path& path);

/// school_id,quiz_time
std::map<std::string, Schedule> parse_schedule_csv(const std::string& text);
std::string schedule_to_csv(const std::map<std::string, Schedule>& schedules);

/// subject_id,school_id,event_time (one row per missing step)
std::string skeleton_to_csv(const std::vector<MissingSkeleton>& skeletons);
/// Rebuilds skeletons, taking descriptors from `dataset`.
std::vector<MissingSkeleton> parse_skeleton_csv(const std::string& text, const Dataset& dataset);

std::string read_text(const std::filesystem::path& path);
/// Writes `text`, creating parent directories. Throws IoFailure.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace longimpute::io
