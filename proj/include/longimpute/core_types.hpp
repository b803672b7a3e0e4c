#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace longimpute {

enum class DescriptorKind { Continuous, Categorical, Binary };

const char* to_string(DescriptorKind kind);
DescriptorKind descriptor_kind_from_string(const std::string& name);

struct DescriptorField {
  std::string name;
  DescriptorKind kind = DescriptorKind::Continuous;
};

/// One time-indexed record of a subject. Identified-missing steps carry
/// observed = false and have empty features until a generator fills them.
struct TimeStep {
  double event_time = 0.0;
  Eigen::VectorXd features;
  std::optional<double> target;
  bool observed = true;
};

/// A subject's longitudinal record: the time-varying rows plus the
/// time-invariant descriptors, stored once.
///
/// Categorical descriptors hold integer category codes (as doubles); the
/// code-to-label table lives in the owning Dataset. Binary descriptors hold
/// 0 or 1.
struct SubjectSeries {
  std::string subject_id;
  std::string school_id;
  Eigen::VectorXd descriptors;
  std::vector<TimeStep> steps;

  std::size_t size() const { return steps.size(); }
};

/// Position of a row: subject index and step index within that subject.
struct RowRef {
  std::size_t subject = 0;
  std::size_t step = 0;
  bool operator==(const RowRef&) const = default;
};

struct Dataset {
  std::vector<SubjectSeries> subjects;
  std::vector<std::string> feature_schema;
  std::vector<DescriptorField> descriptor_schema;
  /// category_labels[q][code] is the raw label of category `code` of
  /// descriptor q; empty for non-categorical descriptors.
  std::vector<std::vector<std::string>> category_labels;
  /// Global row sequence in file order. Empty means subject-major order
  /// (subjects in stored order, steps in stored order).
  std::vector<RowRef> row_order;

  std::size_t num_features() const { return feature_schema.size(); }
  std::size_t num_descriptors() const { return descriptor_schema.size(); }

  /// Index of the subject with the given id, if present.
  std::optional<std::size_t> find(const std::string& subject_id) const;
  /// Descriptor matrix with one row per subject (P x Q).
  Eigen::MatrixXd descriptor_matrix() const;
};

struct Violation {
  enum class Kind {
    DuplicateId,
    UnsortedTime,
    RaggedFeatures,
    RaggedDescriptors,
    TargetOutOfRange,
  };
  Kind kind;
  std::string subject_id;
  std::string detail;

  bool operator==(const Violation&) const = default;
};

const char* to_string(Violation::Kind kind);

/// Every invariant violation of the dataset, in subject order. Steps that
/// are not observed and have no features yet are not considered ragged.
/// Equal event times are allowed (ties keep input order).
std::vector<Violation> validate(const Dataset& dataset);

/// Total number of rows N across all subjects.
std::size_t total_rows(const Dataset& dataset);

enum class SplitMode { SubjectBased, RowBased };
enum class PartName { Train, Val, Test, Generate };

const char* to_string(SplitMode mode);
const char* to_string(PartName part);
PartName part_from_string(const std::string& name);

/// The global row sequence: `row_order` when set, otherwise subject-major.
std::vector<RowRef> global_rows(const Dataset& dataset);

struct SplitPart {
  PartName name = PartName::Train;
  std::vector<std::string> subject_ids;  // SubjectBased
  std::vector<std::size_t> rows;         // RowBased, global row indices
};

struct SplitAssignment {
  SplitMode mode = SplitMode::SubjectBased;
  std::vector<SplitPart> parts;
  std::vector<double> ratios;

  const SplitPart& part(PartName name) const;
  bool has_part(PartName name) const;
  /// For SubjectBased splits: the part holding each subject id.
  std::map<std::string, PartName> subject_parts() const;
};

/// Part names used for a ratio vector of the given length: 3 -> Train/Val/
/// Test, 4 -> Train/Val/Test/Generate.
std::vector<PartName> part_names_for(std::size_t num_ratios);

}  // namespace longimpute
