#pragma once

// Data preparation around the models: splitting by subject or by row,
// missing-step identification from school schedules, fixed-length
// alignment, min-max scaling and merging generated rows back in.

#include "longimpute/core_types.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace longimpute {

class EmptyPart : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnknownSchool : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnknownSubject : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptySequence : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NotFitted : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Item counts per part for `total` items: floor(ratio * total) each, with
/// the rounding remainder added to the first part. Throws EmptyPart if a
/// part would be empty, std::invalid_argument if ratios do not sum to 1.
std::vector<std::size_t> part_sizes(std::span<const double> ratios, std::size_t total);

/// SubjectBased: shuffles subject ids with `seed`, then cuts by part_sizes.
/// RowBased: cuts the global (file-order) row sequence by part_sizes, which
/// can separate one subject's rows.
SplitAssignment split(const Dataset& dataset, SplitMode mode, std::span<const double> ratios, std::uint64_t seed);

using PartDatasets = std::map<PartName, Dataset>;

/// Materializes each part as its own Dataset. For RowBased splits a subject
/// whose rows fall in several parts appears as a fragment in each, rows kept
/// in file order.
PartDatasets materialize(const Dataset& dataset, const SplitAssignment& split);

// ---- missing-step identification ----

using Schedule = std::set<double>;

/// Schedule times a subject has no record for, plus what is known about the
/// subject.
struct MissingSkeleton {
  std::string subject_id;
  std::string school_id;
  Eigen::VectorXd descriptors;
  std::vector<double> times;  // ascending
};

/// school_of maps subject -> school, schedule_of maps school -> quiz times.
/// Subjects with nothing missing are omitted. Throws UnknownSchool when a
/// subject's school is unmapped or has an empty schedule.
std::vector<MissingSkeleton> identify_missing(const Dataset& dataset,
                                              const std::map<std::string, std::string>& school_of,
                                              const std::map<std::string, Schedule>& schedule_of);

/// subject -> school, read from `column`: "school_id" uses the dedicated
/// field, anything else names a categorical descriptor whose label is used.
std::map<std::string, std::string> school_map(const Dataset& dataset, const std::string& column);

/// Skeletons covering every row of `dataset` (used to regenerate held-out
/// data at its real timestamps).
std::vector<MissingSkeleton> skeleton_of(const Dataset& dataset);

// ---- alignment ----

enum class Padding { Zero, Ffill, Bfill };

const char* to_string(Padding padding);
Padding padding_from_string(const std::string& name);

struct PaddingStrategy {
  Padding padding = Padding::Zero;
  Eigen::Index length = 1;
};

struct Aligned {
  Eigen::MatrixXd values;  // length x D
  Eigen::VectorXd mask;    // 1 for real rows, 0 for pads
};

/// Cuts rows beyond `length`, or appends pads after the sequence: zeros
/// (Zero), the last row (Ffill) or the first row (Bfill).
Aligned align(const Eigen::MatrixXd& sequence, const PaddingStrategy& strategy);

/// Average sequence length rounded to the nearest 10 (at least 1).
Eigen::Index default_fixed_length(const Dataset& dataset);

// ---- scaling ----

class MinMaxScaler {
 public:
  MinMaxScaler() = default;
  MinMaxScaler(Eigen::RowVectorXd min, Eigen::RowVectorXd max);

  /// Fits per-column min/max on the rows of `rows` (at least one row).
  void fit(const Eigen::MatrixXd& rows);
  /// Maps min -> 0, max -> 1 per column; constant columns map to 0. No clamping.
  Eigen::MatrixXd scale(const Eigen::MatrixXd& rows) const;
  Eigen::MatrixXd inverse_scale(const Eigen::MatrixXd& rows) const;

  bool fitted() const { return fitted_; }
  const Eigen::RowVectorXd& min() const { return min_; }
  const Eigen::RowVectorXd& max() const { return max_; }

 private:
  void require_fitted(Eigen::Index cols) const;

  Eigen::RowVectorXd min_;
  Eigen::RowVectorXd max_;
  bool fitted_ = false;
};

/// Feature rows of every step that has features, in subject-major order.
Eigen::MatrixXd feature_rows(const Dataset& dataset);
/// Feature rows of one subject (steps with features only).
Eigen::MatrixXd feature_matrix(const SubjectSeries& subject);

// ---- imputation ----

enum class ImputeMode { ById, ByRow };

/// The whole corpus with every generated subject's rows merged into its
/// sequence, re-sorted by event time (ties keep observed rows first) and the
/// `sequence_feature` column renumbered. Throws UnknownSubject.
Dataset merge_by_id(const Dataset& original, const Dataset& generated,
                    const std::string& sequence_feature = "sequence_number");

/// Merges generated rows (subjects holding observed = false steps) into the
/// parts of `split`.
///
/// A fraction of the generated subjects is kept: round-half-up(fraction * P)
/// subjects chosen by a shuffle seeded with `selection_seed`.
/// ById requires a SubjectBased split: each selected subject's rows join that
/// subject's sequence in its home part and are re-sorted by event time.
/// ByRow requires a RowBased split: selected rows, in global time order, are
/// cut by the split ratios and appended to the parts' row sequences as they
/// are (no re-sorting).
/// In both modes the `sequence_feature` column, when present, is recomputed
/// as 1..n over each merged sequence.
PartDatasets impute(const Dataset& original, const SplitAssignment& split, const Dataset& generated,
                    ImputeMode mode, double fraction, std::uint64_t selection_seed,
                    const std::string& sequence_feature = "sequence_number");

// ---- model input ----

/// One subject aligned for a sequence model: scaled features padded to the
/// fixed length, with masks and per-step kernel inputs.
struct AlignedSubject {
  Eigen::MatrixXd features;     // T x D, scaled
  Eigen::VectorXd mask;         // T, real rows
  Eigen::VectorXd targets;      // T, 0 where absent
  Eigen::VectorXd target_mask;  // T, real rows with a target
  Eigen::VectorXd times;        // T, event times (pads repeat the last time)
  Eigen::VectorXd descriptors;  // Q
};

std::vector<AlignedSubject> align_subjects(const Dataset& dataset, const MinMaxScaler& scaler,
                                           const PaddingStrategy& strategy);

/// A batch laid out time-major for the recurrent models.
struct SequenceBatch {
  std::vector<Eigen::MatrixXd> inputs;  // T entries of B x D
  Eigen::MatrixXd mask;                 // B x T
  Eigen::MatrixXd targets;              // B x T
  Eigen::MatrixXd target_mask;          // B x T
  Eigen::MatrixXd times;                // B x T
  Eigen::MatrixXd descriptors;          // B x Q

  Eigen::Index batch_size() const { return mask.rows(); }
  Eigen::Index length() const { return mask.cols(); }
};

SequenceBatch make_batch(std::span<const AlignedSubject> subjects, std::span<const std::size_t> indices);

/// Contiguous batches of `batch_size` over `order`.
std::vector<std::vector<std::size_t>> batches_of(std::span<const std::size_t> order, std::size_t batch_size);

}  // namespace longimpute
