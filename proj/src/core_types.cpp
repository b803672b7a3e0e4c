#include "longimpute/core_types.hpp"

#include <set>

namespace longimpute {

const char* to_string(DescriptorKind kind) {
  switch (kind) {
    case DescriptorKind::Continuous: return "continuous";
    case DescriptorKind::Categorical: return "categorical";
    case DescriptorKind::Binary: return "binary";
  }
  return "?";
}

DescriptorKind descriptor_kind_from_string(const std::string& name) {
  if (name == "continuous") return DescriptorKind::Continuous;
  if (name == "categorical") return DescriptorKind::Categorical;
  if (name == "binary") return DescriptorKind::Binary;
  throw std::invalid_argument("unknown descriptor kind: " + name);
}

const char* to_string(Violation::Kind kind) {
  switch (kind) {
    case Violation::Kind::DuplicateId: return "DuplicateId";
    case Violation::Kind::UnsortedTime: return "UnsortedTime";
    case Violation::Kind::RaggedFeatures: return "RaggedFeatures";
    case Violation::Kind::RaggedDescriptors: return "RaggedDescriptors";
    case Violation::Kind::TargetOutOfRange: return "TargetOutOfRange";
  }
  return "?";
}

const char* to_string(SplitMode mode) {
  return mode == SplitMode::SubjectBased ? "subject" : "row";
}

const char* to_string(PartName part) {
  switch (part) {
    case PartName::Train: return "train";
    case PartName::Val: return "val";
    case PartName::Test: return "test";
    case PartName::Generate: return "generate";
  }
  return "?";
}

PartName part_from_string(const std::string& name) {
  if (name == "train") return PartName::Train;
  if (name == "val") return PartName::Val;
  if (name == "test") return PartName::Test;
  if (name == "generate") return PartName::Generate;
  throw std::invalid_argument("unknown split part: " + name);
}

std::optional<std::size_t> Dataset::find(const std::string& subject_id) const {
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (subjects[i].subject_id == subject_id) return i;
  }
  return std::nullopt;
}

Eigen::MatrixXd Dataset::descriptor_matrix() const {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(subjects.size()),
                    static_cast<Eigen::Index>(num_descriptors()));
  for (std::size_t p = 0; p < subjects.size(); ++p) {
    X.row(static_cast<Eigen::Index>(p)) = subjects[p].descriptors.transpose();
  }
  return X;
}

std::vector<Violation> validate(const Dataset& dataset) {
  std::vector<Violation> out;
  std::set<std::string> seen;
  const auto D = static_cast<Eigen::Index>(dataset.num_features());
  const auto Q = static_cast<Eigen::Index>(dataset.num_descriptors());

  for (const auto& s : dataset.subjects) {
    if (!seen.insert(s.subject_id).second) {
      out.push_back({Violation::Kind::DuplicateId, s.subject_id, "subject id appears more than once"});
    }
    if (s.descriptors.size() != Q) {
      out.push_back({Violation::Kind::RaggedDescriptors, s.subject_id,
                     "expected " + std::to_string(Q) + " descriptors, got " +
                         std::to_string(s.descriptors.size())});
    }
    for (std::size_t t = 1; t < s.steps.size(); ++t) {
      if (s.steps[t].event_time < s.steps[t - 1].event_time) {
        out.push_back({Violation::Kind::UnsortedTime, s.subject_id,
                       "step " + std::to_string(t) + " precedes step " + std::to_string(t - 1)});
        break;
      }
    }
    for (std::size_t t = 0; t < s.steps.size(); ++t) {
      const auto& step = s.steps[t];
      const bool absent = !step.observed && step.features.size() == 0;
      if (!absent && step.features.size() != D) {
        out.push_back({Violation::Kind::RaggedFeatures, s.subject_id,
                       "step " + std::to_string(t) + " has " + std::to_string(step.features.size()) +
                           " features, expected " + std::to_string(D)});
      }
      if (step.target && (*step.target < 0.0 || *step.target > 1.0)) {
        out.push_back({Violation::Kind::TargetOutOfRange, s.subject_id,
                       "step " + std::to_string(t) + " target outside [0,1]"});
      }
    }
  }
  return out;
}

std::size_t total_rows(const Dataset& dataset) {
  std::size_t n = 0;
  for (const auto& s : dataset.subjects) n += s.steps.size();
  return n;
}

std::vector<RowRef> global_rows(const Dataset& dataset) {
  if (!dataset.row_order.empty()) return dataset.row_order;
  std::vector<RowRef> rows;
  rows.reserve(total_rows(dataset));
  for (std::size_t p = 0; p < dataset.subjects.size(); ++p) {
    for (std::size_t t = 0; t < dataset.subjects[p].steps.size(); ++t) rows.push_back({p, t});
  }
  return rows;
}

const SplitPart& SplitAssignment::part(PartName name) const {
  for (const auto& p : parts) {
    if (p.name == name) return p;
  }
  throw std::out_of_range(std::string("split has no part ") + to_string(name));
}

bool SplitAssignment::has_part(PartName name) const {
  for (const auto& p : parts) {
    if (p.name == name) return true;
  }
  return false;
}

std::map<std::string, PartName> SplitAssignment::subject_parts() const {
  std::map<std::string, PartName> out;
  for (const auto& p : parts) {
    for (const auto& id : p.subject_ids) out.emplace(id, p.name);
  }
  return out;
}

std::vector<PartName> part_names_for(std::size_t num_ratios) {
  switch (num_ratios) {
    case 3: return {PartName::Train, PartName::Val, PartName::Test};
    case 4: return {PartName::Train, PartName::Val, PartName::Test, PartName::Generate};
    default: throw std::invalid_argument("split ratios must have 3 or 4 entries");
  }
}

}  // namespace longimpute
