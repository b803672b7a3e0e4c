#include "longimpute/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <tuple>

namespace longimpute {

namespace {

std::vector<std::size_t> cut_sizes(std::span<const double> ratios, std::size_t total) {
  if (ratios.empty()) throw std::invalid_argument("no split ratios given");
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw std::invalid_argument("split ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
  std::vector<std::size_t> sizes;
  std::size_t assigned = 0;
  for (double r : ratios) {
    // The small offset keeps products such as 0.29 * 100 from flooring low.
    const auto k = static_cast<std::size_t>(std::floor(r * static_cast<double>(total) + 1e-9));
    sizes.push_back(k);
    assigned += k;
  }
  sizes[0] += total - assigned;
  return sizes;
}

Dataset empty_like(const Dataset& d) {
  Dataset out;
  out.feature_schema = d.feature_schema;
  out.descriptor_schema = d.descriptor_schema;
  out.category_labels = d.category_labels;
  return out;
}

void renumber(SubjectSeries& s, std::optional<Eigen::Index> column) {
  if (!column) return;
  for (std::size_t t = 0; t < s.steps.size(); ++t) {
    auto& f = s.steps[t].features;
    if (f.size() > *column) f(*column) = static_cast<double>(t + 1);
  }
}

std::optional<Eigen::Index> feature_column(const Dataset& d, const std::string& name) {
  if (name.empty()) return std::nullopt;
  for (std::size_t i = 0; i < d.feature_schema.size(); ++i) {
    if (d.feature_schema[i] == name) return static_cast<Eigen::Index>(i);
  }
  return std::nullopt;
}

}  // namespace

std::vector<std::size_t> part_sizes(std::span<const double> ratios, std::size_t total) {
  auto sizes = cut_sizes(ratios, total);
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    if (sizes[k] == 0) {
      throw EmptyPart("split part " + std::to_string(k) + " would be empty (" + std::to_string(total) + " items)");
    }
  }
  return sizes;
}

SplitAssignment split(const Dataset& dataset, SplitMode mode, std::span<const double> ratios, std::uint64_t seed) {
  const auto names = part_names_for(ratios.size());
  SplitAssignment out;
  out.mode = mode;
  out.ratios.assign(ratios.begin(), ratios.end());

  if (mode == SplitMode::SubjectBased) {
    std::vector<std::string> ids;
    for (const auto& s : dataset.subjects) ids.push_back(s.subject_id);
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto sizes = part_sizes(ratios, ids.size());
    std::size_t at = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      SplitPart part;
      part.name = names[k];
      part.subject_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(at),
                              ids.begin() + static_cast<std::ptrdiff_t>(at + sizes[k]));
      at += sizes[k];
      out.parts.push_back(std::move(part));
    }
  } else {
    const std::size_t n = total_rows(dataset);
    const auto sizes = part_sizes(ratios, n);
    std::size_t at = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      SplitPart part;
      part.name = names[k];
      part.rows.resize(sizes[k]);
      std::iota(part.rows.begin(), part.rows.end(), at);
      at += sizes[k];
      out.parts.push_back(std::move(part));
    }
  }
  return out;
}

PartDatasets materialize(const Dataset& dataset, const SplitAssignment& split) {
  PartDatasets out;
  if (split.mode == SplitMode::SubjectBased) {
    const auto membership = split.subject_parts();
    for (const auto& part : split.parts) out.emplace(part.name, empty_like(dataset));
    for (const auto& s : dataset.subjects) {
      auto it = membership.find(s.subject_id);
      if (it == membership.end()) throw UnknownSubject("subject " + s.subject_id + " is in no split part");
      out.at(it->second).subjects.push_back(s);
    }
    return out;
  }

  const auto rows = global_rows(dataset);
  for (const auto& part : split.parts) {
    Dataset d = empty_like(dataset);
    std::map<std::size_t, std::size_t> local;  // original subject -> part subject
    for (std::size_t r : part.rows) {
      if (r >= rows.size()) throw std::out_of_range("split row index beyond dataset");
      const RowRef ref = rows[r];
      const auto& src = dataset.subjects[ref.subject];
      auto [it, inserted] = local.emplace(ref.subject, d.subjects.size());
      if (inserted) {
        SubjectSeries frag;
        frag.subject_id = src.subject_id;
        frag.school_id = src.school_id;
        frag.descriptors = src.descriptors;
        d.subjects.push_back(std::move(frag));
      }
      auto& dst = d.subjects[it->second];
      dst.steps.push_back(src.steps[ref.step]);
      d.row_order.push_back({it->second, dst.steps.size() - 1});
    }
    out.emplace(part.name, std::move(d));
  }
  return out;
}

std::vector<MissingSkeleton> identify_missing(const Dataset& dataset,
                                              const std::map<std::string, std::string>& school_of,
                                              const std::map<std::string, Schedule>& schedule_of) {
  std::vector<MissingSkeleton> out;
  for (const auto& s : dataset.subjects) {
    auto school = school_of.find(s.subject_id);
    if (school == school_of.end()) throw UnknownSchool("subject " + s.subject_id + " has no school");
    auto schedule = schedule_of.find(school->second);
    if (schedule == schedule_of.end() || schedule->second.empty()) {
      throw UnknownSchool("school " + school->second + " has no quiz schedule");
    }
    std::set<double> seen;
    for (const auto& step : s.steps) seen.insert(step.event_time);
    MissingSkeleton sk;
    sk.subject_id = s.subject_id;
    sk.school_id = school->second;
    sk.descriptors = s.descriptors;
    std::set_difference(schedule->second.begin(), schedule->second.end(), seen.begin(), seen.end(),
                        std::back_inserter(sk.times));
    if (!sk.times.empty()) out.push_back(std::move(sk));
  }
  return out;
}

std::map<std::string, std::string> school_map(const Dataset& dataset, const std::string& column) {
  std::map<std::string, std::string> out;
  if (column == "school_id") {
    for (const auto& s : dataset.subjects) out[s.subject_id] = s.school_id;
    return out;
  }
  for (std::size_t q = 0; q < dataset.descriptor_schema.size(); ++q) {
    if (dataset.descriptor_schema[q].name != column) continue;
    if (dataset.descriptor_schema[q].kind != DescriptorKind::Categorical) {
      throw std::invalid_argument("school column " + column + " is not categorical");
    }
    const auto& labels = dataset.category_labels.at(q);
    for (const auto& s : dataset.subjects) {
      const auto code = static_cast<std::size_t>(s.descriptors(static_cast<Eigen::Index>(q)));
      out[s.subject_id] = labels.at(code);
    }
    return out;
  }
  throw std::invalid_argument("no descriptor column named " + column);
}

std::vector<MissingSkeleton> skeleton_of(const Dataset& dataset) {
  std::vector<MissingSkeleton> out;
  for (const auto& s : dataset.subjects) {
    MissingSkeleton sk{s.subject_id, s.school_id, s.descriptors, {}};
    for (const auto& step : s.steps) sk.times.push_back(step.event_time);
    std::sort(sk.times.begin(), sk.times.end());
    out.push_back(std::move(sk));
  }
  return out;
}

const char* to_string(Padding padding) {
  switch (padding) {
    case Padding::Zero: return "zero";
    case Padding::Ffill: return "ffill";
    case Padding::Bfill: return "bfill";
  }
  return "?";
}

Padding padding_from_string(const std::string& name) {
  if (name == "zero") return Padding::Zero;
  if (name == "ffill") return Padding::Ffill;
  if (name == "bfill") return Padding::Bfill;
  throw std::invalid_argument("unknown padding strategy: " + name);
}

Aligned align(const Eigen::MatrixXd& sequence, const PaddingStrategy& strategy) {
  if (strategy.length < 1) throw std::invalid_argument("fixed length must be at least 1");
  const Eigen::Index n = sequence.rows();
  if (n == 0) throw EmptySequence("cannot align an empty sequence");
  const Eigen::Index T = strategy.length;
  const Eigen::Index keep = std::min(n, T);
  Aligned out;
  out.values.resize(T, sequence.cols());
  out.mask = Eigen::VectorXd::Zero(T);
  out.values.topRows(keep) = sequence.topRows(keep);
  out.mask.head(keep).setOnes();
  for (Eigen::Index t = keep; t < T; ++t) {
    switch (strategy.padding) {
      case Padding::Zero: out.values.row(t).setZero(); break;
      case Padding::Ffill: out.values.row(t) = sequence.row(n - 1); break;
      case Padding::Bfill: out.values.row(t) = sequence.row(0); break;
    }
  }
  return out;
}

Eigen::Index default_fixed_length(const Dataset& dataset) {
  if (dataset.subjects.empty()) return 1;
  const double avg = static_cast<double>(total_rows(dataset)) / static_cast<double>(dataset.subjects.size());
  const auto rounded = static_cast<Eigen::Index>(std::llround(avg / 10.0) * 10);
  if (rounded >= 1) return rounded;
  return std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(avg)));
}

MinMaxScaler::MinMaxScaler(Eigen::RowVectorXd min, Eigen::RowVectorXd max)
    : min_(std::move(min)), max_(std::move(max)), fitted_(true) {
  if (min_.size() != max_.size()) throw std::invalid_argument("scaler min/max sizes differ");
  if ((max_.array() < min_.array()).any()) throw std::invalid_argument("scaler max below min");
}

void MinMaxScaler::fit(const Eigen::MatrixXd& rows) {
  if (rows.rows() < 1) throw std::invalid_argument("scaler needs at least one row to fit");
  min_ = rows.colwise().minCoeff();
  max_ = rows.colwise().maxCoeff();
  fitted_ = true;
}

void MinMaxScaler::require_fitted(Eigen::Index cols) const {
  if (!fitted_) throw NotFitted("scaler used before fit");
  if (cols != min_.size()) throw std::invalid_argument("scaler column count mismatch");
}

Eigen::MatrixXd MinMaxScaler::scale(const Eigen::MatrixXd& rows) const {
  require_fitted(rows.cols());
  Eigen::MatrixXd out(rows.rows(), rows.cols());
  for (Eigen::Index c = 0; c < rows.cols(); ++c) {
    const double range = max_(c) - min_(c);
    if (range > 0.0) {
      out.col(c) = (rows.col(c).array() - min_(c)) / range;
    } else {
      out.col(c).setZero();
    }
  }
  return out;
}

Eigen::MatrixXd MinMaxScaler::inverse_scale(const Eigen::MatrixXd& rows) const {
  require_fitted(rows.cols());
  Eigen::MatrixXd out(rows.rows(), rows.cols());
  for (Eigen::Index c = 0; c < rows.cols(); ++c) {
    const double range = max_(c) - min_(c);
    out.col(c) = rows.col(c).array() * range + min_(c);
  }
  return out;
}

Eigen::MatrixXd feature_matrix(const SubjectSeries& subject) {
  Eigen::Index n = 0, D = 0;
  for (const auto& step : subject.steps) {
    if (step.features.size() > 0) {
      ++n;
      D = step.features.size();
    }
  }
  Eigen::MatrixXd out(n, D);
  Eigen::Index r = 0;
  for (const auto& step : subject.steps) {
    if (step.features.size() > 0) out.row(r++) = step.features.transpose();
  }
  return out;
}

Eigen::MatrixXd feature_rows(const Dataset& dataset) {
  Eigen::Index n = 0;
  for (const auto& s : dataset.subjects) {
    for (const auto& step : s.steps) n += step.features.size() > 0 ? 1 : 0;
  }
  Eigen::MatrixXd out(n, static_cast<Eigen::Index>(dataset.num_features()));
  Eigen::Index r = 0;
  for (const auto& s : dataset.subjects) {
    for (const auto& step : s.steps) {
      if (step.features.size() > 0) out.row(r++) = step.features.transpose();
    }
  }
  return out;
}

Dataset merge_by_id(const Dataset& original, const Dataset& generated, const std::string& sequence_feature) {
  Dataset out = original;
  out.row_order.clear();
  const auto seq_col = feature_column(original, sequence_feature);
  for (const auto& gen : generated.subjects) {
    auto idx = out.find(gen.subject_id);
    if (!idx) throw UnknownSubject("generated rows for unknown subject " + gen.subject_id);
    auto& dst = out.subjects[*idx];
    dst.steps.insert(dst.steps.end(), gen.steps.begin(), gen.steps.end());
    std::stable_sort(dst.steps.begin(), dst.steps.end(),
                     [](const TimeStep& a, const TimeStep& b) { return a.event_time < b.event_time; });
    renumber(dst, seq_col);
  }
  return out;
}

PartDatasets impute(const Dataset& original, const SplitAssignment& split, const Dataset& generated,
                    ImputeMode mode, double fraction, std::uint64_t selection_seed,
                    const std::string& sequence_feature) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("imputation fraction must be in [0,1]");
  if (mode == ImputeMode::ById && split.mode != SplitMode::SubjectBased) {
    throw std::invalid_argument("ById imputation needs a subject-based split");
  }
  if (mode == ImputeMode::ByRow && split.mode != SplitMode::RowBased) {
    throw std::invalid_argument("ByRow imputation needs a row-based split");
  }
  for (const auto& g : generated.subjects) {
    if (!original.find(g.subject_id)) throw UnknownSubject("generated rows for unknown subject " + g.subject_id);
  }

  const std::size_t P = generated.subjects.size();
  const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(P) + 0.5));
  std::vector<std::size_t> order(P);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(selection_seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> selected(P, false);
  for (std::size_t i = 0; i < keep; ++i) selected[order[i]] = true;

  PartDatasets parts = materialize(original, split);
  const auto seq_col = feature_column(original, sequence_feature);

  if (mode == ImputeMode::ById) {
    const auto membership = split.subject_parts();
    for (std::size_t g = 0; g < P; ++g) {
      if (!selected[g]) continue;
      const auto& gen = generated.subjects[g];
      auto home = membership.find(gen.subject_id);
      if (home == membership.end()) throw UnknownSubject("subject " + gen.subject_id + " is in no split part");
      Dataset& part = parts.at(home->second);
      auto idx = part.find(gen.subject_id);
      if (!idx) throw UnknownSubject("subject " + gen.subject_id + " missing from its home part");
      auto& dst = part.subjects[*idx];
      dst.steps.insert(dst.steps.end(), gen.steps.begin(), gen.steps.end());
      std::stable_sort(dst.steps.begin(), dst.steps.end(),
                       [](const TimeStep& a, const TimeStep& b) { return a.event_time < b.event_time; });
      renumber(dst, seq_col);
    }
    return parts;
  }

  // ByRow: selected generated rows in global time order, cut by the ratios.
  std::vector<std::tuple<double, std::size_t, std::size_t>> rows;  // time, original subject, step
  std::map<std::size_t, std::size_t> gen_of;                       // original subject -> generated index
  for (std::size_t g = 0; g < P; ++g) {
    if (!selected[g]) continue;
    const std::size_t home = *original.find(generated.subjects[g].subject_id);
    gen_of[home] = g;
    for (std::size_t t = 0; t < generated.subjects[g].steps.size(); ++t) {
      rows.emplace_back(generated.subjects[g].steps[t].event_time, home, t);
    }
  }
  std::sort(rows.begin(), rows.end());
  const auto sizes = rows.empty() ? std::vector<std::size_t>(split.parts.size(), 0) : cut_sizes(split.ratios, rows.size());
  std::size_t at = 0;
  for (std::size_t k = 0; k < split.parts.size(); ++k) {
    Dataset& part = parts.at(split.parts[k].name);
    std::set<std::size_t> touched;
    for (std::size_t i = 0; i < sizes[k]; ++i, ++at) {
      const auto [time, home, step] = rows[at];
      const auto& src = original.subjects[home];
      auto idx = part.find(src.subject_id);
      if (!idx) {
        SubjectSeries frag;
        frag.subject_id = src.subject_id;
        frag.school_id = src.school_id;
        frag.descriptors = src.descriptors;
        part.subjects.push_back(std::move(frag));
        idx = part.subjects.size() - 1;
      }
      auto& dst = part.subjects[*idx];
      dst.steps.push_back(generated.subjects[gen_of.at(home)].steps[step]);
      part.row_order.push_back({*idx, dst.steps.size() - 1});
      touched.insert(*idx);
    }
    for (auto i : touched) renumber(part.subjects[i], seq_col);
  }
  return parts;
}

std::vector<AlignedSubject> align_subjects(const Dataset& dataset, const MinMaxScaler& scaler,
                                           const PaddingStrategy& strategy) {
  std::vector<AlignedSubject> out;
  out.reserve(dataset.subjects.size());
  const Eigen::Index T = strategy.length;
  for (const auto& s : dataset.subjects) {
    const Eigen::MatrixXd raw = feature_matrix(s);
    if (raw.rows() != static_cast<Eigen::Index>(s.steps.size())) {
      throw std::invalid_argument("subject " + s.subject_id + " has steps without features");
    }
    const Aligned a = align(scaler.scale(raw), strategy);
    AlignedSubject as;
    as.features = a.values;
    as.mask = a.mask;
    as.targets = Eigen::VectorXd::Zero(T);
    as.target_mask = Eigen::VectorXd::Zero(T);
    as.times = Eigen::VectorXd::Zero(T);
    const Eigen::Index keep = std::min<Eigen::Index>(T, static_cast<Eigen::Index>(s.steps.size()));
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto& step = s.steps[static_cast<std::size_t>(std::min(t, keep - 1))];
      as.times(t) = step.event_time;
      if (t < keep && step.target) {
        as.targets(t) = *step.target;
        as.target_mask(t) = 1.0;
      }
    }
    as.descriptors = s.descriptors;
    out.push_back(std::move(as));
  }
  return out;
}

SequenceBatch make_batch(std::span<const AlignedSubject> subjects, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const auto B = static_cast<Eigen::Index>(indices.size());
  const auto& first = subjects[indices[0]];
  const Eigen::Index T = first.features.rows();
  const Eigen::Index D = first.features.cols();
  SequenceBatch b;
  b.inputs.assign(static_cast<std::size_t>(T), Eigen::MatrixXd(B, D));
  b.mask.resize(B, T);
  b.targets.resize(B, T);
  b.target_mask.resize(B, T);
  b.times.resize(B, T);
  b.descriptors.resize(B, first.descriptors.size());
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& s = subjects[indices[static_cast<std::size_t>(i)]];
    if (s.features.rows() != T) throw std::invalid_argument("batch members have different lengths");
    for (Eigen::Index t = 0; t < T; ++t) b.inputs[static_cast<std::size_t>(t)].row(i) = s.features.row(t);
    b.mask.row(i) = s.mask.transpose();
    b.targets.row(i) = s.targets.transpose();
    b.target_mask.row(i) = s.target_mask.transpose();
    b.times.row(i) = s.times.transpose();
    b.descriptors.row(i) = s.descriptors.transpose();
  }
  return b;
}

std::vector<std::vector<std::size_t>> batches_of(std::span<const std::size_t> order, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < order.size(); at += batch_size) {
    const std::size_t end = std::min(order.size(), at + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace longimpute
