#include "longimpute/io.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace longimpute::io {

namespace {

double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw IoFailure("bad number '" + s + "' in " + what);
  return v;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

std::string descriptor_text(const Dataset& d, std::size_t q, double v) {
  const auto kind = d.descriptor_schema[q].kind;
  if (kind == DescriptorKind::Categorical) {
    const auto code = static_cast<std::size_t>(v);
    if (q < d.category_labels.size() && code < d.category_labels[q].size()) return d.category_labels[q][code];
    return std::to_string(code);
  }
  if (kind == DescriptorKind::Binary) return v != 0.0 ? "1" : "0";
  return format_double(v);
}

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line) {
  if (line.find('"') != std::string::npos) throw IoFailure("quoted CSV fields are not supported");
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Dataset parse_dataset_csv(const std::string& text, const std::vector<std::vector<std::string>>* known_labels) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw IoFailure("dataset CSV has no header");
  const auto header = split_csv_line(lines[0]);
  int col_subject = -1, col_time = -1, col_school = -1, col_target = -1, col_observed = -1;
  std::vector<int> feature_cols, descriptor_cols;
  Dataset d;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const std::string& h = header[static_cast<std::size_t>(c)];
    if (h == "subject_id") {
      col_subject = c;
    } else if (h == "event_time") {
      col_time = c;
    } else if (h == "school_id") {
      col_school = c;
    } else if (h == "target") {
      col_target = c;
    } else if (h == "observed") {
      col_observed = c;
    } else if (const auto colon = h.rfind(':'); colon != std::string::npos) {
      d.descriptor_schema.push_back({h.substr(0, colon), descriptor_kind_from_string(h.substr(colon + 1))});
      descriptor_cols.push_back(c);
    } else {
      d.feature_schema.push_back(h);
      feature_cols.push_back(c);
    }
  }
  if (col_subject < 0 || col_time < 0) throw IoFailure("dataset CSV needs subject_id and event_time columns");
  const std::size_t Q = descriptor_cols.size();
  d.category_labels.assign(Q, {});
  std::vector<std::map<std::string, std::size_t>> codes(Q);
  if (known_labels) {
    for (std::size_t q = 0; q < Q && q < known_labels->size(); ++q) {
      d.category_labels[q] = (*known_labels)[q];
      for (std::size_t k = 0; k < d.category_labels[q].size(); ++k) codes[q][d.category_labels[q][k]] = k;
    }
  }

  std::map<std::string, std::size_t> index;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto cells = split_csv_line(lines[li]);
    if (cells.size() != header.size()) throw IoFailure("row " + std::to_string(li + 1) + " has the wrong number of cells");
    const std::string& id = cells[static_cast<std::size_t>(col_subject)];
    Eigen::VectorXd desc(static_cast<Eigen::Index>(Q));
    for (std::size_t q = 0; q < Q; ++q) {
      const std::string& cell = cells[static_cast<std::size_t>(descriptor_cols[q])];
      switch (d.descriptor_schema[q].kind) {
        case DescriptorKind::Categorical: {
          auto it = codes[q].find(cell);
          if (it == codes[q].end()) {
            it = codes[q].emplace(cell, d.category_labels[q].size()).first;
            d.category_labels[q].push_back(cell);
          }
          desc(static_cast<Eigen::Index>(q)) = static_cast<double>(it->second);
          break;
        }
        case DescriptorKind::Binary:
          if (cell != "0" && cell != "1") throw IoFailure("binary descriptor value '" + cell + "' is not 0/1");
          desc(static_cast<Eigen::Index>(q)) = cell == "1" ? 1.0 : 0.0;
          break;
        case DescriptorKind::Continuous:
          desc(static_cast<Eigen::Index>(q)) = parse_double(cell, d.descriptor_schema[q].name);
          break;
      }
    }
    auto [it, fresh] = index.emplace(id, d.subjects.size());
    if (fresh) {
      SubjectSeries s;
      s.subject_id = id;
      s.school_id = col_school >= 0 ? cells[static_cast<std::size_t>(col_school)] : "";
      s.descriptors = desc;
      d.subjects.push_back(std::move(s));
    } else if (d.subjects[it->second].descriptors != desc) {
      throw IoFailure("descriptors vary within subject " + id);
    }
    auto& subject = d.subjects[it->second];
    TimeStep step;
    step.event_time = parse_double(cells[static_cast<std::size_t>(col_time)], "event_time");
    bool any_empty = false, all_empty = true;
    for (int c : feature_cols) {
      const bool empty = cells[static_cast<std::size_t>(c)].empty();
      any_empty = any_empty || empty;
      all_empty = all_empty && empty;
    }
    if (any_empty && !all_empty) throw IoFailure("row " + std::to_string(li + 1) + " has partially empty features");
    if (!all_empty || feature_cols.empty()) {
      step.features.resize(static_cast<Eigen::Index>(feature_cols.size()));
      for (std::size_t k = 0; k < feature_cols.size(); ++k) {
        step.features(static_cast<Eigen::Index>(k)) =
            parse_double(cells[static_cast<std::size_t>(feature_cols[k])], d.feature_schema[k]);
      }
    }
    if (col_target >= 0 && !cells[static_cast<std::size_t>(col_target)].empty()) {
      step.target = parse_double(cells[static_cast<std::size_t>(col_target)], "target");
    }
    if (col_observed >= 0) step.observed = cells[static_cast<std::size_t>(col_observed)] != "0";
    subject.steps.push_back(std::move(step));
    d.row_order.push_back({it->second, subject.steps.size() - 1});
  }
  return d;
}

std::string dataset_to_csv(const Dataset& d) {
  std::string out = "subject_id,event_time,school_id";
  for (const auto& f : d.descriptor_schema) out += "," + f.name + ":" + to_string(f.kind);
  for (const auto& name : d.feature_schema) out += "," + name;
  out += ",target,observed\n";
  for (const auto& ref : global_rows(d)) {
    const auto& s = d.subjects[ref.subject];
    const auto& step = s.steps[ref.step];
    out += s.subject_id + "," + format_double(step.event_time) + "," + s.school_id;
    for (std::size_t q = 0; q < d.descriptor_schema.size(); ++q) {
      out += "," + descriptor_text(d, q, s.descriptors(static_cast<Eigen::Index>(q)));
    }
    for (std::size_t k = 0; k < d.feature_schema.size(); ++k) {
      out += ",";
      if (step.features.size() > 0) out += format_double(step.features(static_cast<Eigen::Index>(k)));
    }
    out += "," + (step.target ? format_double(*step.target) : std::string()) + "," + (step.observed ? "1" : "0") + "\n";
  }
  return out;
}

Dataset read_dataset_csv(const std::filesystem::path& path, const std::vector<std::vector<std::string>>* known_labels) {
  return parse_dataset_csv(read_text(path), known_labels);
}

void write_dataset_csv(const Dataset& dataset, const std::filesystem::path& path) {
  write_text(path, dataset_to_csv(dataset));
}

std::map<std::string, Schedule> parse_schedule_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty() || split_csv_line(lines[0]) != std::vector<std::string>{"school_id", "quiz_time"}) {
    throw IoFailure("schedule CSV needs the header school_id,quiz_time");
  }
  std::map<std::string, Schedule> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv_line(lines[i]);
    if (cells.size() != 2) throw IoFailure("schedule row " + std::to_string(i + 1) + " needs two cells");
    out[cells[0]].insert(parse_double(cells[1], "quiz_time"));
  }
  return out;
}

std::string schedule_to_csv(const std::map<std::string, Schedule>& schedules) {
  std::string out = "school_id,quiz_time\n";
  for (const auto& [school, times] : schedules) {
    for (double t : times) out += school + "," + format_double(t) + "\n";
  }
  return out;
}

std::string skeleton_to_csv(const std::vector<MissingSkeleton>& skeletons) {
  std::string out = "subject_id,school_id,event_time\n";
  for (const auto& sk : skeletons) {
    for (double t : sk.times) out += sk.subject_id + "," + sk.school_id + "," + format_double(t) + "\n";
  }
  return out;
}

std::vector<MissingSkeleton> parse_skeleton_csv(const std::string& text, const Dataset& dataset) {
  const auto lines = lines_of(text);
  if (lines.empty() || split_csv_line(lines[0]) != std::vector<std::string>{"subject_id", "school_id", "event_time"}) {
    throw IoFailure("skeleton CSV needs the header subject_id,school_id,event_time");
  }
  std::vector<MissingSkeleton> out;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv_line(lines[i]);
    if (cells.size() != 3) throw IoFailure("skeleton row " + std::to_string(i + 1) + " needs three cells");
    auto [it, fresh] = index.emplace(cells[0], out.size());
    if (fresh) {
      const auto idx = dataset.find(cells[0]);
      if (!idx) throw UnknownSubject("skeleton subject " + cells[0] + " is not in the dataset");
      out.push_back({cells[0], cells[1], dataset.subjects[*idx].descriptors, {}});
    }
    out[it->second].times.push_back(parse_double(cells[2], "event_time"));
  }
  for (auto& sk : out) std::sort(sk.times.begin(), sk.times.end());
  return out;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("missing file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoFailure("cannot write " + path.string());
  out << text;
  if (!out) throw IoFailure("write failed for " + path.string());
}

}  // namespace longimpute::io
