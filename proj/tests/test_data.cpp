#include "longimpute/core_types.hpp"
#include "longimpute/io.hpp"
#include "longimpute/checkpoint.hpp"
#include "longimpute/pipeline.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <random>

namespace {

using namespace longimpute;

// Subjects are matched by id: parsing orders them by first appearance in the
// file, which follows the global row order.
void expect_same(const Dataset& a, const Dataset& b) {
  EXPECT_EQ(a.feature_schema, b.feature_schema);
  ASSERT_EQ(a.descriptor_schema.size(), b.descriptor_schema.size());
  for (std::size_t q = 0; q < a.descriptor_schema.size(); ++q) {
    EXPECT_EQ(a.descriptor_schema[q].name, b.descriptor_schema[q].name);
    EXPECT_EQ(a.descriptor_schema[q].kind, b.descriptor_schema[q].kind);
  }
  ASSERT_EQ(a.subjects.size(), b.subjects.size());
  for (const auto& s : a.subjects) {
    const auto idx = b.find(s.subject_id);
    ASSERT_TRUE(idx.has_value()) << s.subject_id;
    const auto& t = b.subjects[*idx];
    EXPECT_EQ(s.school_id, t.school_id);
    EXPECT_EQ(s.descriptors, t.descriptors);
    ASSERT_EQ(s.steps.size(), t.steps.size());
    for (std::size_t k = 0; k < s.steps.size(); ++k) {
      EXPECT_EQ(s.steps[k].event_time, t.steps[k].event_time);
      EXPECT_EQ(s.steps[k].features, t.steps[k].features);
      EXPECT_EQ(s.steps[k].target, t.steps[k].target);
      EXPECT_EQ(s.steps[k].observed, t.steps[k].observed);
    }
  }
  auto keyed = [](const Dataset& d) {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const auto& r : global_rows(d)) out.emplace_back(d.subjects[r.subject].subject_id, r.step);
    return out;
  };
  EXPECT_EQ(keyed(a), keyed(b));
}

Dataset two_subjects() {
  Dataset d;
  d.feature_schema = {"f0"};
  d.descriptor_schema = {{"grade", DescriptorKind::Continuous}};
  d.category_labels = {{}};
  for (const char* id : {"s1", "s2"}) {
    SubjectSeries s;
    s.subject_id = id;
    s.school_id = "k";
    s.descriptors = Eigen::VectorXd::Constant(1, 7.0);
    for (double t : {1.0, 2.0, 3.0}) s.steps.push_back({t, Eigen::VectorXd::Constant(1, t), 0.5, true});
    d.subjects.push_back(s);
  }
  return d;
}

TEST(Validate, WellFormedDatasetHasNoViolations) { EXPECT_TRUE(validate(two_subjects()).empty()); }

TEST(Validate, DuplicateIdReportedOnce) {
  auto d = two_subjects();
  d.subjects[1].subject_id = "s1";
  const auto v = validate(d);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, Violation::Kind::DuplicateId);
  EXPECT_EQ(v[0].subject_id, "s1");
}

TEST(Validate, OtherKinds) {
  auto d = two_subjects();
  d.subjects[0].steps[1].features.resize(2);
  d.subjects[1].steps[0].target = 1.5;
  d.subjects[1].descriptors.resize(0);
  const auto v = validate(d);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0].kind, Violation::Kind::RaggedFeatures);
  EXPECT_EQ(v[1].kind, Violation::Kind::RaggedDescriptors);
  EXPECT_EQ(v[2].kind, Violation::Kind::TargetOutOfRange);

  // An identified-missing step without features is not ragged.
  auto e = two_subjects();
  e.subjects[0].steps.push_back({9.0, Eigen::VectorXd(), std::nullopt, false});
  EXPECT_TRUE(validate(e).empty());
}

// Brute-force oracle: a subject is reported exactly when some adjacent pair
// of its steps is out of order.
TEST(Validate, UnsortedTimeMatchesAdjacentPairScan) {
  std::mt19937_64 rng(60);
  std::bernoulli_distribution coin(0.4);
  for (int rep = 0; rep < 200; ++rep) {
    Dataset d = testing_support::random_dataset(rng, 8, 6);
    std::size_t expected = 0;
    for (auto& s : d.subjects) {
      if (coin(rng)) std::shuffle(s.steps.begin(), s.steps.end(), rng);
      bool bad = false;
      for (std::size_t t = 1; t < s.steps.size(); ++t) bad = bad || s.steps[t].event_time < s.steps[t - 1].event_time;
      expected += bad ? 1 : 0;
    }
    const auto v = validate(d);
    const auto n = std::count_if(v.begin(), v.end(), [](const Violation& x) { return x.kind == Violation::Kind::UnsortedTime; });
    EXPECT_EQ(static_cast<std::size_t>(n), expected);
  }
}

TEST(TotalRows, CorpusTotals) {
  // 3,265 subjects holding 412,397 rows in total.
  Dataset d;
  d.subjects.resize(3265);
  const std::size_t base = 412397 / 3265, extra = 412397 % 3265;
  for (std::size_t p = 0; p < d.subjects.size(); ++p) d.subjects[p].steps.resize(base + (p < extra ? 1 : 0));
  EXPECT_EQ(total_rows(d), 412397u);
  EXPECT_EQ(total_rows(Dataset{}), 0u);
  Dataset small;
  small.subjects.resize(2);
  small.subjects[0].steps.resize(3);
  small.subjects[1].steps.resize(5);
  EXPECT_EQ(total_rows(small), 8u);
}

TEST(Csv, DatasetRoundTripOnRandomCorpora) {
  std::mt19937_64 rng(61);
  for (int rep = 0; rep < 50; ++rep) {
    Dataset d = testing_support::random_dataset(rng, 6, 5, 1 + rep % 3, 3);
    if (rep % 4 == 0) d.subjects[0].steps[0].target.reset();
    const std::string text = io::dataset_to_csv(d);
    const Dataset back = io::parse_dataset_csv(text, &d.category_labels);
    expect_same(d, back);
    EXPECT_EQ(io::dataset_to_csv(back), text);
  }
}

TEST(Csv, FormatDoubleRoundTripsExactly) {
  std::mt19937_64 rng(62);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng) / (1 + i);
    EXPECT_EQ(std::stod(io::format_double(v)), v);
  }
  EXPECT_EQ(io::format_double(0.25), "0.25");
}

TEST(Csv, MalformedInputsRejected) {
  const std::string head = "subject_id,event_time,school_id,g:binary,f0,target\n";
  EXPECT_THROW(io::parse_dataset_csv(""), IoFailure);
  EXPECT_THROW(io::parse_dataset_csv("a,b\n1,2\n"), IoFailure);
  EXPECT_THROW(io::parse_dataset_csv(head + "s,1,k,1,0.5\n"), IoFailure);
  EXPECT_THROW(io::parse_dataset_csv(head + "s,1,k,2,0.5,0.1\n"), IoFailure);
  EXPECT_THROW(io::parse_dataset_csv(head + "s,1,k,1,0.5,0.1\ns,2,k,0,0.5,0.1\n"), IoFailure);
  EXPECT_THROW(io::parse_dataset_csv(head + "s,x,k,1,0.5,0.1\n"), IoFailure);
  EXPECT_THROW(io::parse_dataset_csv(head + "\"s\",1,k,1,0.5,0.1\n"), IoFailure);
  const Dataset ok = io::parse_dataset_csv(head + "s,1,k,1,0.5,\ns,2,k,1,0.7,0.2\n");
  ASSERT_EQ(ok.subjects.size(), 1u);
  EXPECT_FALSE(ok.subjects[0].steps[0].target.has_value());
  EXPECT_EQ(*ok.subjects[0].steps[1].target, 0.2);
}

TEST(Csv, KnownCategoryLabelsKeepTheirCodes) {
  const std::string head = "subject_id,event_time,school_id,c:categorical,f0\n";
  const Dataset a = io::parse_dataset_csv(head + "s,1,k,red,0\nt,1,k,blue,0\n");
  const Dataset b = io::parse_dataset_csv(head + "u,1,k,blue,0\nv,1,k,green,0\n", &a.category_labels);
  EXPECT_EQ(b.subjects[0].descriptors(0), a.subjects[1].descriptors(0));
  EXPECT_EQ(b.subjects[1].descriptors(0), 2.0);
}

TEST(Csv, ScheduleAndSkeletonRoundTrip) {
  std::map<std::string, Schedule> sched{{"a", {1.0, 2.5, 4.0}}, {"b", {0.0, 10.0}}};
  EXPECT_EQ(io::parse_schedule_csv(io::schedule_to_csv(sched)), sched);

  std::mt19937_64 rng(63);
  const Dataset d = testing_support::random_dataset(rng, 4, 3);
  std::vector<MissingSkeleton> sk;
  sk.push_back({d.subjects[1].subject_id, d.subjects[1].school_id, d.subjects[1].descriptors, {3.0, 7.5}});
  sk.push_back({d.subjects[3].subject_id, d.subjects[3].school_id, d.subjects[3].descriptors, {1.0}});
  const auto back = io::parse_skeleton_csv(io::skeleton_to_csv(sk), d);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].subject_id, sk[i].subject_id);
    EXPECT_EQ(back[i].descriptors, sk[i].descriptors);
    EXPECT_EQ(back[i].times, sk[i].times);
  }
  EXPECT_THROW(io::parse_skeleton_csv("subject_id,school_id,event_time\nnobody,k,1\n", d), UnknownSubject);
}

TEST(Files, MissingFileAndRoundTripThroughDisk) {
  const auto dir = std::filesystem::temp_directory_path() / "longimpute_test_data";
  std::filesystem::remove_all(dir);
  EXPECT_THROW(io::read_text(dir / "absent.csv"), MissingArtifact);
  std::mt19937_64 rng(64);
  const Dataset d = testing_support::random_dataset(rng, 3, 4);
  io::write_dataset_csv(d, dir / "nested" / "d.csv");
  expect_same(d, io::read_dataset_csv(dir / "nested" / "d.csv", &d.category_labels));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, BytesRoundTripAndLayout) {
  Checkpoint c;
  c.meta["kind"] = "test";
  c.add("w", Eigen::MatrixXd::Constant(2, 3, 1.5));
  c.add("b", Eigen::MatrixXd::Constant(1, 1, -2.0));
  const std::string bytes = encode_checkpoint(c);
  EXPECT_EQ(bytes.substr(0, 8), "LICKPT01");
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.meta["kind"], "test");
  EXPECT_EQ(back.tensor("w"), c.tensor("w"));
  EXPECT_EQ(back.tensor("b"), c.tensor("b"));
  // The last eight bytes are the little-endian double -2.0.
  double tail = 0.0;
  std::memcpy(&tail, bytes.data() + bytes.size() - 8, 8);
  EXPECT_EQ(tail, -2.0);
}

}  // namespace
