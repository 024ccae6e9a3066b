#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"

namespace {

using namespace cfu;

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

TEST(Dataset, RandomForgetTakesTenPercent) {
  DatasetSpec spec;
  spec.seed = 7;
  const auto [ds, s] = generate(spec);
  EXPECT_EQ(s.forget.size(), 100u);
  EXPECT_EQ(s.retain.size(), 900u);
  EXPECT_EQ(s.test.size(), 2000u);
  EXPECT_EQ(s.calib_eval.size(), 2000u);
  EXPECT_EQ(s.calib_unlearn.size(), 500u);
}

TEST(Dataset, ClassWiseForgetTakesWholeClass) {
  DatasetSpec spec;
  spec.forget_class = 2;
  const auto [ds, s] = generate(spec);
  ASSERT_EQ(s.forget.size(), 200u);
  for (auto id : s.forget) EXPECT_EQ(ds.at(id).label, 2);
  for (auto id : s.retain) EXPECT_NE(ds.at(id).label, 2);
}

TEST(Dataset, SameSpecSameAssignment) {
  DatasetSpec spec;
  spec.seed = 11;
  const auto a = generate(spec);
  const auto b = generate(spec);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first.samples[17].features, b.first.samples[17].features);
  spec.seed = 12;
  EXPECT_NE(generate(spec).second.forget, a.second.forget);
}

TEST(Dataset, SplitsAreDisjointAndCalibrationComesFromPool) {
  const auto [ds, s] = generate(DatasetSpec{});
  EXPECT_NO_THROW(s.validate());
  const std::set<SampleId> pool(s.validation_pool.begin(), s.validation_pool.end());
  std::set<SampleId> used;
  for (auto name : {SplitName::kRetain, SplitName::kForget, SplitName::kCalibEval, SplitName::kCalibUnlearn,
                    SplitName::kTest}) {
    for (auto id : s.get(name)) EXPECT_TRUE(used.insert(id).second) << "id " << id;
  }
  for (auto id : s.calib_eval) EXPECT_TRUE(pool.contains(id));
  for (auto id : s.calib_unlearn) EXPECT_TRUE(pool.contains(id));
  for (auto id : s.train_ids()) EXPECT_FALSE(pool.contains(id));
  for (auto id : s.test) EXPECT_FALSE(pool.contains(id));
}

TEST(Dataset, BalancedCalibrationHasEqualClassCounts) {
  const auto [ds, s] = generate(DatasetSpec{});
  std::vector<int> counts(5, 0);
  for (auto id : s.calib_unlearn) ++counts[ds.at(id).label];
  for (int c : counts) EXPECT_EQ(c, 100);
}

TEST(Dataset, InvalidSpecsAreConfigErrors) {
  DatasetSpec spec;
  spec.forget_class = 5;
  EXPECT_THROW(generate(spec), ConfigError);
  spec = DatasetSpec{};
  spec.forget_fraction = 0.0;
  EXPECT_THROW(generate(spec), ConfigError);
  spec = DatasetSpec{};
  spec.num_classes = 1;
  EXPECT_THROW(generate(spec), ConfigError);
}

TEST(SplitFile, RoundTrip) {
  const auto [ds, s] = generate(DatasetSpec{});
  const auto dir = fixture::temp_dir("splits_rt");
  save_splits(s, (dir / "splits.csv").string());
  EXPECT_EQ(load_splits((dir / "splits.csv").string()), s);
}

TEST(SplitFile, DuplicateIdAcrossSplitsIsParseError) {
  const auto lines = lines_of("split,id\nretain,1\nforget,2\ntest,1\n");
  try {
    parse_splits(lines, "dup.csv");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("id 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  }
}

TEST(SplitFile, EmptyFileIsParseError) {
  const auto dir = fixture::temp_dir("splits_empty");
  const auto path = (dir / "empty.csv").string();
  std::ofstream(path).close();
  EXPECT_THROW(load_splits(path), ParseError);
  EXPECT_THROW(parse_splits(lines_of("split,id\n"), "header-only"), ParseError);
}

TEST(SplitFile, MalformedRowsAreParseErrors) {
  EXPECT_THROW(parse_splits(lines_of("split,id\nbogus,1\n"), "x"), ParseError);
  EXPECT_THROW(parse_splits(lines_of("split,id\nretain,abc\n"), "x"), ParseError);
  EXPECT_THROW(parse_splits(lines_of("id,split\nretain,1\n"), "x"), ParseError);
  // Calibration ids must also be pool members.
  EXPECT_THROW(parse_splits(lines_of("split,id\nretain,1\ncalib_eval,2\n"), "x"), ParseError);
}

TEST(DatasetFile, RoundTripIsExact) {
  const auto [ds, s] = generate(fixture::small_spec(3));
  const auto dir = fixture::temp_dir("dataset_rt");
  const auto path = (dir / "dataset.csv").string();
  save_dataset(ds, path);
  const auto back = load_dataset(path);
  EXPECT_EQ(back.num_classes, ds.num_classes);
  EXPECT_EQ(back.dim, ds.dim);
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    EXPECT_EQ(back.samples[i].features, ds.samples[i].features);
  }
}

TEST(DatasetFile, MissingFileIsParseError) {
  EXPECT_THROW(load_dataset("/nonexistent/dataset.csv"), ParseError);
}

}  // namespace
