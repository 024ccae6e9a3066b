#include <gtest/gtest.h>

#include "support.hpp"

namespace {

using namespace cfu;

// Correct rows put 0.9 on the label; wrong rows put 0.9 on label + 1.
std::vector<double> peaked(int k, int at) {
  std::vector<double> p(k, 0.1 / (k - 1));
  p[at] = 0.9;
  return p;
}

PredictionSetBatch sets_of(const std::vector<std::vector<int>>& sets, int k = 10) {
  PredictionSetBatch b(k);
  for (std::size_t i = 0; i < sets.size(); ++i) b.add(i, sets[i]);
  return b;
}

TEST(Accuracy, UnlearningAccuracyFromForgetAccuracy) {
  // 4569 of 5000 forget samples correct: 91.38% accuracy.
  std::vector<std::pair<int, std::vector<double>>> rows;
  for (int i = 0; i < 5000; ++i) rows.push_back({0, peaked(3, i < 4569 ? 0 : 1)});
  rows.push_back({1, peaked(3, 1)});
  rows.push_back({2, peaked(3, 2)});
  const auto m = fixture::matrix_of(3, rows);
  SplitAssignment s;
  s.forget = fixture::iota_ids(5000);
  s.retain = {5000};
  s.test = {5001};
  const auto a = accuracy_metrics(m, s);
  EXPECT_NEAR(a.ua, 8.62, 1e-9);
  EXPECT_DOUBLE_EQ(a.ra, 100.0);
  EXPECT_DOUBLE_EQ(a.ta, 100.0);
}

TEST(Accuracy, AllCorrect) {
  const auto m = fixture::matrix_of(2, {{0, {0.8, 0.2}}, {1, {0.3, 0.7}}, {0, {0.6, 0.4}}});
  SplitAssignment s;
  s.forget = {0};
  s.retain = {1};
  s.test = {2};
  const auto a = accuracy_metrics(m, s);
  EXPECT_EQ(a.ua, 0.0);
  EXPECT_EQ(a.ra, 100.0);
  EXPECT_EQ(a.ta, 100.0);
}

TEST(Accuracy, UniformTiesBreakToClassZero) {
  const auto m = fixture::matrix_of(4, {{0, std::vector<double>(4, 0.25)}, {0, std::vector<double>(4, 0.25)}});
  EXPECT_EQ(split_accuracy(m, {0, 1}, "test"), 1.0);
  EXPECT_THROW(split_accuracy(m, {}, "test"), MetricError);
}

TEST(Coverage, Examples) {
  std::vector<std::pair<int, std::vector<double>>> rows;
  for (int i = 0; i < 10; ++i) rows.push_back({i % 3, std::vector<double>(3, 1.0 / 3)});
  const auto m = fixture::matrix_of(3, rows);
  const auto ids = fixture::iota_ids(10);

  std::vector<std::vector<int>> all(10, {0, 1, 2});
  EXPECT_EQ(coverage(sets_of(all, 3), m, ids), 1.0);

  std::vector<std::vector<int>> none;
  for (int i = 0; i < 10; ++i) none.push_back({(i % 3 + 1) % 3});
  EXPECT_EQ(coverage(sets_of(none, 3), m, ids), 0.0);

  // Hand fixture: only sample 4 misses its label.
  auto nine = all;
  nine[4] = {(4 % 3 + 1) % 3};
  EXPECT_DOUBLE_EQ(coverage(sets_of(nine, 3), m, ids), 0.9);
}

TEST(SetSize, Examples) {
  std::vector<std::vector<int>> singletons(6, {3});
  EXPECT_EQ(set_size(sets_of(singletons), fixture::iota_ids(6)), 1.0);

  std::vector<std::vector<int>> half;
  for (int i = 0; i < 10; ++i) {
    half.push_back(i % 2 ? std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9} : std::vector<int>{});
  }
  EXPECT_EQ(set_size(sets_of(half), fixture::iota_ids(10)), 5.0);

  // 89 doubletons among 1000 sets: the retrain forget-split magnitude.
  std::vector<std::vector<int>> rt;
  for (int i = 0; i < 1000; ++i) rt.push_back(i < 89 ? std::vector<int>{0, 1} : std::vector<int>{0});
  EXPECT_NEAR(set_size(sets_of(rt), fixture::iota_ids(1000)), 1.089, 1e-12);
}

TEST(ConformalRatio, Examples) {
  EXPECT_NEAR(cr(0.941, 1.089).value, 0.864, 5e-4);
  EXPECT_EQ(cr(1.0, 1.0).value, 1.0);
  EXPECT_EQ(cr(0.5, 2.0).value, 0.25);
  const auto empty = cr(0.0, 0.0);
  EXPECT_EQ(empty.value, 0.0);
  EXPECT_TRUE(empty.all_empty);
  EXPECT_THROW(cr(-0.1, 1.0), DomainError);
}

TEST(ConformalRatio, CoverageNeverExceedsSetSize) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> label(0, 3);
  std::bernoulli_distribution keep(0.4);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::pair<int, std::vector<double>>> rows;
    std::vector<std::vector<int>> sets;
    for (int i = 0; i < 30; ++i) {
      rows.push_back({label(rng), std::vector<double>(4, 0.25)});
      std::vector<int> s;
      for (int j = 0; j < 4; ++j)
        if (keep(rng)) s.push_back(j);
      sets.push_back(s);
    }
    const auto m = fixture::matrix_of(4, rows);
    const auto r = conformal_split_metrics(sets_of(sets, 4), m, fixture::iota_ids(30));
    EXPECT_LE(r.coverage, r.set_size);
    if (!r.cr_all_empty) {
      EXPECT_LE(r.cr, 1.0);
    }
  }
}

TEST(Recovery, Counts) {
  const auto r = recovery_from_counts(431, 132);
  EXPECT_NEAR(r.ratio, 30.6, 0.05);
  EXPECT_FALSE(r.ratio_undefined);
  const auto none = recovery_from_counts(0, 0);
  EXPECT_EQ(none.ratio, 0.0);
  EXPECT_TRUE(none.ratio_undefined);
  EXPECT_THROW(recovery_from_counts(2, 3), ConsistencyError);
}

TEST(Recovery, HandFixture) {
  // Samples 0-2 misclassified (label 0, argmax 1); sets of 0 and 1 still hold 0.
  const auto m = fixture::matrix_of(3, {{0, peaked(3, 1)},
                                        {0, peaked(3, 1)},
                                        {0, peaked(3, 1)},
                                        {0, peaked(3, 0)},
                                        {0, peaked(3, 0)}});
  const auto sets = sets_of({{0, 1}, {0, 1}, {1}, {0}, {0}}, 3);
  const auto r = recovery_analysis(m, sets, fixture::iota_ids(5));
  EXPECT_EQ(r.mislabel, 3u);
  EXPECT_EQ(r.inset, 2u);
  EXPECT_NEAR(r.ratio, 66.7, 0.05);
}

TEST(Recovery, AllCorrectIsUndefined) {
  const auto m = fixture::matrix_of(3, {{0, peaked(3, 0)}, {2, peaked(3, 2)}});
  const auto r = recovery_analysis(m, sets_of({{0}, {2}}, 3), {0, 1});
  EXPECT_EQ(r.mislabel, 0u);
  EXPECT_TRUE(r.ratio_undefined);
}

TEST(GapToRetrain, PrintedTableValues) {
  const auto gap = gap_to_retrain(std::map<std::string, double>{{"ua", 3.8}, {"cr_forget", 0.986}},
                                  std::map<std::string, double>{{"ua", 8.6}, {"cr_forget", 0.864}});
  EXPECT_EQ(gap.at("ua"), 4.8);
  EXPECT_EQ(gap.at("cr_forget"), 0.122);
}

TEST(GapToRetrain, IdenticalReportsGiveZero) {
  MetricsReport r;
  r.accuracy = {8.62, 99.1, 94.3};
  r.forget = {0.941, 1.089, 0.864, false};
  r.test = {0.95, 1.2, 0.79, false};
  for (const auto& [key, value] : gap_to_retrain(r, r)) EXPECT_EQ(value, 0.0) << key;
}

TEST(GapToRetrain, MismatchedMetricSetsAreRejected) {
  EXPECT_THROW(gap_to_retrain(std::map<std::string, double>{{"ua", 1.0}},
                              std::map<std::string, double>{{"ra", 1.0}}),
               ConsistencyError);
}

}  // namespace
