#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"

namespace {

using namespace cfu;

// Central-difference check: |a - n| <= 1e-4 max(|a|, |n|), or both tiny.
bool close(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  return diff <= 1e-4 * std::max(std::abs(analytic), std::abs(numeric)) || diff < 1e-8;
}

std::vector<double*> entries(MlpParams& p) {
  std::vector<double*> out;
  for (auto* v : {&p.w1, &p.b1, &p.w2, &p.b2})
    for (auto& x : *v) out.push_back(&x);
  return out;
}

MlpParams random_params(int d, int h, int k, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 0.7);
  auto p = MlpParams::zeros(d, h, k);
  for (auto* x : entries(p)) *x = g(rng);
  return p;
}

double sum_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

TEST(Forward, ZeroParamsGiveUniform) {
  const auto p = MlpParams::zeros(3, 4, 5);
  const auto probs = forward(p, std::vector<double>{1.0, -2.0, 3.5});
  for (double v : probs) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Forward, OutputsSumToOne) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int t = 0; t < 50; ++t) {
    const auto p = random_params(4, 6, 7, rng);
    std::vector<double> x(4);
    for (auto& v : x) v = g(rng);
    EXPECT_NEAR(sum_of(forward(p, x)), 1.0, 1e-9);
  }
}

TEST(Forward, BiasOnlyLogitsMatchHighPrecisionSoftmax) {
  auto p = MlpParams::zeros(2, 3, 5);
  p.b2 = {2.0, 0.0, 0.0, 0.0, 0.0};
  const auto probs = forward(p, std::vector<double>{0.3, -0.1});
  // e^2 / (e^2 + 4), evaluated with 40-digit decimal arithmetic.
  EXPECT_NEAR(probs[0], 0.6487856442839393, 1e-15);
  for (int j = 1; j < 5; ++j) EXPECT_NEAR(probs[j], (1.0 - probs[0]) / 4.0, 1e-15);
}

TEST(Forward, WrongInputWidthIsDimensionError) {
  const auto p = MlpParams::zeros(3, 2, 2);
  EXPECT_THROW(forward(p, std::vector<double>{1.0}), DimensionError);
}

TEST(Backward, ZeroLossGradientGivesZeroBundle) {
  std::mt19937_64 rng(2);
  const auto p = random_params(3, 4, 3, rng);
  auto g = backward(p, std::vector<double>{0.1, 0.2, 0.3}, std::vector<double>(3, 0.0));
  for (auto* x : entries(g.d_params)) EXPECT_EQ(*x, 0.0);
}

TEST(Backward, CrossEntropyLogitGradientIsPMinusOnehot) {
  const std::vector<double> p = {0.1, 0.6, 0.3};
  const auto g = cross_entropy_logit_grad(p, 2);
  EXPECT_DOUBLE_EQ(g[0], 0.1);
  EXPECT_DOUBLE_EQ(g[1], 0.6);
  EXPECT_DOUBLE_EQ(g[2], 0.3 - 1.0);
  // And that identity agrees with finite differences of -log softmax(z)_t.
  std::vector<double> z = {0.4, -1.2, 0.9};
  const auto probs = softmax(z);
  const auto analytic = cross_entropy_logit_grad(probs, 1);
  for (int j = 0; j < 3; ++j) {
    auto zp = z, zm = z;
    zp[j] += 1e-5;
    zm[j] -= 1e-5;
    const double num = (cross_entropy(softmax(zp), 1) - cross_entropy(softmax(zm), 1)) / 2e-5;
    EXPECT_TRUE(close(analytic[j], num)) << j;
  }
}

TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  const double h = 1e-5;
  int configs = 0, checked = 0;
  for (; configs < 120; ++configs) {
    const int d = 2 + configs % 4, hid = 3 + configs % 3, k = 2 + configs % 4;
    auto p = random_params(d, hid, k, rng);
    std::vector<double> x(d), up(k);
    for (auto& v : x) v = g(rng);
    for (auto& v : up) v = g(rng);
    auto loss = [&](const MlpParams& q) {
      const auto probs = forward(q, x);
      return std::inner_product(probs.begin(), probs.end(), up.begin(), 0.0);
    };
    auto grad = backward(p, x, up);
    auto analytic = entries(grad.d_params);
    auto params = entries(p);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double saved = *params[i];
      *params[i] = saved + h;
      const double lp = loss(p);
      *params[i] = saved - h;
      const double lm = loss(p);
      *params[i] = saved;
      const double num = (lp - lm) / (2 * h);
      ASSERT_TRUE(close(*analytic[i], num)) << "config " << configs << " entry " << i << ": " << *analytic[i]
                                            << " vs " << num;
      ++checked;
    }
  }
  EXPECT_GE(configs, 100);
  EXPECT_GT(checked, 1000);
}

TEST(Loss, LogitFormMatchesProbabilityForm) {
  const std::vector<double> z = {0.4, -1.2, 0.9, 3.0};
  for (int t = 0; t < 4; ++t) EXPECT_NEAR(cross_entropy_logits(z, t), cross_entropy(softmax(z), t), 1e-12);
  // Past the probability clamp only the logit form keeps growing.
  const std::vector<double> far = {0.0, 100.0};
  EXPECT_NEAR(cross_entropy_logits(far, 0), 100.0, 1e-9);
  EXPECT_NEAR(cross_entropy(softmax(far), 0), -std::log(1e-12), 1e-9);
}

TEST(Sgd, ZeroGradientLeavesParamsUnchanged) {
  std::mt19937_64 rng(4);
  const auto p = random_params(3, 3, 3, rng);
  TrainConfig cfg;
  EXPECT_EQ(sgd_step(p, p.zeros_like(), cfg), p);
}

TEST(Sgd, SmallStepsDecreaseSingleSampleLoss) {
  std::mt19937_64 rng(5);
  auto p = random_params(4, 5, 3, rng);
  const std::vector<double> x = {0.5, -0.3, 1.2, 0.1};
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  double prev = cross_entropy(forward(p, x), 1);
  for (int step = 0; step < 5; ++step) {
    const auto probs = forward(p, x);
    const auto g = backward(p, x, [&] {
      std::vector<double> d(3, 0.0);
      d[1] = -1.0 / probs[1];
      return d;
    }());
    p = sgd_step(p, g.d_params, cfg);
    const double now = cross_entropy(forward(p, x), 1);
    EXPECT_LE(now, prev);
    prev = now;
  }
}

TEST(Train, TwoClassBlobsReachHighAccuracy) {
  // Unit-variance blobs centred at +-3 e_0 in four dimensions.
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Sample> train_set;
  for (SampleId i = 0; i < 200; ++i) {
    const int label = static_cast<int>(i % 2);
    std::vector<double> x(4);
    for (auto& v : x) v = g(rng);
    x[0] += label ? 3.0 : -3.0;
    train_set.push_back({i, x, label});
  }
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.seed = 9;
  const auto r = train(MlpParams::init(4, 16, 2, 9), train_set, cfg);
  EXPECT_GE(accuracy(r.params, train_set), 0.95);
  ASSERT_EQ(r.history.size(), 20u);
  EXPECT_LT(r.history.back().mean_loss, r.history.front().mean_loss);
}

TEST(Train, SameSeedSameParams) {
  const auto [ds, s] = generate(fixture::small_spec(2));
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 2;
  const auto a = train(MlpParams::init(16, 8, 5, 2), ds.select(s.train_ids()), cfg).params;
  const auto b = train(MlpParams::init(16, 8, 5, 2), ds.select(s.train_ids()), cfg).params;
  EXPECT_EQ(a, b);
}

TEST(Train, ExplodingLearningRateIsDivergenceError) {
  const auto [ds, s] = generate(fixture::small_spec(1));
  TrainConfig cfg;
  cfg.learning_rate = 1e200;
  cfg.epochs = 5;
  EXPECT_THROW(train(MlpParams::init(16, 8, 5, 1), ds.select(s.train_ids()), cfg), DivergenceError);
}

TEST(Train, InvalidConfigIsConfigError) {
  const auto [ds, s] = generate(fixture::small_spec(1));
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train(MlpParams::init(16, 8, 5, 1), ds.select(s.train_ids()), cfg), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(6);
  const auto p = random_params(5, 7, 4, rng);
  const auto dir = fixture::temp_dir("ckpt");
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(p, path);
  const auto q = load_checkpoint(path);
  EXPECT_EQ(q, p);
  const std::vector<double> x = {0.1, 0.2, -0.3, 0.4, 2.0};
  EXPECT_EQ(forward(q, x), forward(p, x));
}

TEST(Checkpoint, CorruptFileIsParseError) {
  const auto dir = fixture::temp_dir("ckpt_bad");
  const auto path = (dir / "bad.ckpt").string();
  text::open_out(path) << "cfu-mlp 2\n";
  EXPECT_THROW(load_checkpoint(path), ParseError);
}

TEST(PredictMatrix, OneTaggedRowPerSample) {
  const auto [ds, s] = generate(fixture::small_spec(4));
  const auto p = MlpParams::init(16, 8, 5, 4);
  const auto m = predict_matrix(p, ds, s);
  EXPECT_EQ(m.size(), ds.samples.size());
  for (const auto& r : m.rows()) EXPECT_NEAR(sum_of(r.probs), 1.0, 1e-9);
  for (auto id : s.forget) EXPECT_EQ(m.at(id).split, SplitName::kForget);
  for (auto id : s.calib_eval) EXPECT_EQ(m.at(id).split, SplitName::kCalibEval);
  EXPECT_EQ(m.ids_with_tag(SplitName::kTest).size(), s.test.size());
}

}  // namespace
