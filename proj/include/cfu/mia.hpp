#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfu/conformal.hpp"
#include "cfu/dataset.hpp"
#include "cfu/error.hpp"
#include "cfu/metrics.hpp"
#include "cfu/model.hpp"
#include "cfu/probability_matrix.hpp"
#include "cfu/rng.hpp"
#include "cfu/text_io.hpp"

namespace cfu {

inline constexpr int kAttackFeatureCount = 4;
inline constexpr std::array<std::string_view, kAttackFeatureCount> kAttackFeatureNames = {
    "p_true", "p_max", "ce_loss", "entropy"};

/// Confidence features of one model output, in kAttackFeatureNames order.
using AttackFeatures = std::array<double, kAttackFeatureCount>;

inline AttackFeatures attack_features(std::span<const double> p, int label) {
  double pmax = 0.0, entropy = 0.0;
  for (double v : p) {
    pmax = std::max(pmax, v);
    if (v > 0.0) entropy -= v * std::log(v);
  }
  return {p[label], pmax, cross_entropy(p, label), entropy};
}

inline std::vector<AttackFeatures> extract_features(const ProbabilityMatrix& m,
                                                    const std::vector<SampleId>& ids) {
  std::vector<AttackFeatures> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    const auto& r = m.at(id);
    out.push_back(attack_features(r.probs, r.label));
  }
  return out;
}

/// Logistic regression over standardised attack features. Output is the
/// probability of label 1 (training member).
struct AttackModel {
  AttackFeatures weights{};
  double bias = 0.0;
  AttackFeatures feature_mean{};
  AttackFeatures feature_scale{1.0, 1.0, 1.0, 1.0};
  int iterations = 0;
  std::uint64_t seed = 0;

  double member_probability(const AttackFeatures& f) const {
    double z = bias;
    for (int j = 0; j < kAttackFeatureCount; ++j) {
      z += weights[j] * (f[j] - feature_mean[j]) / feature_scale[j];
    }
    return 1.0 / (1.0 + std::exp(-z));
  }

  /// 1 (member) iff P(member) >= 0.5.
  int predict(const AttackFeatures& f) const { return member_probability(f) >= 0.5 ? 1 : 0; }

  friend bool operator==(const AttackModel&, const AttackModel&) = default;
};

struct AttackTrainConfig {
  int max_iterations = 500;
  double tolerance = 1e-6;
  double learning_rate = 0.5;
};

/// Full-batch gradient descent on mean logistic loss, members labelled 1 and
/// non-members 0, from zero weights. Stops when the largest gradient entry
/// drops below the tolerance. Deterministic; `seed` is recorded only.
inline AttackModel train_attack(const std::vector<AttackFeatures>& members,
                                const std::vector<AttackFeatures>& nonmembers, std::uint64_t seed,
                                const AttackTrainConfig& cfg = {}) {
  if (members.empty() || nonmembers.empty()) {
    throw TrainingError("attack training needs both members and non-members");
  }
  AttackModel model;
  model.seed = seed;
  const double n = static_cast<double>(members.size() + nonmembers.size());
  for (int j = 0; j < kAttackFeatureCount; ++j) {
    double mean = 0.0;
    for (const auto* set : {&members, &nonmembers})
      for (const auto& f : *set) mean += f[j];
    mean /= n;
    double var = 0.0;
    for (const auto* set : {&members, &nonmembers})
      for (const auto& f : *set) var += (f[j] - mean) * (f[j] - mean);
    const double sd = std::sqrt(var / n);
    model.feature_mean[j] = mean;
    model.feature_scale[j] = sd > 1e-12 ? sd : 1.0;
  }
  for (int it = 0; it < cfg.max_iterations; ++it) {
    AttackFeatures gw{};
    double gb = 0.0;
    auto accumulate = [&](const std::vector<AttackFeatures>& set, double target) {
      for (const auto& f : set) {
        const double err = model.member_probability(f) - target;
        for (int j = 0; j < kAttackFeatureCount; ++j) {
          gw[j] += err * (f[j] - model.feature_mean[j]) / model.feature_scale[j];
        }
        gb += err;
      }
    };
    accumulate(members, 1.0);
    accumulate(nonmembers, 0.0);
    double gmax = std::abs(gb / n);
    for (double g : gw) gmax = std::max(gmax, std::abs(g / n));
    model.iterations = it + 1;
    if (gmax < cfg.tolerance) break;
    for (int j = 0; j < kAttackFeatureCount; ++j) model.weights[j] -= cfg.learning_rate * gw[j] / n;
    model.bias -= cfg.learning_rate * gb / n;
  }
  return model;
}

/// Percent of `forget` the attack labels as member.
inline double mia_metric(const AttackModel& attack, const std::vector<AttackFeatures>& forget) {
  if (forget.empty()) throw MetricError("mia: empty forget split");
  std::size_t members = 0;
  for (const auto& f : forget) members += static_cast<std::size_t>(attack.predict(f));
  return 100.0 * static_cast<double>(members) / static_cast<double>(forget.size());
}

/// Conformal set over the attack's binary labels {0, 1}.
struct BinarySet {
  bool has0 = false;
  bool has1 = false;
  bool is_exactly_0() const { return has0 && !has1; }
};

/// Nonconformity of binary label `label` given P(member): 1 - P(label).
inline double attack_score(double member_prob, int label) {
  const std::array<double, 2> p = {1.0 - member_prob, member_prob};
  return nonconformity(p, label);
}

inline BinarySet binary_set(double member_prob, double q_hat) {
  return {attack_score(member_prob, 0) <= q_hat, attack_score(member_prob, 1) <= q_hat};
}

/// Calibrates on the attack-calibration split: scores 1 - P(true membership).
inline ConformalCalibrator calibrate_attack(const AttackModel& attack,
                                            const std::vector<AttackFeatures>& features,
                                            const std::vector<int>& membership, double alpha) {
  if (features.size() != membership.size()) throw DimensionError("one membership label per feature row");
  if (features.empty()) throw CalibrationError("attack calibration split is empty");
  std::vector<double> scores;
  scores.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    scores.push_back(attack_score(attack.member_probability(features[i]), membership[i]));
  }
  return ConformalCalibrator::fit(std::move(scores), alpha, 2);
}

struct MiacrResult {
  double miacr = 0.0;
  double q_hat = 0.0;
  std::vector<BinarySet> sets;
  /// Fraction of forget sets that contain label 0 (upper bound on MIACR).
  double frac_contains_0 = 0.0;
};

/// Fraction of forget samples whose binary conformal set is exactly {0}.
inline MiacrResult miacr(const AttackModel& attack, const std::vector<AttackFeatures>& calib_features,
                         const std::vector<int>& calib_membership,
                         const std::vector<AttackFeatures>& forget, double alpha) {
  if (forget.empty()) throw MetricError("miacr: empty forget split");
  const auto cal = calibrate_attack(attack, calib_features, calib_membership, alpha);
  MiacrResult out;
  out.q_hat = cal.q_hat();
  std::size_t exact0 = 0, has0 = 0;
  for (const auto& f : forget) {
    const auto s = binary_set(attack.member_probability(f), cal.q_hat());
    exact0 += s.is_exactly_0() ? 1 : 0;
    has0 += s.has0 ? 1 : 0;
    out.sets.push_back(s);
  }
  out.miacr = static_cast<double>(exact0) / static_cast<double>(forget.size());
  out.frac_contains_0 = static_cast<double>(has0) / static_cast<double>(forget.size());
  return out;
}

/// Forget samples predicted 0 (non-member) whose conformal set still holds 1.
inline RecoveryCounts mia_recovery(const AttackModel& attack, const std::vector<BinarySet>& sets,
                                   const std::vector<AttackFeatures>& forget) {
  if (sets.size() != forget.size()) throw DimensionError("one binary set per forget sample");
  std::size_t mislabel = 0, inset = 0;
  for (std::size_t i = 0; i < forget.size(); ++i) {
    if (attack.predict(forget[i]) == 0) {
      ++mislabel;
      if (sets[i].has1) ++inset;
    }
  }
  return recovery_from_counts(mislabel, inset);
}

// ---------------------------------------------------------------------------
// Protocol

struct MiaRun {
  AttackModel attack;
  MiaMetrics metrics;
  MiacrResult miacr;
  std::size_t train_per_class = 0;
  std::size_t calib_per_class = 0;
};

/// Balanced confidence attack: equal-size shuffled subsamples of D_r
/// (members) and D_test (non-members); 20% of each is held out as the
/// attack-calibration split for MIACR, the rest trains the attack.
inline MiaRun run_mia(const ProbabilityMatrix& m, const SplitAssignment& splits, double alpha,
                      std::uint64_t seed) {
  const std::size_t n = std::min(splits.retain.size(), splits.test.size());
  if (n < 5) throw MetricError("mia: retain and test splits need at least 5 samples each");
  Rng rng = make_rng(seed, "mia.subsample");
  auto draw = [&](std::vector<SampleId> ids) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
      std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(n);
    return ids;
  };
  const auto members = draw(splits.retain);
  const auto nonmembers = draw(splits.test);
  const auto n_cal = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  const auto cut = static_cast<std::ptrdiff_t>(n_cal);

  const std::vector<SampleId> cal_mem(members.begin(), members.begin() + cut);
  const std::vector<SampleId> cal_non(nonmembers.begin(), nonmembers.begin() + cut);
  const std::vector<SampleId> tr_mem(members.begin() + cut, members.end());
  const std::vector<SampleId> tr_non(nonmembers.begin() + cut, nonmembers.end());

  MiaRun run;
  run.train_per_class = tr_mem.size();
  run.calib_per_class = n_cal;
  run.attack = train_attack(extract_features(m, tr_mem), extract_features(m, tr_non), seed);

  auto cal_features = extract_features(m, cal_mem);
  std::vector<int> cal_labels(cal_mem.size(), 1);
  for (const auto& f : extract_features(m, cal_non)) {
    cal_features.push_back(f);
    cal_labels.push_back(0);
  }
  const auto forget = extract_features(m, splits.forget);
  run.miacr = miacr(run.attack, cal_features, cal_labels, forget, alpha);
  run.metrics.mia = mia_metric(run.attack, forget);
  run.metrics.miacr = run.miacr.miacr;
  run.metrics.q_hat = run.miacr.q_hat;
  run.metrics.recovery = mia_recovery(run.attack, run.miacr.sets, forget);
  return run;
}

// ---------------------------------------------------------------------------
// Attack model file: "key value..." lines.

inline void save_attack(const AttackModel& a, const std::string& path) {
  auto out = text::open_out(path);
  auto line = [&](const char* key, const AttackFeatures& v) {
    out << key;
    for (double x : v) out << ' ' << text::format_exact(x);
    out << '\n';
  };
  out << "format cfu-attack 1\n";
  out << "feature_order";
  for (auto n : kAttackFeatureNames) out << ' ' << n;
  out << '\n';
  line("weights", a.weights);
  out << "bias " << text::format_exact(a.bias) << '\n';
  line("feature_mean", a.feature_mean);
  line("feature_scale", a.feature_scale);
  out << "iterations " << a.iterations << '\n';
  out << "seed " << a.seed << '\n';
}

inline AttackModel load_attack(const std::string& path) {
  const auto lines = text::read_lines(path);
  AttackModel a;
  bool seen_format = false;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto ctx = text::where(path, i + 1);
    std::vector<std::string_view> w;
    for (auto t : text::split(text::trim(lines[i]), ' ')) {
      if (!t.empty()) w.push_back(t);
    }
    if (w.empty()) continue;
    auto vec = [&](AttackFeatures& dst) {
      if (w.size() != kAttackFeatureCount + 1) throw ParseError(ctx + ": expected 4 values");
      for (int j = 0; j < kAttackFeatureCount; ++j) dst[j] = text::parse_double(w[j + 1], ctx);
    };
    if (w[0] == "format") {
      if (w.size() != 3 || w[1] != "cfu-attack" || w[2] != "1") throw ParseError(ctx + ": unsupported format");
      seen_format = true;
    } else if (w[0] == "feature_order") {
      if (w.size() != kAttackFeatureCount + 1) throw ParseError(ctx + ": bad feature order");
      for (int j = 0; j < kAttackFeatureCount; ++j) {
        if (w[j + 1] != kAttackFeatureNames[j]) throw ParseError(ctx + ": unexpected feature order");
      }
    } else if (w[0] == "weights") {
      vec(a.weights);
    } else if (w[0] == "bias" && w.size() == 2) {
      a.bias = text::parse_double(w[1], ctx);
    } else if (w[0] == "feature_mean") {
      vec(a.feature_mean);
    } else if (w[0] == "feature_scale") {
      vec(a.feature_scale);
    } else if (w[0] == "iterations" && w.size() == 2) {
      a.iterations = text::parse_int<int>(w[1], ctx);
    } else if (w[0] == "seed" && w.size() == 2) {
      a.seed = text::parse_int<std::uint64_t>(w[1], ctx);
    } else {
      throw ParseError(ctx + ": unknown key '" + std::string(w[0]) + "'");
    }
  }
  if (!seen_format) throw ParseError(path + ": missing 'format' line");
  return a;
}

}  // namespace cfu
