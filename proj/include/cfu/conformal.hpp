#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfu/error.hpp"
#include "cfu/probability_matrix.hpp"
#include "cfu/rng.hpp"
#include "cfu/text_io.hpp"

namespace cfu {

/// S(x, y) = 1 - p_y(x).
inline double nonconformity(std::span<const double> probs, int label) {
  if (label < 0 || label >= static_cast<int>(probs.size())) {
    throw IndexError("label " + std::to_string(label) + " out of range for K=" +
                     std::to_string(probs.size()));
  }
  return 1.0 - probs[label];
}

/// Which order statistic of the calibration scores becomes the threshold.
enum class QuantileRule {
  /// ceil((n+1)(1-alpha))-th smallest; carries the finite-sample guarantee.
  kCorrected,
  /// ceil(n(1-alpha))-th smallest; for sensitivity checks only.
  kEmpirical,
};

/// 1-based rank of the threshold order statistic. May exceed n for the
/// corrected rule, meaning "include every label". A relative slack of 1e-9
/// absorbs representation error in (n+1)(1-alpha), so 20 * 0.95 ranks 19.
inline std::size_t quantile_rank(std::size_t n, double alpha, QuantileRule rule = QuantileRule::kCorrected) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
  const double m = static_cast<double>(rule == QuantileRule::kCorrected ? n + 1 : n);
  const double x = m * (1.0 - alpha);
  const double k = std::ceil(x - 1e-9 * std::max(1.0, x));
  return std::max<std::size_t>(1, static_cast<std::size_t>(k));
}

class ConformalCalibrator {
 public:
  static constexpr double kIncludeAll = std::numeric_limits<double>::infinity();

  /// Fits the threshold on true-label calibration scores.
  static ConformalCalibrator fit(std::vector<double> scores, double alpha, int num_classes,
                                 QuantileRule rule = QuantileRule::kCorrected) {
    if (scores.empty()) throw CalibrationError("calibration split is empty");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
    for (double s : scores) {
      if (!(s >= 0.0 && s <= 1.0)) throw CalibrationError("calibration score outside [0,1]");
    }
    ConformalCalibrator c;
    c.alpha_ = alpha;
    c.num_classes_ = num_classes;
    c.rule_ = rule;
    std::stable_sort(scores.begin(), scores.end());
    c.scores_ = std::move(scores);
    const auto rank = quantile_rank(c.scores_.size(), alpha, rule);
    c.q_hat_ = rank > c.scores_.size() ? kIncludeAll : c.scores_[rank - 1];
    return c;
  }

  double alpha() const { return alpha_; }
  int num_classes() const { return num_classes_; }
  QuantileRule rule() const { return rule_; }
  const std::vector<double>& scores() const { return scores_; }
  double q_hat() const { return q_hat_; }
  bool include_all() const { return q_hat_ == kIncludeAll; }
  /// q_hat with the include-all sentinel mapped to 1, the largest possible
  /// score (both thresholds admit every label).
  double threshold_value() const { return include_all() ? 1.0 : q_hat_; }

 private:
  double alpha_ = 0.05;
  int num_classes_ = 0;
  QuantileRule rule_ = QuantileRule::kCorrected;
  std::vector<double> scores_;
  double q_hat_ = kIncludeAll;
};

inline std::vector<double> true_label_scores(const ProbabilityMatrix& m,
                                             const std::vector<SampleId>& ids) {
  std::vector<double> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    const auto& r = m.at(id);
    out.push_back(nonconformity(r.probs, r.label));
  }
  return out;
}

/// Calibrates on the rows of `m` named by `calib_ids` (D_c).
inline ConformalCalibrator calibrate(const ProbabilityMatrix& m, const std::vector<SampleId>& calib_ids,
                                     double alpha, QuantileRule rule = QuantileRule::kCorrected) {
  if (calib_ids.empty()) throw CalibrationError("calibration split is empty");
  return ConformalCalibrator::fit(true_label_scores(m, calib_ids), alpha, m.num_classes(), rule);
}

/// {j : 1 - p_j <= q_hat}, ascending.
inline std::vector<int> prediction_set(std::span<const double> probs, double q_hat) {
  std::vector<int> set;
  for (int j = 0; j < static_cast<int>(probs.size()); ++j) {
    if (1.0 - probs[j] <= q_hat) set.push_back(j);
  }
  return set;
}

/// Per-sample label sets, addressable by sample id.
class PredictionSetBatch {
 public:
  PredictionSetBatch() = default;
  explicit PredictionSetBatch(int num_labels) : num_labels_(num_labels) {}

  void add(SampleId id, std::vector<int> set) {
    if (!index_.emplace(id, sets_.size()).second) {
      throw ConsistencyError("duplicate prediction set for id " + std::to_string(id));
    }
    ids_.push_back(id);
    sets_.push_back(std::move(set));
  }

  int num_labels() const { return num_labels_; }
  std::size_t size() const { return sets_.size(); }
  const std::vector<SampleId>& ids() const { return ids_; }

  const std::vector<int>* find(SampleId id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &sets_[it->second];
  }

  const std::vector<int>& at(SampleId id) const {
    if (const auto* s = find(id)) return *s;
    throw ConsistencyError("no prediction set for sample id " + std::to_string(id));
  }

  bool contains(SampleId id, int label) const {
    const auto& s = at(id);
    return std::binary_search(s.begin(), s.end(), label);
  }

 private:
  int num_labels_ = 0;
  std::vector<SampleId> ids_;
  std::vector<std::vector<int>> sets_;
  std::unordered_map<SampleId, std::size_t> index_;
};

inline PredictionSetBatch prediction_sets(const ProbabilityMatrix& m, const ConformalCalibrator& cal) {
  if (m.num_classes() != cal.num_classes()) {
    throw DimensionError("matrix has K=" + std::to_string(m.num_classes()) +
                         " but calibrator was fit with K=" + std::to_string(cal.num_classes()));
  }
  PredictionSetBatch out(m.num_classes());
  for (const auto& r : m.rows()) out.add(r.id, prediction_set(r.probs, cal.q_hat()));
  return out;
}

// ---------------------------------------------------------------------------
// Calibration-size stability

struct StabilitySample {
  std::size_t size = 0;
  int repeat = 0;
  double q_hat = 0.0;
};

struct StabilitySummary {
  std::size_t size = 0;
  double mean = 0.0;
  double std = 0.0;
};

struct StabilityResult {
  std::vector<StabilitySample> samples;
  std::vector<StabilitySummary> summary;
};

/// For each size, draws `repeats` subsamples of the pool's true-label scores
/// without replacement and calibrates each. Include-all thresholds are
/// recorded as 1. The std is the n-1 sample standard deviation.
inline StabilityResult stability_study(const std::vector<double>& pool_scores,
                                       const std::vector<std::size_t>& sizes, int repeats,
                                       double alpha, std::uint64_t seed,
                                       QuantileRule rule = QuantileRule::kCorrected) {
  if (repeats < 2) throw ConfigError("stability study needs repeats >= 2");
  if (sizes.empty()) throw ConfigError("stability study needs at least one size");
  for (auto s : sizes) {
    if (s == 0 || s > pool_scores.size()) {
      throw ConfigError("calibration size " + std::to_string(s) + " exceeds pool of " +
                        std::to_string(pool_scores.size()));
    }
  }
  Rng rng = make_rng(seed, "conformal.stability");
  StabilityResult out;
  std::vector<double> work;
  for (auto size : sizes) {
    std::vector<double> qs;
    for (int r = 0; r < repeats; ++r) {
      work = pool_scores;
      for (std::size_t i = 0; i < size; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, work.size() - 1);
        std::swap(work[i], work[pick(rng)]);
      }
      work.resize(size);
      const auto cal = ConformalCalibrator::fit(work, alpha, 0, rule);
      qs.push_back(cal.threshold_value());
      out.samples.push_back({size, r, qs.back()});
    }
    // Shifted mean: exactly qs[0] when every repeat agrees.
    double shift = 0.0;
    for (double q : qs) shift += q - qs[0];
    const double mean = qs[0] + shift / static_cast<double>(qs.size());
    double ss = 0.0;
    for (double q : qs) ss += (q - mean) * (q - mean);
    out.summary.push_back({size, mean, std::sqrt(ss / static_cast<double>(qs.size() - 1))});
  }
  return out;
}

inline void write_stability_samples(std::ostream& out, const StabilityResult& r) {
  out << "size,repeat,q_hat\n";
  for (const auto& s : r.samples) out << s.size << ',' << s.repeat << ',' << text::format_exact(s.q_hat) << '\n';
}

inline void write_stability_summary(std::ostream& out, const StabilityResult& r) {
  out << "size,mean,std\n";
  for (const auto& s : r.summary) {
    out << s.size << ',' << text::format_exact(s.mean) << ',' << text::format_exact(s.std) << '\n';
  }
}

}  // namespace cfu
