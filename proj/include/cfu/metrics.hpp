#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cfu/conformal.hpp"
#include "cfu/dataset.hpp"
#include "cfu/error.hpp"
#include "cfu/probability_matrix.hpp"
#include "cfu/text_io.hpp"

namespace cfu {

/// UA = 100 (1 - acc(D_f)), RA = 100 acc(D_r), TA = 100 acc(D_test).
struct AccuracyMetrics {
  double ua = 0.0;
  double ra = 0.0;
  double ta = 0.0;
};

inline double split_accuracy(const ProbabilityMatrix& m, const std::vector<SampleId>& ids,
                             std::string_view split_name) {
  if (ids.empty()) throw MetricError("split '" + std::string(split_name) + "' is empty");
  std::size_t correct = 0;
  for (auto id : ids) {
    const auto& r = m.at(id);
    if (argmax(r.probs) == r.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

inline AccuracyMetrics accuracy_metrics(const ProbabilityMatrix& m, const SplitAssignment& s) {
  return {100.0 * (1.0 - split_accuracy(m, s.forget, "forget")),
          100.0 * split_accuracy(m, s.retain, "retain"), 100.0 * split_accuracy(m, s.test, "test")};
}

namespace detail {
inline void require_nonempty(const std::vector<SampleId>& ids) {
  if (ids.empty()) throw MetricError("cannot average a metric over an empty split");
}
}  // namespace detail

/// Mean of 1[y_t in C(x)] over `ids`.
inline double coverage(const PredictionSetBatch& sets, const ProbabilityMatrix& m,
                       const std::vector<SampleId>& ids) {
  detail::require_nonempty(ids);
  std::size_t hit = 0;
  for (auto id : ids) {
    if (sets.contains(id, m.at(id).label)) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(ids.size());
}

/// Mean of |C(x)| over `ids`.
inline double set_size(const PredictionSetBatch& sets, const std::vector<SampleId>& ids) {
  detail::require_nonempty(ids);
  std::size_t total = 0;
  for (auto id : ids) total += sets.at(id).size();
  return static_cast<double>(total) / static_cast<double>(ids.size());
}

struct CrValue {
  double value = 0.0;
  /// Every set was empty; value reported as 0.
  bool all_empty = false;
};

/// Conformal ratio, coverage / set size. Lower on D_f means stronger forgetting.
inline CrValue cr(double coverage_value, double set_size_value) {
  if (coverage_value < 0.0 || set_size_value < 0.0) throw DomainError("cr: negative input");
  if (set_size_value == 0.0) return {0.0, true};
  return {coverage_value / set_size_value, false};
}

/// Fake-unlearning recovery counts. `ratio` is a percentage.
struct RecoveryCounts {
  std::size_t mislabel = 0;
  std::size_t inset = 0;
  double ratio = 0.0;
  /// mislabel == 0; ratio reported as 0.
  bool ratio_undefined = false;
};

inline RecoveryCounts recovery_from_counts(std::size_t mislabel, std::size_t inset) {
  if (inset > mislabel) throw ConsistencyError("in-set count exceeds mis-label count");
  if (mislabel == 0) return {0, 0, 0.0, true};
  return {mislabel, inset, 100.0 * static_cast<double>(inset) / static_cast<double>(mislabel), false};
}

/// Misclassified forget samples (argmax != y_t) and how many of them still
/// have y_t inside their conformal set.
inline RecoveryCounts recovery_analysis(const ProbabilityMatrix& m, const PredictionSetBatch& sets,
                                        const std::vector<SampleId>& forget_ids) {
  detail::require_nonempty(forget_ids);
  std::size_t mislabel = 0, inset = 0;
  for (auto id : forget_ids) {
    const auto& r = m.at(id);
    if (argmax(r.probs) != r.label) {
      ++mislabel;
      if (sets.contains(id, r.label)) ++inset;
    }
  }
  return recovery_from_counts(mislabel, inset);
}

struct ConformalSplitMetrics {
  double coverage = 0.0;
  double set_size = 0.0;
  double cr = 0.0;
  bool cr_all_empty = false;
};

inline ConformalSplitMetrics conformal_split_metrics(const PredictionSetBatch& sets,
                                                     const ProbabilityMatrix& m,
                                                     const std::vector<SampleId>& ids) {
  ConformalSplitMetrics out;
  out.coverage = coverage(sets, m, ids);
  out.set_size = set_size(sets, ids);
  // Every covering set holds at least one label, so coverage <= set size.
  if (out.coverage > out.set_size + 1e-12) throw ConsistencyError("coverage exceeds mean set size");
  const auto c = cr(out.coverage, out.set_size);
  out.cr = c.value;
  out.cr_all_empty = c.all_empty;
  return out;
}

struct MiaMetrics {
  double mia = 0.0;    // percent of D_f labelled member
  double miacr = 0.0;  // fraction of D_f with set exactly {0}
  double q_hat = 0.0;  // may be ConformalCalibrator::kIncludeAll
  RecoveryCounts recovery;
};

/// Everything `eval` (and optionally `mia`) reports for one model.
struct MetricsReport {
  std::string method;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double alpha = 0.05;
  std::size_t calib_size = 0;
  /// Calibration size used / requested (1 when the pool was large enough).
  double calib_scale = 1.0;
  double q_hat = 0.0;
  AccuracyMetrics accuracy;
  ConformalSplitMetrics forget;
  ConformalSplitMetrics test;
  /// Computed for completeness; CR is only meaningful on D_f and D_test.
  ConformalSplitMetrics retain;
  RecoveryCounts recovery;
  std::optional<MiaMetrics> mia;
  std::map<std::string, double> gap_to_retrain;
};

/// Decimal places used when serialising each comparable metric.
inline int metric_decimals(const std::string& key) {
  if (key == "ua" || key == "ra" || key == "ta" || key == "mia") return 1;
  return 3;
}

/// Comparable metrics keyed by their frozen names (unrounded).
inline std::map<std::string, double> comparable_metrics(const MetricsReport& r) {
  std::map<std::string, double> out{
      {"ua", r.accuracy.ua},
      {"ra", r.accuracy.ra},
      {"ta", r.accuracy.ta},
      {"coverage_forget", r.forget.coverage},
      {"set_size_forget", r.forget.set_size},
      {"cr_forget", r.forget.cr},
      {"coverage_test", r.test.coverage},
      {"set_size_test", r.test.set_size},
      {"cr_test", r.test.cr},
  };
  if (r.mia) {
    out["mia"] = r.mia->mia;
    out["miacr"] = r.mia->miacr;
  }
  return out;
}

/// |metric - retrain metric| per key, computed from the values as they would
/// be printed (each side rounded to the metric's serialised precision).
inline std::map<std::string, double> gap_to_retrain(const std::map<std::string, double>& report,
                                                    const std::map<std::string, double>& retrain) {
  if (report.size() != retrain.size()) {
    throw ConsistencyError("gap_to_retrain: reports cover different metric sets");
  }
  std::map<std::string, double> out;
  for (const auto& [key, value] : report) {
    auto it = retrain.find(key);
    if (it == retrain.end()) throw ConsistencyError("gap_to_retrain: retrain report lacks '" + key + "'");
    const int dp = metric_decimals(key);
    out[key] = text::round_to(std::abs(text::round_to(value, dp) - text::round_to(it->second, dp)), dp);
  }
  return out;
}

inline std::map<std::string, double> gap_to_retrain(const MetricsReport& report,
                                                    const MetricsReport& retrain) {
  return gap_to_retrain(comparable_metrics(report), comparable_metrics(retrain));
}

}  // namespace cfu
