#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include "cfu/conformal.hpp"
#include "cfu/dataset.hpp"
#include "cfu/error.hpp"
#include "cfu/metrics.hpp"
#include "cfu/mia.hpp"
#include "cfu/probability_matrix.hpp"
#include "cfu/rng.hpp"

namespace cfu {

struct EvalConfig {
  double alpha = 0.05;
  /// Requested |D_c|; the available calibration split is subsampled down to
  /// it, or used whole (and the shortfall recorded) when smaller.
  std::size_t calib_size = 2000;
  QuantileRule rule = QuantileRule::kCorrected;
  std::uint64_t seed = 0;
};

/// Every id of the five non-pool splits must have a matrix row.
inline void check_matrix_covers(const ProbabilityMatrix& m, const SplitAssignment& s) {
  for (auto name : {SplitName::kRetain, SplitName::kForget, SplitName::kCalibEval, SplitName::kCalibUnlearn,
                    SplitName::kTest}) {
    for (auto id : s.get(name)) {
      if (m.find(id) == nullptr) {
        throw ConsistencyError("prediction file has no row for sample id " + std::to_string(id) + " of split '" +
                               std::string(to_string(name)) + "'");
      }
    }
  }
}

/// The D_c ids actually used for calibration.
inline std::vector<SampleId> calibration_ids(const SplitAssignment& s, const EvalConfig& cfg) {
  std::vector<SampleId> ids = s.calib_eval;
  if (cfg.calib_size == 0) throw ConfigError("calib_size must be > 0");
  if (ids.size() > cfg.calib_size) {
    Rng rng = make_rng(cfg.seed, "eval.calib_subsample");
    for (std::size_t i = 0; i < cfg.calib_size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
      std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(cfg.calib_size);
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

/// Accuracy, conformal, and recovery metrics for one model's predictions.
///
/// `calib_source`, when given, supplies the calibration scores instead of
/// `m` (e.g. a semi-shadow model's predictions for label-corrupting methods).
inline MetricsReport evaluate(const ProbabilityMatrix& m, const SplitAssignment& s, const EvalConfig& cfg,
                              const ProbabilityMatrix* calib_source = nullptr) {
  check_matrix_covers(m, s);
  const auto calib_ids = calibration_ids(s, cfg);
  const auto& cal_matrix = calib_source != nullptr ? *calib_source : m;
  if (cal_matrix.num_classes() != m.num_classes()) {
    throw DimensionError("calibration source and evaluated matrix disagree on K");
  }
  const auto cal = calibrate(cal_matrix, calib_ids, cfg.alpha, cfg.rule);
  const auto sets = prediction_sets(m, cal);

  MetricsReport r;
  r.alpha = cfg.alpha;
  r.seed = cfg.seed;
  r.calib_size = calib_ids.size();
  r.calib_scale = std::min(1.0, static_cast<double>(calib_ids.size()) / static_cast<double>(cfg.calib_size));
  r.q_hat = cal.q_hat();
  r.accuracy = accuracy_metrics(m, s);
  r.forget = conformal_split_metrics(sets, m, s.forget);
  r.test = conformal_split_metrics(sets, m, s.test);
  r.retain = conformal_split_metrics(sets, m, s.retain);
  r.recovery = recovery_analysis(m, sets, s.forget);
  return r;
}

/// Adds the membership-inference block (MIA, MIACR, MIA recovery).
inline MiaRun add_mia(MetricsReport& r, const ProbabilityMatrix& m, const SplitAssignment& s, double alpha,
                      std::uint64_t seed) {
  auto run = run_mia(m, s, alpha, seed);
  r.mia = run.metrics;
  return run;
}

}  // namespace cfu
