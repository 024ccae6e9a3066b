#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "cfu/dataset.hpp"
#include "cfu/evaluate.hpp"
#include "cfu/metrics.hpp"
#include "cfu/model.hpp"
#include "cfu/unlearn.hpp"

namespace cfu {

/// Everything one (method, lambda, alpha, seed) grid cell needs. The run
/// seed is copied into every stage; each stage mixes its own name into it.
struct ExperimentConfig {
  DatasetSpec data;
  int hidden = 64;
  TrainConfig train;
  UnlearnRunConfig unlearn;
  EvalConfig eval;
  bool with_mia = true;
  /// Calibrate label-corrupting methods (random_label) on a semi-shadow model.
  std::optional<SemiShadowConfig> semi_shadow;

  void set_seed(std::uint64_t seed) {
    data.seed = seed;
    train.seed = seed;
    unlearn.seed = seed;
    eval.seed = seed;
    if (semi_shadow) semi_shadow->seed = seed;
  }
};

/// Dataset, splits, and the trained original model for one seed.
struct PreparedRun {
  Dataset dataset;
  SplitAssignment splits;
  MlpParams original;
};

inline MlpParams train_original(const Dataset& ds, const SplitAssignment& s, int hidden, const TrainConfig& cfg) {
  auto params = MlpParams::init(ds.dim, hidden, ds.num_classes, cfg.seed);
  return train(std::move(params), ds.select(s.train_ids()), cfg).params;
}

inline PreparedRun prepare(const ExperimentConfig& cfg) {
  auto [ds, splits] = generate(cfg.data);
  auto original = train_original(ds, splits, cfg.hidden, cfg.train);
  return {std::move(ds), std::move(splits), std::move(original)};
}

struct CellResult {
  UnlearnResult unlearned;
  MetricsReport report;
};

inline CellResult run_cell(const PreparedRun& prep, const ExperimentConfig& cfg) {
  UnlearnRunConfig ucfg = cfg.unlearn;
  ucfg.original = cfg.train;
  CellResult out;
  out.unlearned = run_method(ucfg, prep.original, prep.dataset, prep.splits);
  const auto matrix = predict_matrix(out.unlearned.params, prep.dataset, prep.splits);
  std::optional<ProbabilityMatrix> shadow_matrix;
  if (cfg.semi_shadow && ucfg.method == Method::kRandomLabel) {
    const auto shadow =
        semi_shadow_calibrate(prep.original, prep.dataset.select(prep.splits.calib_eval), *cfg.semi_shadow);
    shadow_matrix = predict_matrix(shadow, prep.dataset, prep.splits);
  }
  out.report = evaluate(matrix, prep.splits, cfg.eval, shadow_matrix ? &*shadow_matrix : nullptr);
  out.report.method = std::string(to_string(ucfg.method));
  out.report.lambda = ucfg.lambda;
  if (cfg.with_mia) add_mia(out.report, matrix, prep.splits, cfg.eval.alpha, cfg.eval.seed);
  return out;
}

}  // namespace cfu
