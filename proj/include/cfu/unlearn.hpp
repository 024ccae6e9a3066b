#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "cfu/conformal.hpp"
#include "cfu/dataset.hpp"
#include "cfu/error.hpp"
#include "cfu/model.hpp"
#include "cfu/rng.hpp"
#include "cfu/text_io.hpp"

namespace cfu {

// ---------------------------------------------------------------------------
// Losses over a probability vector

/// A scalar objective together with its gradient.
template <typename Grad>
struct Objective {
  double value = 0.0;
  Grad grad;
};

inline void axpy(std::vector<double>& dst, const std::vector<double>& src, double a) {
  if (dst.size() != src.size()) throw DimensionError("gradient lengths differ");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * src[i];
}

inline void axpy(MlpParams& dst, const MlpParams& src, double a) {
  if (!dst.same_shape(src)) throw DimensionError("gradient shapes differ");
  dst.add_scaled(src, a);
}

/// L_total = L_original + lambda * L_unlearn, gradients combined the same way.
template <typename Grad>
Objective<Grad> loss_total(const Objective<Grad>& original, const Objective<Grad>& unlearn,
                           double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  Objective<Grad> out{original.value + lambda * unlearn.value, original.grad};
  axpy(out.grad, unlearn.grad, lambda);
  return out;
}

/// Clamped margin loss; `clamped` marks the -delta branch (zero gradient).
struct MarginLoss : Objective<std::vector<double>> {
  bool clamped = false;
};

namespace detail {
inline void check_label(std::span<const double> p, int label) {
  if (label < 0 || label >= static_cast<int>(p.size())) {
    throw IndexError("label " + std::to_string(label) + " out of range for K=" + std::to_string(p.size()));
  }
}
}  // namespace detail

/// Lowest-index argmax over classes other than `label`.
inline int strongest_competitor(std::span<const double> p, int label) {
  int best = -1;
  for (int j = 0; j < static_cast<int>(p.size()); ++j) {
    if (j == label) continue;
    if (best < 0 || p[j] > p[best]) best = j;
  }
  return best;
}

/// max{p_t - max_{i != t} p_i, -delta}. Range [-delta, 1].
inline MarginLoss loss_cw(std::span<const double> p, int label, double delta) {
  detail::check_label(p, label);
  if (!(delta > 0.0)) throw ConfigError("delta must be > 0");
  const int rival = strongest_competitor(p, label);
  const double margin = p[label] - p[rival];
  MarginLoss out;
  out.grad.assign(p.size(), 0.0);
  if (margin > -delta) {
    out.value = margin;
    out.grad[label] = 1.0;
    out.grad[rival] = -1.0;
  } else {
    out.value = -delta;
    out.clamped = true;
  }
  return out;
}

/// max{q_bar - S(x, y_t), -delta} with S = 1 - p_t. Range [-delta, q_bar].
/// Minimising it pushes the true label's score past q_bar by delta.
inline MarginLoss loss_unlearn(std::span<const double> p, int label, double q_bar, double delta) {
  detail::check_label(p, label);
  if (!(delta > 0.0)) throw ConfigError("delta must be > 0");
  const double gap = q_bar - nonconformity(p, label);
  MarginLoss out;
  out.grad.assign(p.size(), 0.0);
  if (gap > -delta) {
    out.value = gap;
    out.grad[label] = 1.0;
  } else {
    out.value = -delta;
    out.clamped = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Unlearning threshold

struct UnlearnThreshold {
  double q_bar = 0.0;
  int epoch = 0;
  std::size_t source_size = 0;
};

/// Corrected-rank (1 - alpha) quantile of true-label scores on D_c' under
/// the current parameters. An include-all threshold is reported as 1.
inline UnlearnThreshold compute_q_bar(const MlpParams& params, const std::vector<Sample>& calib,
                                      double alpha, int epoch = 0) {
  if (calib.empty()) throw CalibrationError("unlearning calibration split D_c' is empty");
  std::vector<double> scores;
  scores.reserve(calib.size());
  for (const auto& s : calib) scores.push_back(nonconformity(forward(params, s.features), s.label));
  const auto cal = ConformalCalibrator::fit(std::move(scores), alpha, params.num_classes);
  return {cal.threshold_value(), epoch, calib.size()};
}

// ---------------------------------------------------------------------------
// Methods

enum class Method { kRetrain, kFinetune, kRandomLabel, kGradientAscent, kNegGradPlus };

inline constexpr std::array<Method, 5> kAllMethods = {Method::kRetrain, Method::kFinetune,
                                                      Method::kRandomLabel, Method::kGradientAscent,
                                                      Method::kNegGradPlus};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::kRetrain: return "retrain";
    case Method::kFinetune: return "finetune";
    case Method::kRandomLabel: return "random_label";
    case Method::kGradientAscent: return "gradient_ascent";
    case Method::kNegGradPlus: return "neggrad_plus";
  }
  return "?";
}

/// Accepts the canonical ids and the short forms RT/FT/RL/GA/NG+ (any case).
inline Method parse_method(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (auto m : kAllMethods) {
    if (to_string(m) == lower) return m;
  }
  if (lower == "rt") return Method::kRetrain;
  if (lower == "ft") return Method::kFinetune;
  if (lower == "rl") return Method::kRandomLabel;
  if (lower == "ga") return Method::kGradientAscent;
  if (lower == "ng+" || lower == "neggrad+") return Method::kNegGradPlus;
  throw ConfigError("unknown unlearning method '" + std::string(s) + "'");
}

/// Which margin loss drives the conformal term.
enum class CpuLoss { kConformal, kCw };

struct UnlearnRunConfig {
  Method method = Method::kFinetune;
  double lambda = 0.0;
  double delta = 0.01;
  /// Miscoverage level for q_bar (independent of the evaluation alpha).
  double alpha = 0.05;
  /// Unset: per-method default (see default_epochs()).
  std::optional<int> epochs;
  /// Unset: per-method default (see default_learning_rate()).
  std::optional<double> learning_rate;
  double momentum = 0.9;
  int batch_size = 64;
  std::uint64_t seed = 0;
  double neggrad_beta = 0.2;
  /// false: run the host method alone and never evaluate the conformal term.
  bool cpu = true;
  CpuLoss cpu_loss = CpuLoss::kConformal;
  /// Training recipe of the original model; retrain reuses it verbatim.
  TrainConfig original;

  int resolved_epochs() const;
  double resolved_learning_rate() const;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
    if (!(delta > 0.0)) throw ConfigError("delta must be > 0");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
    if (!(neggrad_beta > 0.0 && neggrad_beta <= 1.0)) throw ConfigError("neggrad_beta must lie in (0,1]");
    if (epochs && *epochs < 1) throw ConfigError("epochs must be >= 1");
    if (learning_rate && !(*learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    original.validate();
  }
};

/// Desk-scale epoch budgets, proportioned like the usual recipes: retrain
/// matches the original, gradient ascent runs a single epoch.
inline int default_epochs(Method m, const TrainConfig& original) {
  switch (m) {
    case Method::kRetrain: return original.epochs;
    case Method::kFinetune: return 10;
    case Method::kRandomLabel: return 5;
    case Method::kGradientAscent: return 1;
    case Method::kNegGradPlus: return 5;
  }
  return 1;
}

inline double default_learning_rate(Method m, const TrainConfig& original) {
  switch (m) {
    case Method::kRetrain: return original.learning_rate;
    case Method::kGradientAscent: return 0.002;
    default: return 0.01;
  }
}

inline int UnlearnRunConfig::resolved_epochs() const {
  return epochs ? *epochs : default_epochs(method, original);
}
inline double UnlearnRunConfig::resolved_learning_rate() const {
  return learning_rate ? *learning_rate : default_learning_rate(method, original);
}

struct EpochLog {
  int epoch = 0;
  double loss_orig = 0.0;
  double loss_unlearn = 0.0;
  /// Mean of the per-step L_total values (accumulated independently).
  double loss_total = 0.0;
  double q_bar = 0.0;
  double acc_forget = 0.0;
  double acc_retain = 0.0;
  double acc_test = 0.0;
};

/// Observed ranges of the margin losses over every forget term of a run.
struct LossRangeAudit {
  std::size_t terms = 0;
  double cw_min = 0.0, cw_max = 0.0;
  double unlearn_min = 0.0, unlearn_max = 0.0;
  /// max over steps of (L_unlearn - q_bar); <= 0 when the invariant holds.
  double unlearn_excess = -1.0;
};

struct UnlearnResult {
  MlpParams params;
  std::vector<EpochLog> log;
  /// Forget-sample reads made by the optimisation path (evaluation excluded).
  std::size_t forget_reads = 0;
  LossRangeAudit audit;
  /// lambda actually applied (retrain never touches D_f, so it stays 0).
  double effective_lambda = 0.0;
};

/// Uniform over the K - 1 wrong labels.
inline int random_wrong_label(int label, int num_classes, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, num_classes - 2);
  const int r = pick(rng);
  return r >= label ? r + 1 : r;
}

namespace detail {

struct TrainItem {
  const Sample* sample;
  int train_label;  // label used by the host loss
  double weight;    // +1 descent, -1 ascent
  bool forget;
};

inline void check_loss_ranges(const MarginLoss& cw, const MarginLoss& unl, double delta, double q_bar,
                              LossRangeAudit& audit) {
  if (audit.terms == 0) {
    audit.cw_min = audit.cw_max = cw.value;
    audit.unlearn_min = audit.unlearn_max = unl.value;
    audit.unlearn_excess = unl.value - q_bar;
  }
  ++audit.terms;
  audit.cw_min = std::min(audit.cw_min, cw.value);
  audit.cw_max = std::max(audit.cw_max, cw.value);
  audit.unlearn_min = std::min(audit.unlearn_min, unl.value);
  audit.unlearn_max = std::max(audit.unlearn_max, unl.value);
  audit.unlearn_excess = std::max(audit.unlearn_excess, unl.value - q_bar);
  if (cw.value < -delta || cw.value > 1.0) {
    throw TrainingError("L_cw = " + text::format_exact(cw.value) + " outside [-delta, 1]");
  }
  if (unl.value < -delta || unl.value > q_bar) {
    throw TrainingError("L_unlearn = " + text::format_exact(unl.value) + " outside [-delta, q_bar]");
  }
}

}  // namespace detail

/// Runs one unlearning method, optionally wrapped by the conformal term.
///
/// Host losses (L_original): retrain = CE on D_r from a fresh init with the
/// original recipe; finetune = CE on D_r; random_label = CE on D_r plus D_f
/// relabelled to random wrong classes; gradient_ascent = -CE on D_f;
/// neggrad_plus = CE(D_r) - beta CE(D_f), D_f streamed alongside D_r.
///
/// With the conformal term on, every step adds lambda times the mean
/// L_unlearn of the forget samples it touches (true labels). Hosts whose
/// batches hold no forget samples (finetune) get a forget mini-batch paired
/// with each step, sized to cover D_f once per epoch. q_bar is refreshed from
/// D_c' at the start of every epoch. Retrain never reads D_f.
inline UnlearnResult run_method(const UnlearnRunConfig& cfg, const MlpParams& original,
                                const Dataset& ds, const SplitAssignment& splits) {
  cfg.validate();
  original.check_shapes();
  const int epochs = cfg.resolved_epochs();
  const Method method = cfg.method;
  const bool cpu = cfg.cpu && method != Method::kRetrain;
  const int k = original.num_classes;

  const auto retain = ds.select(splits.retain);
  const auto forget = ds.select(splits.forget);
  const auto test = ds.select(splits.test);
  const auto calib_unlearn = ds.select(splits.calib_unlearn);
  if (forget.empty()) throw ConfigError("forget split is empty");

  UnlearnResult result;
  result.effective_lambda = cpu ? cfg.lambda : 0.0;

  MlpParams params = method == Method::kRetrain
                         ? MlpParams::init(original.input_dim, original.hidden_dim, k,
                                           stage_seed(cfg.seed, "unlearn.retrain"))
                         : original;

  // Primary stream.
  std::vector<detail::TrainItem> primary;
  switch (method) {
    case Method::kRetrain:
    case Method::kFinetune:
    case Method::kNegGradPlus:
      for (const auto& s : retain) primary.push_back({&s, s.label, 1.0, false});
      break;
    case Method::kRandomLabel: {
      for (const auto& s : retain) primary.push_back({&s, s.label, 1.0, false});
      Rng relabel = make_rng(cfg.seed, "unlearn.random_label");
      for (const auto& s : forget) primary.push_back({&s, random_wrong_label(s.label, k, relabel), 1.0, true});
      break;
    }
    case Method::kGradientAscent:
      for (const auto& s : forget) primary.push_back({&s, s.label, -1.0, true});
      break;
  }
  if (primary.empty()) throw ConfigError("method has no training data");

  const bool paired_stream = method == Method::kNegGradPlus || (cpu && method == Method::kFinetune);
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (primary.size() + batch - 1) / batch;
  const std::size_t paired_batch = paired_stream ? (forget.size() + steps_per_epoch - 1) / steps_per_epoch : 0;

  TrainConfig step_cfg = cfg.original;
  step_cfg.learning_rate = cfg.resolved_learning_rate();
  step_cfg.momentum = cfg.momentum;
  step_cfg.batch_size = cfg.batch_size;
  SgdOptimizer opt(step_cfg, params);
  Rng shuffle = make_rng(cfg.seed, "unlearn.shuffle");
  Rng forget_shuffle = make_rng(cfg.seed, "unlearn.forget_stream");

  MlpParams grad_host = params.zeros_like();
  MlpParams grad_unl = params.zeros_like();

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double q_bar = compute_q_bar(params, calib_unlearn, cfg.alpha, epoch).q_bar;
    const auto order = epoch_order(primary.size(), shuffle);
    const auto forget_order = paired_stream ? epoch_order(forget.size(), forget_shuffle) : std::vector<std::size_t>{};
    std::size_t forget_cursor = 0;

    double sum_orig = 0.0, sum_unl = 0.0, sum_total = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t begin = step * batch;
      const std::size_t end = std::min(primary.size(), begin + batch);
      std::vector<const Sample*> paired;
      for (std::size_t j = 0; j < paired_batch && forget_cursor < forget_order.size(); ++j) {
        paired.push_back(&forget[forget_order[forget_cursor++]]);
      }

      std::size_t n_forget_terms = 0;
      if (cpu) {
        for (std::size_t b = begin; b < end; ++b) n_forget_terms += primary[order[b]].forget ? 1 : 0;
        n_forget_terms += paired.size();
      }

      grad_host.scale(0.0);
      grad_unl.scale(0.0);
      double l_orig = 0.0, l_unl = 0.0;
      const double inv_primary = 1.0 / static_cast<double>(end - begin);
      const double inv_forget = n_forget_terms > 0 ? 1.0 / static_cast<double>(n_forget_terms) : 0.0;

      auto unlearn_term = [&](const Sample& s, const ForwardCache& cache) {
        const auto cw = loss_cw(cache.probs, s.label, cfg.delta);
        const auto unl = loss_unlearn(cache.probs, s.label, q_bar, cfg.delta);
        detail::check_loss_ranges(cw, unl, cfg.delta, q_bar, result.audit);
        const auto& used = cfg.cpu_loss == CpuLoss::kConformal ? unl : cw;
        l_unl += inv_forget * used.value;
        if (!used.clamped) {
          accumulate_logit_grad(params, cache, s.features, probs_to_logit_grad(cache.probs, used.grad),
                                inv_forget, grad_unl);
        }
      };

      for (std::size_t b = begin; b < end; ++b) {
        const auto& item = primary[order[b]];
        const Sample& s = *item.sample;
        if (item.forget) ++result.forget_reads;
        const auto cache = forward_cached(params, s.features);
        l_orig += inv_primary * item.weight * cross_entropy_logits(cache.logits, item.train_label);
        accumulate_logit_grad(params, cache, s.features, cross_entropy_logit_grad(cache.probs, item.train_label),
                              inv_primary * item.weight, grad_host);
        if (cpu && item.forget) unlearn_term(s, cache);
      }
      if (!paired.empty()) {
        const double inv_paired = 1.0 / static_cast<double>(paired.size());
        for (const Sample* s : paired) {
          ++result.forget_reads;
          const auto cache = forward_cached(params, s->features);
          if (method == Method::kNegGradPlus) {
            const double w = -cfg.neggrad_beta * inv_paired;
            l_orig += w * cross_entropy_logits(cache.logits, s->label);
            accumulate_logit_grad(params, cache, s->features, cross_entropy_logit_grad(cache.probs, s->label), w,
                                  grad_host);
          }
          if (cpu) unlearn_term(*s, cache);
        }
      }

      const auto total = loss_total(Objective<MlpParams>{l_orig, grad_host}, Objective<MlpParams>{l_unl, grad_unl},
                                    result.effective_lambda);
      guard_divergence(total.value, to_string(method));
      opt.step(params, total.grad);
      sum_orig += l_orig;
      sum_unl += l_unl;
      sum_total += total.value;
    }

    const double steps = static_cast<double>(steps_per_epoch);
    result.log.push_back({epoch, sum_orig / steps, sum_unl / steps, sum_total / steps, q_bar,
                          accuracy(params, forget), accuracy(params, retain), accuracy(params, test)});
  }
  if (!params.all_finite()) throw DivergenceError("non-finite parameters after unlearning");
  result.params = std::move(params);
  return result;
}

inline void write_epoch_log(std::ostream& out, const std::vector<EpochLog>& log) {
  out << "epoch,loss_orig,loss_unlearn,q_bar,acc_forget,acc_retain,acc_test\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << text::format_exact(e.loss_orig) << ',' << text::format_exact(e.loss_unlearn) << ','
        << text::format_exact(e.q_bar) << ',' << text::format_exact(e.acc_forget) << ','
        << text::format_exact(e.acc_retain) << ',' << text::format_exact(e.acc_test) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Semi-shadow calibration

struct SemiShadowConfig {
  int epochs = 3;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int batch_size = 64;
  std::uint64_t seed = 0;
};

/// Copy of the original model finetuned on the calibration samples with
/// random wrong labels. Its calibration scores stand in for the raw ones
/// when scoring label-corrupting methods.
inline MlpParams semi_shadow_calibrate(const MlpParams& original, const std::vector<Sample>& calib,
                                       const SemiShadowConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("semi-shadow calibration needs at least one finetune epoch");
  if (calib.empty()) throw CalibrationError("semi-shadow calibration set is empty");
  Rng relabel = make_rng(cfg.seed, "semi_shadow.relabel");
  std::vector<Sample> noisy = calib;
  for (auto& s : noisy) s.label = random_wrong_label(s.label, original.num_classes, relabel);
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.learning_rate = cfg.learning_rate;
  tc.momentum = cfg.momentum;
  tc.batch_size = cfg.batch_size;
  tc.seed = stage_seed(cfg.seed, "semi_shadow.train");
  return train(original, noisy, tc).params;
}

}  // namespace cfu
