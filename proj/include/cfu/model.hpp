#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cfu/dataset.hpp"
#include "cfu/error.hpp"
#include "cfu/probability_matrix.hpp"
#include "cfu/rng.hpp"
#include "cfu/text_io.hpp"

namespace cfu {

/// One-hidden-layer tanh MLP, d -> H -> K, softmax output. Weight matrices
/// are row-major: w1 is H x d, w2 is K x H.
struct MlpParams {
  int input_dim = 0;
  int hidden_dim = 0;
  int num_classes = 0;
  std::vector<double> w1;
  std::vector<double> b1;
  std::vector<double> w2;
  std::vector<double> b2;

  static MlpParams zeros(int d, int h, int k) {
    if (d < 1 || h < 1 || k < 2) throw DimensionError("MLP needs d >= 1, H >= 1, K >= 2");
    MlpParams p;
    p.input_dim = d;
    p.hidden_dim = h;
    p.num_classes = k;
    p.w1.assign(static_cast<std::size_t>(h) * d, 0.0);
    p.b1.assign(h, 0.0);
    p.w2.assign(static_cast<std::size_t>(k) * h, 0.0);
    p.b2.assign(k, 0.0);
    return p;
  }

  /// Glorot-uniform weights, zero biases.
  static MlpParams init(int d, int h, int k, std::uint64_t seed) {
    MlpParams p = zeros(d, h, k);
    Rng rng = make_rng(seed, "model.init");
    std::uniform_real_distribution<double> u1(-std::sqrt(6.0 / (d + h)), std::sqrt(6.0 / (d + h)));
    for (auto& w : p.w1) w = u1(rng);
    std::uniform_real_distribution<double> u2(-std::sqrt(6.0 / (h + k)), std::sqrt(6.0 / (h + k)));
    for (auto& w : p.w2) w = u2(rng);
    return p;
  }

  bool same_shape(const MlpParams& o) const {
    return input_dim == o.input_dim && hidden_dim == o.hidden_dim && num_classes == o.num_classes;
  }

  void check_shapes() const {
    const auto d = static_cast<std::size_t>(input_dim);
    const auto h = static_cast<std::size_t>(hidden_dim);
    const auto k = static_cast<std::size_t>(num_classes);
    if (w1.size() != h * d || b1.size() != h || w2.size() != k * h || b2.size() != k) {
      throw DimensionError("MLP parameter shapes inconsistent with (d, H, K)");
    }
  }

  bool all_finite() const {
    auto fin = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    return fin(w1) && fin(b1) && fin(w2) && fin(b2);
  }

  /// Applies f to each of the four blocks of *this and `other` in lockstep.
  template <typename F>
  void zip(const MlpParams& other, F&& f) {
    f(w1, other.w1);
    f(b1, other.b1);
    f(w2, other.w2);
    f(b2, other.b2);
  }

  /// *this += scale * other
  void add_scaled(const MlpParams& other, double scale) {
    zip(other, [scale](std::vector<double>& a, const std::vector<double>& b) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
    });
  }

  void scale(double s) {
    for (auto* v : {&w1, &b1, &w2, &b2})
      for (auto& x : *v) x *= s;
  }

  MlpParams zeros_like() const { return zeros(input_dim, hidden_dim, num_classes); }

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Gradient of a scalar loss w.r.t. every parameter, plus the upstream
/// gradient w.r.t. the output probabilities it was computed from.
struct GradBundle {
  MlpParams d_params;
  std::vector<double> d_probs;
};

struct ForwardCache {
  std::vector<double> hidden;  // tanh activations
  std::vector<double> logits;
  std::vector<double> probs;
};

inline std::vector<double> softmax(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    p[j] = std::exp(z[j] - m);
    s += p[j];
  }
  for (auto& v : p) v /= s;
  return p;
}

inline void check_input(const MlpParams& params, std::span<const double> x) {
  if (static_cast<int>(x.size()) != params.input_dim) {
    throw DimensionError("input has " + std::to_string(x.size()) + " features, model expects " +
                         std::to_string(params.input_dim));
  }
}

inline ForwardCache forward_cached(const MlpParams& params, std::span<const double> x) {
  check_input(params, x);
  const int d = params.input_dim, h = params.hidden_dim, k = params.num_classes;
  ForwardCache c;
  c.hidden.resize(h);
  for (int i = 0; i < h; ++i) {
    double a = params.b1[i];
    const double* row = &params.w1[static_cast<std::size_t>(i) * d];
    for (int j = 0; j < d; ++j) a += row[j] * x[j];
    c.hidden[i] = std::tanh(a);
  }
  c.logits.resize(k);
  for (int i = 0; i < k; ++i) {
    double a = params.b2[i];
    const double* row = &params.w2[static_cast<std::size_t>(i) * h];
    for (int j = 0; j < h; ++j) a += row[j] * c.hidden[j];
    c.logits[i] = a;
  }
  c.probs = softmax(c.logits);
  return c;
}

inline std::vector<double> forward(const MlpParams& params, std::span<const double> x) {
  return forward_cached(params, x).probs;
}

/// Chain rule through the softmax: dL/dz = p * (dL/dp - <p, dL/dp>).
inline std::vector<double> probs_to_logit_grad(std::span<const double> p,
                                               std::span<const double> d_probs) {
  double dot = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) dot += p[j] * d_probs[j];
  std::vector<double> dz(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) dz[j] = p[j] * (d_probs[j] - dot);
  return dz;
}

/// acc += scale * dL/dtheta, given dL/dlogits for the cached forward pass.
inline void accumulate_logit_grad(const MlpParams& params, const ForwardCache& cache,
                                  std::span<const double> x, std::span<const double> d_logits,
                                  double scale, MlpParams& acc) {
  const int d = params.input_dim, h = params.hidden_dim, k = params.num_classes;
  std::vector<double> d_hidden(h, 0.0);
  for (int i = 0; i < k; ++i) {
    const double g = scale * d_logits[i];
    acc.b2[i] += g;
    double* grow = &acc.w2[static_cast<std::size_t>(i) * h];
    const double* wrow = &params.w2[static_cast<std::size_t>(i) * h];
    for (int j = 0; j < h; ++j) {
      grow[j] += g * cache.hidden[j];
      d_hidden[j] += wrow[j] * g;
    }
  }
  for (int i = 0; i < h; ++i) {
    const double g = d_hidden[i] * (1.0 - cache.hidden[i] * cache.hidden[i]);
    acc.b1[i] += g;
    double* grow = &acc.w1[static_cast<std::size_t>(i) * d];
    for (int j = 0; j < d; ++j) grow[j] += g * x[j];
  }
}

/// Exact gradient of L(forward(params, x)) given dL/dp.
inline GradBundle backward(const MlpParams& params, std::span<const double> x,
                           std::span<const double> d_probs) {
  if (static_cast<int>(d_probs.size()) != params.num_classes) {
    throw DimensionError("loss gradient has length " + std::to_string(d_probs.size()) +
                         ", expected " + std::to_string(params.num_classes));
  }
  const auto cache = forward_cached(params, x);
  const auto dz = probs_to_logit_grad(cache.probs, d_probs);
  GradBundle g{params.zeros_like(), std::vector<double>(d_probs.begin(), d_probs.end())};
  accumulate_logit_grad(params, cache, x, dz, 1.0, g.d_params);
  return g;
}

inline constexpr double kProbFloor = 1e-12;

/// -log p_label with p clamped at 1e-12.
inline double cross_entropy(std::span<const double> p, int label) {
  return -std::log(std::max(p[label], kProbFloor));
}

/// logsumexp(z) - z_label: the same loss read off the logits, so it keeps
/// growing where the clamped form saturates. Training losses use this.
inline double cross_entropy_logits(std::span<const double> z, int label) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s) - z[label];
}

/// dCE/dlogits = p - onehot(label).
inline std::vector<double> cross_entropy_logit_grad(std::span<const double> p, int label) {
  std::vector<double> g(p.begin(), p.end());
  g[label] -= 1.0;
  return g;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 0.05;
  double momentum = 0.9;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

/// Heavy-ball SGD state: v <- mu v + g; theta <- theta - lr v.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(const TrainConfig& cfg, const MlpParams& like)
      : lr_(cfg.learning_rate), momentum_(cfg.momentum), velocity_(like.zeros_like()) {}

  void step(MlpParams& params, const MlpParams& grads) {
    const double mu = momentum_, lr = lr_;
    velocity_.zip(grads, [mu](std::vector<double>& v, const std::vector<double>& g) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = mu * v[i] + g[i];
    });
    params.zip(velocity_, [lr](std::vector<double>& p, const std::vector<double>& v) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * v[i];
    });
  }

 private:
  double lr_;
  double momentum_;
  MlpParams velocity_;
};

/// Plain (momentum-free) step; returns the updated copy.
inline MlpParams sgd_step(MlpParams params, const MlpParams& grads, const TrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!params.same_shape(grads)) throw DimensionError("gradient shape does not match parameters");
  params.add_scaled(grads, -cfg.learning_rate);
  return params;
}

inline constexpr double kDivergenceLimit = 1e6;

inline void guard_divergence(double batch_loss, std::string_view where) {
  if (!std::isfinite(batch_loss) || std::abs(batch_loss) > kDivergenceLimit) {
    throw DivergenceError(std::string(where) + ": batch loss " + text::format_exact(batch_loss) +
                          " diverged");
  }
}

struct EpochStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  MlpParams params;
  std::vector<EpochStats> history;
};

/// Fisher-Yates order of [0, n) for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

/// Minibatch SGD on mean cross-entropy. The shuffle stream depends only on
/// cfg.seed, so identical inputs give identical parameters.
inline TrainResult train(MlpParams params, const std::vector<Sample>& samples,
                         const TrainConfig& cfg) {
  cfg.validate();
  params.check_shapes();
  if (samples.empty()) throw TrainingError("no training samples");
  Rng rng = make_rng(cfg.seed, "train.shuffle");
  SgdOptimizer opt(cfg, params);
  TrainResult result;
  MlpParams grad = params.zeros_like();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(samples.size(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - start);
      grad.scale(0.0);
      double batch_loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const Sample& s = samples[order[b]];
        const auto cache = forward_cached(params, s.features);
        const double l = cross_entropy_logits(cache.logits, s.label);
        batch_loss += l;
        if (argmax(cache.probs) == s.label) ++correct;
        accumulate_logit_grad(params, cache, s.features,
                              cross_entropy_logit_grad(cache.probs, s.label), inv, grad);
      }
      guard_divergence(batch_loss * inv, "train");
      loss_sum += batch_loss;
      opt.step(params, grad);
    }
    result.history.push_back({loss_sum / static_cast<double>(samples.size()),
                              static_cast<double>(correct) / static_cast<double>(samples.size())});
  }
  result.params = std::move(params);
  return result;
}

inline double accuracy(const MlpParams& params, const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    if (argmax(forward(params, s.features)) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

/// One row per sample, in sample order, tagged with its split.
inline ProbabilityMatrix predict_matrix(const MlpParams& params, const std::vector<Sample>& samples,
                                        const std::vector<SplitName>& tags) {
  if (tags.size() != samples.size()) throw DimensionError("one split tag per sample required");
  ProbabilityMatrix m(params.num_classes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    m.add({samples[i].id, samples[i].label, tags[i], forward(params, samples[i].features)});
  }
  return m;
}

/// Matrix over every sample named by the split assignment, tagged with the
/// sample's finest split (pool-only ids tagged "pool").
inline ProbabilityMatrix predict_matrix(const MlpParams& params, const Dataset& ds,
                                        const SplitAssignment& splits) {
  const auto tags = splits.tags();
  std::vector<SampleId> ids;
  ids.reserve(tags.size());
  for (const auto& [id, tag] : tags) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  std::vector<Sample> samples;
  std::vector<SplitName> t;
  samples.reserve(ids.size());
  for (auto id : ids) {
    samples.push_back(ds.at(id));
    t.push_back(tags.at(id));
  }
  return predict_matrix(params, samples, t);
}

// ---------------------------------------------------------------------------
// Checkpoint: text, versioned.
//
//   cfu-mlp 1
//   dims <d> <H> <K>
//   w1 <H*d values, row-major>
//   b1 <H values>
//   w2 <K*H values, row-major>
//   b2 <K values>
//
// Values use shortest round-trip decimal, so load(save(p)) == p bitwise.

inline void save_checkpoint(const MlpParams& p, const std::string& path) {
  p.check_shapes();
  auto out = text::open_out(path);
  out << "cfu-mlp 1\n";
  out << "dims " << p.input_dim << ' ' << p.hidden_dim << ' ' << p.num_classes << '\n';
  auto block = [&](const char* name, const std::vector<double>& v) {
    out << name;
    for (double x : v) out << ' ' << text::format_exact(x);
    out << '\n';
  };
  block("w1", p.w1);
  block("b1", p.b1);
  block("w2", p.w2);
  block("b2", p.b2);
}

inline MlpParams load_checkpoint(const std::string& path) {
  const auto lines = text::read_lines(path);
  if (lines.size() < 6) throw ParseError(path + ": truncated checkpoint");
  if (text::trim(lines[0]) != "cfu-mlp 1") {
    throw ParseError(text::where(path, 1) + ": not a version-1 cfu-mlp checkpoint");
  }
  auto words = [](std::string_view line) {
    std::vector<std::string_view> out;
    for (auto w : text::split(text::trim(line), ' ')) {
      if (!w.empty()) out.push_back(w);
    }
    return out;
  };
  const auto dims = words(lines[1]);
  if (dims.size() != 4 || dims[0] != "dims") throw ParseError(text::where(path, 2) + ": expected 'dims d H K'");
  const auto ctx2 = text::where(path, 2);
  MlpParams p;
  try {
    p = MlpParams::zeros(text::parse_int<int>(dims[1], ctx2), text::parse_int<int>(dims[2], ctx2),
                         text::parse_int<int>(dims[3], ctx2));
  } catch (const DimensionError& e) {
    throw ParseError(ctx2 + ": " + e.what());
  }
  const char* names[] = {"w1", "b1", "w2", "b2"};
  std::vector<double>* blocks[] = {&p.w1, &p.b1, &p.w2, &p.b2};
  for (int b = 0; b < 4; ++b) {
    const auto ctx = text::where(path, 3 + b);
    const auto w = words(lines[2 + b]);
    if (w.empty() || w[0] != names[b]) throw ParseError(ctx + ": expected block '" + names[b] + "'");
    if (w.size() - 1 != blocks[b]->size()) {
      throw ParseError(ctx + ": block '" + names[b] + "' has " + std::to_string(w.size() - 1) +
                       " values, expected " + std::to_string(blocks[b]->size()));
    }
    for (std::size_t i = 1; i < w.size(); ++i) (*blocks[b])[i - 1] = text::parse_double(w[i], ctx);
  }
  if (!p.all_finite()) throw ParseError(path + ": non-finite parameter values");
  return p;
}

}  // namespace cfu
