#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cfu/error.hpp"
#include "cfu/rng.hpp"
#include "cfu/text_io.hpp"

namespace cfu {

using SampleId = std::uint64_t;

struct Sample {
  SampleId id = 0;
  std::vector<double> features;
  int label = 0;
};

enum class SplitName { kRetain, kForget, kCalibEval, kCalibUnlearn, kTest, kPool };

inline constexpr std::array<SplitName, 6> kAllSplits = {
    SplitName::kRetain, SplitName::kForget, SplitName::kCalibEval,
    SplitName::kCalibUnlearn, SplitName::kTest, SplitName::kPool};

inline std::string_view to_string(SplitName s) {
  switch (s) {
    case SplitName::kRetain: return "retain";
    case SplitName::kForget: return "forget";
    case SplitName::kCalibEval: return "calib_eval";
    case SplitName::kCalibUnlearn: return "calib_unlearn";
    case SplitName::kTest: return "test";
    case SplitName::kPool: return "pool";
  }
  return "?";
}

inline std::optional<SplitName> parse_split_name(std::string_view s) {
  for (auto n : kAllSplits) {
    if (to_string(n) == s) return n;
  }
  return std::nullopt;
}

/// Partition of sample ids into the protocol's data splits.
///
/// `calib_eval` (D_c) and `calib_unlearn` (D_c') are carved out of
/// `validation_pool`, which never overlaps the training or test data.
struct SplitAssignment {
  std::vector<SampleId> retain;
  std::vector<SampleId> forget;
  std::vector<SampleId> calib_eval;
  std::vector<SampleId> calib_unlearn;
  std::vector<SampleId> test;
  std::vector<SampleId> validation_pool;

  const std::vector<SampleId>& get(SplitName s) const {
    switch (s) {
      case SplitName::kRetain: return retain;
      case SplitName::kForget: return forget;
      case SplitName::kCalibEval: return calib_eval;
      case SplitName::kCalibUnlearn: return calib_unlearn;
      case SplitName::kTest: return test;
      case SplitName::kPool: return validation_pool;
    }
    throw IndexError("unknown split");
  }
  std::vector<SampleId>& get(SplitName s) {
    return const_cast<std::vector<SampleId>&>(std::as_const(*this).get(s));
  }

  /// D_train = D_r ∪ D_f, ascending.
  std::vector<SampleId> train_ids() const {
    std::vector<SampleId> out(retain);
    out.insert(out.end(), forget.begin(), forget.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Finest tag of an id: the non-pool split it belongs to, else kPool.
  std::unordered_map<SampleId, SplitName> tags() const {
    std::unordered_map<SampleId, SplitName> out;
    for (auto id : validation_pool) out[id] = SplitName::kPool;
    for (auto s : {SplitName::kRetain, SplitName::kForget, SplitName::kCalibEval,
                   SplitName::kCalibUnlearn, SplitName::kTest}) {
      for (auto id : get(s)) out[id] = s;
    }
    return out;
  }

  /// Throws ConsistencyError if the disjointness/containment invariants fail.
  void validate() const {
    std::unordered_map<SampleId, SplitName> seen;
    for (auto s : {SplitName::kRetain, SplitName::kForget, SplitName::kCalibEval,
                   SplitName::kCalibUnlearn, SplitName::kTest}) {
      for (auto id : get(s)) {
        auto [it, inserted] = seen.emplace(id, s);
        if (!inserted) {
          throw ConsistencyError("sample id " + std::to_string(id) + " appears in both '" +
                                 std::string(to_string(it->second)) + "' and '" +
                                 std::string(to_string(s)) + "'");
        }
      }
    }
    std::unordered_set<SampleId> pool;
    for (auto id : validation_pool) {
      if (!pool.insert(id).second) {
        throw ConsistencyError("sample id " + std::to_string(id) + " repeated in 'pool'");
      }
      auto it = seen.find(id);
      if (it != seen.end() && it->second != SplitName::kCalibEval &&
          it->second != SplitName::kCalibUnlearn) {
        throw ConsistencyError("pool id " + std::to_string(id) + " overlaps split '" +
                               std::string(to_string(it->second)) + "'");
      }
    }
    for (auto s : {SplitName::kCalibEval, SplitName::kCalibUnlearn}) {
      for (auto id : get(s)) {
        if (!pool.contains(id)) {
          throw ConsistencyError("calibration id " + std::to_string(id) +
                                 " is not in the validation pool");
        }
      }
    }
  }

  friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

struct DatasetSpec {
  int num_classes = 5;
  int dim = 16;
  int train_per_class = 200;
  int test_per_class = 400;
  int calib_eval_per_class = 400;
  int calib_unlearn_per_class = 100;
  /// Pool samples beyond D_c and D_c'.
  int pool_extra_per_class = 100;
  double separation = 2.8;
  double noise = 1.0;
  std::uint64_t seed = 0;
  double forget_fraction = 0.10;
  std::optional<int> forget_class;
  /// Draw D_c/D_c' per class (true) or uniformly from the pool (false).
  bool balanced_calibration = true;

  int pool_per_class() const {
    return calib_eval_per_class + calib_unlearn_per_class + pool_extra_per_class;
  }

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (dim < 1) throw ConfigError("dim must be >= 1");
    if (train_per_class <= 0 || test_per_class <= 0 || calib_eval_per_class <= 0 ||
        calib_unlearn_per_class <= 0 || pool_extra_per_class < 0) {
      throw ConfigError("per-class sample counts must be > 0");
    }
    if (!(noise > 0.0) || !std::isfinite(separation)) {
      throw ConfigError("noise must be > 0 and separation finite");
    }
    if (forget_class) {
      if (*forget_class < 0 || *forget_class >= num_classes) {
        throw ConfigError("forget_class " + std::to_string(*forget_class) +
                          " out of range for K=" + std::to_string(num_classes));
      }
    } else if (!(forget_fraction > 0.0 && forget_fraction < 1.0)) {
      throw ConfigError("forget_fraction must lie in (0,1)");
    }
  }
};

struct Dataset {
  int num_classes = 0;
  int dim = 0;
  /// samples[i].id == i.
  std::vector<Sample> samples;

  const Sample& at(SampleId id) const {
    if (id >= samples.size()) throw IndexError("sample id " + std::to_string(id) + " not in dataset");
    return samples[id];
  }

  std::vector<Sample> select(const std::vector<SampleId>& ids) const {
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(at(id));
    return out;
  }
};

namespace detail {

// Uniform sample of k items without replacement, returned in draw order.
inline std::vector<SampleId> sample_without_replacement(std::vector<SampleId> from, std::size_t k,
                                                        Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, from.size() - 1);
    std::swap(from[i], from[pick(rng)]);
  }
  from.resize(k);
  return from;
}

}  // namespace detail

/// Class-conditional Gaussian blobs plus the split assignment.
///
/// Class centres are `separation` times independent random unit vectors;
/// samples are centre + N(0, noise^2 I). Features are rounded to 9 significant
/// digits at generation so the dataset CSV reproduces them exactly.
inline std::pair<Dataset, SplitAssignment> generate(const DatasetSpec& spec) {
  spec.validate();
  const int k = spec.num_classes;
  const int d = spec.dim;

  Rng center_rng = make_rng(spec.seed, "dataset.centers");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> centers(k, std::vector<double>(d));
  for (auto& c : centers) {
    double norm = 0.0;
    for (auto& v : c) {
      v = gauss(center_rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : c) v = spec.separation * v / norm;
  }

  Dataset ds;
  ds.num_classes = k;
  ds.dim = d;
  Rng sample_rng = make_rng(spec.seed, "dataset.samples");
  std::vector<SampleId> train, test, pool;
  std::vector<std::vector<SampleId>> pool_by_class(k), train_by_class(k);

  auto emit = [&](int label) {
    Sample s;
    s.id = ds.samples.size();
    s.label = label;
    s.features.resize(d);
    for (int j = 0; j < d; ++j) {
      const double raw = centers[label][j] + spec.noise * gauss(sample_rng);
      s.features[j] = text::parse_double(text::format_sig(raw, 9), "feature");
    }
    ds.samples.push_back(std::move(s));
    return ds.samples.back().id;
  };
  // Labels interleaved so that ids do not cluster by class.
  for (int i = 0; i < spec.train_per_class; ++i)
    for (int c = 0; c < k; ++c) {
      auto id = emit(c);
      train.push_back(id);
      train_by_class[c].push_back(id);
    }
  for (int i = 0; i < spec.test_per_class; ++i)
    for (int c = 0; c < k; ++c) test.push_back(emit(c));
  for (int i = 0; i < spec.pool_per_class(); ++i)
    for (int c = 0; c < k; ++c) {
      auto id = emit(c);
      pool.push_back(id);
      pool_by_class[c].push_back(id);
    }

  SplitAssignment sa;
  sa.test = test;
  sa.validation_pool = pool;

  Rng forget_rng = make_rng(spec.seed, "dataset.forget");
  if (spec.forget_class) {
    sa.forget = train_by_class[*spec.forget_class];
  } else {
    const auto n_forget = static_cast<std::size_t>(
        std::llround(spec.forget_fraction * static_cast<double>(train.size())));
    if (n_forget == 0 || n_forget >= train.size()) {
      throw ConfigError("forget_fraction yields an empty forget or retain set");
    }
    sa.forget = detail::sample_without_replacement(train, n_forget, forget_rng);
  }
  std::sort(sa.forget.begin(), sa.forget.end());
  std::unordered_set<SampleId> forget_set(sa.forget.begin(), sa.forget.end());
  for (auto id : train) {
    if (!forget_set.contains(id)) sa.retain.push_back(id);
  }

  Rng calib_rng = make_rng(spec.seed, "dataset.calibration");
  if (spec.balanced_calibration) {
    for (int c = 0; c < k; ++c) {
      auto drawn = detail::sample_without_replacement(
          pool_by_class[c],
          static_cast<std::size_t>(spec.calib_eval_per_class + spec.calib_unlearn_per_class),
          calib_rng);
      sa.calib_eval.insert(sa.calib_eval.end(), drawn.begin(),
                           drawn.begin() + spec.calib_eval_per_class);
      sa.calib_unlearn.insert(sa.calib_unlearn.end(), drawn.begin() + spec.calib_eval_per_class,
                              drawn.end());
    }
  } else {
    const std::size_t n_eval = static_cast<std::size_t>(spec.calib_eval_per_class) * k;
    const std::size_t n_unl = static_cast<std::size_t>(spec.calib_unlearn_per_class) * k;
    auto drawn = detail::sample_without_replacement(pool, n_eval + n_unl, calib_rng);
    sa.calib_eval.assign(drawn.begin(), drawn.begin() + static_cast<std::ptrdiff_t>(n_eval));
    sa.calib_unlearn.assign(drawn.begin() + static_cast<std::ptrdiff_t>(n_eval), drawn.end());
  }
  std::sort(sa.calib_eval.begin(), sa.calib_eval.end());
  std::sort(sa.calib_unlearn.begin(), sa.calib_unlearn.end());

  sa.validate();
  return {std::move(ds), std::move(sa)};
}

// ---------------------------------------------------------------------------
// File formats

/// `split,id` CSV with header; one line per (split, id) membership.
inline void write_splits(std::ostream& out, const SplitAssignment& sa) {
  out << "split,id\n";
  for (auto s : kAllSplits) {
    for (auto id : sa.get(s)) out << to_string(s) << ',' << id << '\n';
  }
}

inline void save_splits(const SplitAssignment& sa, const std::string& path) {
  auto out = text::open_out(path);
  write_splits(out, sa);
}

inline SplitAssignment parse_splits(const std::vector<std::string>& lines, std::string_view name) {
  if (lines.empty()) throw ParseError(std::string(name) + ": empty split file");
  if (text::trim(lines[0]) != "split,id") {
    throw ParseError(text::where(name, 1) + ": expected header 'split,id'");
  }
  SplitAssignment sa;
  std::unordered_map<SampleId, std::size_t> owner_line;  // non-pool memberships
  std::unordered_set<SampleId> pool_ids;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = text::trim(lines[i]);
    if (line.empty()) continue;
    const auto ctx = text::where(name, i + 1);
    auto fields = text::split(line);
    if (fields.size() != 2) throw ParseError(ctx + ": expected 2 fields");
    auto split = parse_split_name(text::trim(fields[0]));
    if (!split) throw ParseError(ctx + ": unknown split '" + std::string(fields[0]) + "'");
    const auto id = text::parse_int<SampleId>(fields[1], ctx);
    if (*split == SplitName::kPool) {
      if (!pool_ids.insert(id).second) {
        throw ParseError(ctx + ": id " + std::to_string(id) + " repeated in pool");
      }
    } else {
      auto [it, inserted] = owner_line.emplace(id, i + 1);
      if (!inserted) {
        throw ParseError(ctx + ": id " + std::to_string(id) + " already assigned on line " +
                         std::to_string(it->second));
      }
    }
    sa.get(*split).push_back(id);
  }
  if (owner_line.empty()) throw ParseError(std::string(name) + ": no split memberships");
  try {
    sa.validate();
  } catch (const ConsistencyError& e) {
    throw ParseError(std::string(name) + ": " + e.what());
  }
  return sa;
}

inline SplitAssignment load_splits(const std::string& path) {
  return parse_splits(text::read_lines(path), path);
}

/// `id,label,f0..f{d-1}` CSV, features at 9 significant digits.
inline void save_dataset(const Dataset& ds, const std::string& path) {
  auto out = text::open_out(path);
  out << "id,label";
  for (int j = 0; j < ds.dim; ++j) out << ",f" << j;
  out << '\n';
  for (const auto& s : ds.samples) {
    out << s.id << ',' << s.label;
    for (double v : s.features) out << ',' << text::format_sig(v, 9);
    out << '\n';
  }
}

inline Dataset load_dataset(const std::string& path) {
  const auto lines = text::read_lines(path);
  if (lines.empty()) throw ParseError(path + ": empty dataset file");
  const auto header = text::split(text::trim(lines[0]));
  if (header.size() < 3 || header[0] != "id" || header[1] != "label") {
    throw ParseError(text::where(path, 1) + ": expected header 'id,label,f0,...'");
  }
  Dataset ds;
  ds.dim = static_cast<int>(header.size()) - 2;
  int max_label = -1;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = text::trim(lines[i]);
    if (line.empty()) continue;
    const auto ctx = text::where(path, i + 1);
    auto fields = text::split(line);
    if (fields.size() != header.size()) throw ParseError(ctx + ": wrong field count");
    Sample s;
    s.id = text::parse_int<SampleId>(fields[0], ctx);
    if (s.id != ds.samples.size()) throw ParseError(ctx + ": ids must be 0..N-1 in order");
    s.label = text::parse_int<int>(fields[1], ctx);
    if (s.label < 0) throw ParseError(ctx + ": negative label");
    max_label = std::max(max_label, s.label);
    s.features.reserve(ds.dim);
    for (std::size_t j = 2; j < fields.size(); ++j) s.features.push_back(text::parse_double(fields[j], ctx));
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw ParseError(path + ": no samples");
  ds.num_classes = max_label + 1;
  return ds;
}

}  // namespace cfu
