#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cfu/cfu.hpp"

namespace cfu::fixture {

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cfu_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Matrix built from explicit (label, probs) rows with ids 0..n-1.
inline ProbabilityMatrix matrix_of(int k, const std::vector<std::pair<int, std::vector<double>>>& rows,
                                   SplitName tag = SplitName::kTest) {
  ProbabilityMatrix m(k);
  SampleId id = 0;
  for (const auto& [label, p] : rows) m.add({id++, label, tag, p});
  return m;
}

inline std::vector<SampleId> iota_ids(std::size_t n, SampleId first = 0) {
  std::vector<SampleId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = first + i;
  return ids;
}

inline std::vector<double> random_simplex(int k, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(k);
  double s = 0.0;
  for (auto& v : p) s += (v = e(rng));
  for (auto& v : p) v /= s;
  return p;
}

/// A smaller synthetic task for tests that train models.
inline DatasetSpec small_spec(std::uint64_t seed) {
  DatasetSpec s;
  s.train_per_class = 100;
  s.test_per_class = 100;
  s.calib_eval_per_class = 100;
  s.calib_unlearn_per_class = 50;
  s.pool_extra_per_class = 20;
  s.seed = seed;
  return s;
}

}  // namespace cfu::fixture
