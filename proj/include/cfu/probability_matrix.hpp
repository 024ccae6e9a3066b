#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfu/dataset.hpp"
#include "cfu/error.hpp"
#include "cfu/text_io.hpp"

namespace cfu {

struct ProbRow {
  SampleId id = 0;
  int label = 0;
  SplitName split = SplitName::kPool;
  std::vector<double> probs;
};

/// N samples x K classes of model outputs, one row per sample.
class ProbabilityMatrix {
 public:
  ProbabilityMatrix() = default;
  explicit ProbabilityMatrix(int num_classes) : num_classes_(num_classes) {}

  int num_classes() const { return num_classes_; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  const std::vector<ProbRow>& rows() const { return rows_; }
  const ProbRow& row(std::size_t i) const { return rows_[i]; }

  /// Appends a row after checking the row invariants (normalised to 1e-6,
  /// entries in [0,1], label < K, unique id).
  void add(ProbRow row) {
    if (static_cast<int>(row.probs.size()) != num_classes_) {
      throw DimensionError("row for id " + std::to_string(row.id) + " has " +
                           std::to_string(row.probs.size()) + " probabilities, expected " +
                           std::to_string(num_classes_));
    }
    if (row.label < 0 || row.label >= num_classes_) {
      throw IndexError("label " + std::to_string(row.label) + " out of range for id " +
                       std::to_string(row.id));
    }
    double sum = 0.0;
    for (double p : row.probs) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw DomainError("probability outside [0,1] for id " + std::to_string(row.id));
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw DomainError("probabilities of id " + std::to_string(row.id) + " sum to " +
                        text::format_exact(sum));
    }
    if (!index_.emplace(row.id, rows_.size()).second) {
      throw ConsistencyError("duplicate id " + std::to_string(row.id) + " in probability matrix");
    }
    rows_.push_back(std::move(row));
  }

  const ProbRow* find(SampleId id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &rows_[it->second];
  }

  /// Row for `id`; ConsistencyError naming the id when absent.
  const ProbRow& at(SampleId id) const {
    if (const auto* r = find(id)) return *r;
    throw ConsistencyError("probability matrix has no row for sample id " + std::to_string(id));
  }

  /// Rows for the given ids, in the given order.
  ProbabilityMatrix subset(const std::vector<SampleId>& ids) const {
    ProbabilityMatrix out(num_classes_);
    for (auto id : ids) out.add(at(id));
    return out;
  }

  std::vector<SampleId> ids_with_tag(SplitName tag) const {
    std::vector<SampleId> out;
    for (const auto& r : rows_) {
      if (r.split == tag) out.push_back(r.id);
    }
    return out;
  }

 private:
  int num_classes_ = 0;
  std::vector<ProbRow> rows_;
  std::unordered_map<SampleId, std::size_t> index_;
};

/// Lowest-index argmax.
inline int argmax(const std::vector<double>& p) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(p.size()); ++j) {
    if (p[j] > p[best]) best = j;
  }
  return best;
}

// `id,label,split,p0..p{K-1}` CSV; probabilities in shortest round-trip form.
inline void save_matrix(const ProbabilityMatrix& m, const std::string& path) {
  auto out = text::open_out(path);
  out << "id,label,split";
  for (int j = 0; j < m.num_classes(); ++j) out << ",p" << j;
  out << '\n';
  for (const auto& r : m.rows()) {
    out << r.id << ',' << r.label << ',' << to_string(r.split);
    for (double p : r.probs) out << ',' << text::format_exact(p);
    out << '\n';
  }
}

inline ProbabilityMatrix load_matrix(const std::string& path) {
  const auto lines = text::read_lines(path);
  if (lines.empty()) throw ParseError(path + ": empty probability matrix file");
  const auto header = text::split(text::trim(lines[0]));
  if (header.size() < 5 || header[0] != "id" || header[1] != "label" || header[2] != "split") {
    throw ParseError(text::where(path, 1) + ": expected header 'id,label,split,p0,...'");
  }
  ProbabilityMatrix m(static_cast<int>(header.size()) - 3);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = text::trim(lines[i]);
    if (line.empty()) continue;
    const auto ctx = text::where(path, i + 1);
    auto f = text::split(line);
    if (f.size() != header.size()) throw ParseError(ctx + ": wrong field count");
    ProbRow r;
    r.id = text::parse_int<SampleId>(f[0], ctx);
    r.label = text::parse_int<int>(f[1], ctx);
    auto tag = parse_split_name(text::trim(f[2]));
    if (!tag) throw ParseError(ctx + ": unknown split '" + std::string(f[2]) + "'");
    r.split = *tag;
    for (std::size_t j = 3; j < f.size(); ++j) r.probs.push_back(text::parse_double(f[j], ctx));
    try {
      m.add(std::move(r));
    } catch (const Error& e) {
      throw ParseError(ctx + ": " + e.what());
    }
  }
  return m;
}

}  // namespace cfu
