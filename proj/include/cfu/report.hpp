#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cfu/conformal.hpp"
#include "cfu/error.hpp"
#include "cfu/metrics.hpp"
#include "cfu/text_io.hpp"

namespace cfu {

// Report JSON. Field names are frozen: new fields may be added, existing
// ones are never renamed. Accuracy-style percentages are rounded to 1
// decimal, conformal quantities to 3, at serialisation time only.
//
// {
//   "schema": "cfu-report/1",
//   "method", "lambda", "seed", "alpha",
//   "calibration": {"size", "scale", "q_hat"},          q_hat may be "include_all"
//   "accuracy": {"ua", "ra", "ta"},
//   "conformal": {"forget"|"test"|"retain": {"coverage", "set_size", "cr",
//                 "cr_all_empty", "canonical"}},
//   "recovery": {"mislabel", "inset", "ratio", "ratio_undefined"},
//   "mia": {"mia", "miacr", "q_hat", "recovery": {...}},     optional
//   "gap_to_retrain": {"<metric>": delta, ...}               optional
// }

using Json = nlohmann::ordered_json;

namespace detail {

inline Json threshold_json(double q) {
  if (q == ConformalCalibrator::kIncludeAll) return "include_all";
  return text::round_to(q, 3);
}

inline double threshold_from_json(const Json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() != "include_all") throw ParseError("unknown threshold sentinel");
    return ConformalCalibrator::kIncludeAll;
  }
  return j.get<double>();
}

inline Json split_json(const ConformalSplitMetrics& m, bool canonical) {
  return Json{{"coverage", text::round_to(m.coverage, 3)},
              {"set_size", text::round_to(m.set_size, 3)},
              {"cr", text::round_to(m.cr, 3)},
              {"cr_all_empty", m.cr_all_empty},
              {"canonical", canonical}};
}

inline ConformalSplitMetrics split_from_json(const Json& j) {
  return {j.at("coverage").get<double>(), j.at("set_size").get<double>(), j.at("cr").get<double>(),
          j.at("cr_all_empty").get<bool>()};
}

inline Json recovery_json(const RecoveryCounts& r) {
  return Json{{"mislabel", r.mislabel},
              {"inset", r.inset},
              {"ratio", text::round_to(r.ratio, 1)},
              {"ratio_undefined", r.ratio_undefined}};
}

inline RecoveryCounts recovery_from_json(const Json& j) {
  return {j.at("mislabel").get<std::size_t>(), j.at("inset").get<std::size_t>(), j.at("ratio").get<double>(),
          j.at("ratio_undefined").get<bool>()};
}

}  // namespace detail

inline Json to_json(const MetricsReport& r) {
  Json j;
  j["schema"] = "cfu-report/1";
  j["method"] = r.method;
  j["lambda"] = r.lambda;
  j["seed"] = r.seed;
  j["alpha"] = r.alpha;
  j["calibration"] = Json{{"size", r.calib_size},
                          {"scale", text::round_to(r.calib_scale, 3)},
                          {"q_hat", detail::threshold_json(r.q_hat)}};
  j["accuracy"] = Json{{"ua", text::round_to(r.accuracy.ua, 1)},
                       {"ra", text::round_to(r.accuracy.ra, 1)},
                       {"ta", text::round_to(r.accuracy.ta, 1)}};
  j["conformal"] = Json{{"forget", detail::split_json(r.forget, true)},
                        {"test", detail::split_json(r.test, true)},
                        {"retain", detail::split_json(r.retain, false)}};
  j["recovery"] = detail::recovery_json(r.recovery);
  if (r.mia) {
    j["mia"] = Json{{"mia", text::round_to(r.mia->mia, 1)},
                    {"miacr", text::round_to(r.mia->miacr, 3)},
                    {"q_hat", detail::threshold_json(r.mia->q_hat)},
                    {"recovery", detail::recovery_json(r.mia->recovery)}};
  }
  if (!r.gap_to_retrain.empty()) {
    Json g = Json::object();
    for (const auto& [k, v] : r.gap_to_retrain) g[k] = v;
    j["gap_to_retrain"] = g;
  }
  return j;
}

inline MetricsReport report_from_json(const Json& j) {
  try {
    MetricsReport r;
    r.method = j.at("method").get<std::string>();
    r.lambda = j.at("lambda").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.alpha = j.at("alpha").get<double>();
    const auto& c = j.at("calibration");
    r.calib_size = c.at("size").get<std::size_t>();
    r.calib_scale = c.at("scale").get<double>();
    r.q_hat = detail::threshold_from_json(c.at("q_hat"));
    const auto& a = j.at("accuracy");
    r.accuracy = {a.at("ua").get<double>(), a.at("ra").get<double>(), a.at("ta").get<double>()};
    const auto& cf = j.at("conformal");
    r.forget = detail::split_from_json(cf.at("forget"));
    r.test = detail::split_from_json(cf.at("test"));
    r.retain = detail::split_from_json(cf.at("retain"));
    r.recovery = detail::recovery_from_json(j.at("recovery"));
    if (j.contains("mia")) {
      const auto& m = j.at("mia");
      r.mia = MiaMetrics{m.at("mia").get<double>(), m.at("miacr").get<double>(),
                         detail::threshold_from_json(m.at("q_hat")), detail::recovery_from_json(m.at("recovery"))};
    }
    if (j.contains("gap_to_retrain")) {
      for (const auto& [k, v] : j.at("gap_to_retrain").items()) r.gap_to_retrain[k] = v.get<double>();
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed report JSON: ") + e.what());
  }
}

inline std::string dump_report(const MetricsReport& r) { return to_json(r).dump(2) + "\n"; }

inline void save_report(const MetricsReport& r, const std::string& path) {
  auto out = text::open_out(path);
  out << dump_report(r);
}

inline MetricsReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open report '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return report_from_json(j);
}

// ---------------------------------------------------------------------------
// Flattened CSV row (sweep aggregation and `report`).

inline const std::vector<std::string>& flat_columns() {
  static const std::vector<std::string> cols = {
      "ua", "ra", "ta", "q_hat",
      "coverage_forget", "set_size_forget", "cr_forget",
      "coverage_test", "set_size_test", "cr_test",
      "coverage_retain", "set_size_retain", "cr_retain",
      "recovery_mislabel", "recovery_inset", "recovery_ratio",
      "mia", "miacr", "mia_recovery_mislabel", "mia_recovery_inset", "mia_recovery_ratio"};
  return cols;
}

/// Rounded metric values keyed by flat_columns(); MIA keys are NaN when the
/// report has no MIA block, q_hat is NaN when include-all.
inline std::map<std::string, double> flatten(const MetricsReport& r) {
  const double nan = std::nan("");
  auto q = [&](double v) { return v == ConformalCalibrator::kIncludeAll ? nan : text::round_to(v, 3); };
  std::map<std::string, double> f{
      {"ua", text::round_to(r.accuracy.ua, 1)},
      {"ra", text::round_to(r.accuracy.ra, 1)},
      {"ta", text::round_to(r.accuracy.ta, 1)},
      {"q_hat", q(r.q_hat)},
      {"coverage_forget", text::round_to(r.forget.coverage, 3)},
      {"set_size_forget", text::round_to(r.forget.set_size, 3)},
      {"cr_forget", text::round_to(r.forget.cr, 3)},
      {"coverage_test", text::round_to(r.test.coverage, 3)},
      {"set_size_test", text::round_to(r.test.set_size, 3)},
      {"cr_test", text::round_to(r.test.cr, 3)},
      {"coverage_retain", text::round_to(r.retain.coverage, 3)},
      {"set_size_retain", text::round_to(r.retain.set_size, 3)},
      {"cr_retain", text::round_to(r.retain.cr, 3)},
      {"recovery_mislabel", static_cast<double>(r.recovery.mislabel)},
      {"recovery_inset", static_cast<double>(r.recovery.inset)},
      {"recovery_ratio", text::round_to(r.recovery.ratio, 1)},
      {"mia", nan},
      {"miacr", nan},
      {"mia_recovery_mislabel", nan},
      {"mia_recovery_inset", nan},
      {"mia_recovery_ratio", nan},
  };
  if (r.mia) {
    f["mia"] = text::round_to(r.mia->mia, 1);
    f["miacr"] = text::round_to(r.mia->miacr, 3);
    f["mia_recovery_mislabel"] = static_cast<double>(r.mia->recovery.mislabel);
    f["mia_recovery_inset"] = static_cast<double>(r.mia->recovery.inset);
    f["mia_recovery_ratio"] = text::round_to(r.mia->recovery.ratio, 1);
  }
  return f;
}

inline std::string csv_value(double v) { return std::isnan(v) ? std::string() : text::format_exact(v); }

inline void write_flat_header(std::ostream& out) {
  out << "method,lambda,alpha,seed";
  for (const auto& c : flat_columns()) out << ',' << c;
  out << '\n';
}

inline void write_flat_row(std::ostream& out, const MetricsReport& r) {
  const auto f = flatten(r);
  out << r.method << ',' << text::format_exact(r.lambda) << ',' << text::format_exact(r.alpha) << ',' << r.seed;
  for (const auto& c : flat_columns()) out << ',' << csv_value(f.at(c));
  out << '\n';
}

}  // namespace cfu
