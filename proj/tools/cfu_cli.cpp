// cfu: command-line front end for conformal unlearning evaluation.
//
// Stages (each writes its artifacts under --out-dir and records itself in
// <out-dir>/manifest.json):
//
//   gen-data         dataset.csv + splits.csv
//   train            original model checkpoint
//   unlearn          unlearned checkpoint + per-epoch log
//   semi-shadow      semi-shadow calibration model checkpoint
//   predict          probability matrix CSV
//   eval             metrics report JSON (accuracy, conformal, recovery)
//   mia              adds MIA / MIACR / MIA recovery to a report
//   calib-stability  q_hat stability CSVs over calibration sizes
//   sweep            method x lambda x alpha x seed grid, raw + summary CSV
//   report           merges reports into a comparison table
//   pipeline         gen-data -> train -> unlearn (all methods) -> eval + mia
//
// Exit codes: 0 ok, 1 usage, 2 data/consistency, 3 numerical divergence.
// Most flags can also be set through a CFU_* environment variable.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "cfu/cfu.hpp"

namespace fs = std::filesystem;
using cfu::Json;

namespace {

constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Manifest

class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> argv)
      : command_(std::move(command)), argv_(std::move(argv)), start_(std::chrono::steady_clock::now()) {}

  Json& config() { return config_; }
  void input(const std::string& name, const std::string& path) { inputs_[name] = path; }
  void output(const std::string& name, const std::string& path) { outputs_[name] = path; }

  /// Appends this stage to <out_dir>/manifest.json.
  void write(const std::string& out_dir) const {
    for (const auto& [name, path] : outputs_.items()) {
      if (!fs::exists(path.get<std::string>())) {
        throw cfu::ConsistencyError("manifest output '" + name + "' missing: " + path.get<std::string>());
      }
    }
    const auto path = (fs::path(out_dir) / "manifest.json").string();
    Json doc;
    if (fs::exists(path)) {
      std::ifstream in(path);
      try {
        doc = Json::parse(in);
      } catch (const nlohmann::json::exception&) {
        doc = Json();
      }
    }
    if (!doc.is_object()) doc = Json{{"tool", "cfu"}, {"version", kVersion}, {"stages", Json::array()}};
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    doc["stages"].push_back(Json{{"command", command_},
                                 {"argv", argv_},
                                 {"config", config_},
                                 {"inputs", inputs_},
                                 {"outputs", outputs_},
                                 {"timing", {{"wall_seconds", seconds}}}});
    auto out = cfu::text::open_out(path);
    out << doc.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  Json config_ = Json::object();
  Json inputs_ = Json::object();
  Json outputs_ = Json::object();
  std::chrono::steady_clock::time_point start_;
};

std::string out_path(const std::string& dir, const std::string& name) {
  fs::create_directories(dir);
  return (fs::path(dir) / name).string();
}

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw cfu::ConfigError(std::string(what) + " '" + path + "' does not exist");
}

std::string lambda_tag(double lambda) {
  std::ostringstream os;
  os << lambda;
  return os.str();
}

Json dataset_spec_json(const cfu::DatasetSpec& d) {
  Json j{{"classes", d.num_classes},
         {"dim", d.dim},
         {"train_per_class", d.train_per_class},
         {"test_per_class", d.test_per_class},
         {"calib_per_class", d.calib_eval_per_class},
         {"calib_unlearn_per_class", d.calib_unlearn_per_class},
         {"pool_extra_per_class", d.pool_extra_per_class},
         {"separation", d.separation},
         {"noise", d.noise},
         {"seed", d.seed},
         {"balanced_calibration", d.balanced_calibration}};
  if (d.forget_class) {
    j["forget_class"] = *d.forget_class;
  } else {
    j["forget_fraction"] = d.forget_fraction;
  }
  return j;
}

Json train_json(const cfu::TrainConfig& t, int hidden) {
  return Json{{"hidden", hidden},           {"epochs", t.epochs},         {"learning_rate", t.learning_rate},
              {"momentum", t.momentum},     {"batch_size", t.batch_size}, {"seed", t.seed}};
}

Json unlearn_json(const cfu::UnlearnRunConfig& u) {
  return Json{{"method", std::string(cfu::to_string(u.method))},
              {"lambda", u.lambda},
              {"delta", u.delta},
              {"alpha", u.alpha},
              {"epochs", u.resolved_epochs()},
              {"learning_rate", u.resolved_learning_rate()},
              {"momentum", u.momentum},
              {"batch_size", u.batch_size},
              {"neggrad_beta", u.neggrad_beta},
              {"cpu", u.cpu},
              {"cpu_loss", u.cpu_loss == cfu::CpuLoss::kConformal ? "conformal" : "cw"},
              {"seed", u.seed}};
}

// ---------------------------------------------------------------------------
// Shared option groups

struct DataOptions {
  cfu::DatasetSpec spec;
  int forget_class = -1;
  bool uniform_calibration = false;

  void add(CLI::App* app) {
    app->add_option("--classes", spec.num_classes, "Number of classes K")->capture_default_str();
    app->add_option("--dim", spec.dim, "Feature dimension d")->capture_default_str();
    app->add_option("--train-per-class", spec.train_per_class)->capture_default_str();
    app->add_option("--test-per-class", spec.test_per_class)->capture_default_str();
    app->add_option("--calib-per-class", spec.calib_eval_per_class, "Evaluation calibration (D_c) per class")
        ->capture_default_str();
    app->add_option("--calib-unlearn-per-class", spec.calib_unlearn_per_class,
                    "Unlearning calibration (D_c') per class")
        ->capture_default_str();
    app->add_option("--pool-extra-per-class", spec.pool_extra_per_class)->capture_default_str();
    app->add_option("--separation", spec.separation, "Class-centre distance from origin")->capture_default_str();
    app->add_option("--noise", spec.noise, "Per-feature noise std")->capture_default_str();
    app->add_option("--forget-fraction", spec.forget_fraction, "Random forgetting fraction")
        ->envname("CFU_FORGET_FRACTION")
        ->capture_default_str();
    app->add_option("--forget-class", forget_class, "Class-wise forgetting (overrides --forget-fraction)")
        ->envname("CFU_FORGET_CLASS");
    app->add_flag("--uniform-calibration", uniform_calibration, "Sample D_c/D_c' uniformly instead of per class");
  }

  cfu::DatasetSpec resolve(std::uint64_t seed) const {
    cfu::DatasetSpec s = spec;
    s.seed = seed;
    if (forget_class >= 0) s.forget_class = forget_class;
    s.balanced_calibration = !uniform_calibration;
    return s;
  }
};

struct TrainOptions {
  cfu::TrainConfig cfg;
  int hidden = 64;

  void add(CLI::App* app, const std::string& prefix = "") {
    app->add_option("--" + prefix + "hidden", hidden, "Hidden units H")->capture_default_str();
    app->add_option("--" + prefix + "epochs", cfg.epochs)->capture_default_str();
    app->add_option("--" + prefix + "lr", cfg.learning_rate)->capture_default_str();
    app->add_option("--" + prefix + "momentum", cfg.momentum)->capture_default_str();
    app->add_option("--" + prefix + "batch-size", cfg.batch_size)->capture_default_str();
  }
};

struct UnlearnOptions {
  cfu::UnlearnRunConfig cfg;
  std::string method = "finetune";
  int epochs = 0;
  double lr = 0.0;
  bool no_cpu = false;
  std::string cpu_loss = "conformal";

  void add(CLI::App* app, bool with_method_and_lambda) {
    if (with_method_and_lambda) {
      app->add_option("--method", method, "retrain|finetune|random_label|gradient_ascent|neggrad_plus")
          ->envname("CFU_METHOD")
          ->capture_default_str();
      app->add_option("--lambda", cfg.lambda, "Weight of the conformal unlearning loss")
          ->envname("CFU_LAMBDA")
          ->capture_default_str();
    }
    app->add_option("--delta", cfg.delta, "Margin of the unlearning loss")->envname("CFU_DELTA")->capture_default_str();
    app->add_option("--unlearn-alpha", cfg.alpha, "Miscoverage level for q_bar")->capture_default_str();
    app->add_option("--unlearn-epochs", epochs, "Override the per-method epoch budget");
    app->add_option("--unlearn-lr", lr, "Override the per-method learning rate");
    app->add_option("--beta", cfg.neggrad_beta, "NegGrad+ forget-loss weight")->capture_default_str();
    app->add_flag("--no-cpu", no_cpu, "Run the host method without the conformal term");
    app->add_option("--cpu-loss", cpu_loss, "conformal|cw")->check(CLI::IsMember({"conformal", "cw"}))
        ->capture_default_str();
  }

  cfu::UnlearnRunConfig resolve(std::uint64_t seed, const cfu::TrainConfig& original) const {
    cfu::UnlearnRunConfig u = cfg;
    u.method = cfu::parse_method(method);
    u.seed = seed;
    u.original = original;
    u.original.seed = seed;
    if (epochs > 0) u.epochs = epochs;
    if (lr > 0.0) u.learning_rate = lr;
    u.cpu = !no_cpu;
    u.cpu_loss = cpu_loss == "cw" ? cfu::CpuLoss::kCw : cfu::CpuLoss::kConformal;
    return u;
  }
};

std::vector<cfu::SplitName> parse_split_selector(const std::string& sel) {
  if (sel == "all") return {cfu::kAllSplits.begin(), cfu::kAllSplits.end()};
  std::vector<cfu::SplitName> out;
  for (auto part : cfu::text::split(sel)) {
    auto s = cfu::parse_split_name(cfu::text::trim(part));
    if (!s) throw cfu::ConfigError("unknown split '" + std::string(part) + "'");
    out.push_back(*s);
  }
  return out;
}

cfu::QuantileRule parse_rule(const std::string& s) {
  return s == "empirical" ? cfu::QuantileRule::kEmpirical : cfu::QuantileRule::kCorrected;
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const char* what) {
  std::vector<T> out;
  for (auto part : cfu::text::split(s)) {
    part = cfu::text::trim(part);
    if (part.empty()) continue;
    try {
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(cfu::text::parse_double(part, what));
      } else if constexpr (std::is_integral_v<T>) {
        out.push_back(cfu::text::parse_int<T>(part, what));
      } else {
        out.push_back(T(part));
      }
    } catch (const cfu::ParseError& e) {
      throw cfu::ConfigError(e.what());
    }
  }
  if (out.empty()) throw cfu::ConfigError(std::string(what) + ": empty list");
  return out;
}

// ---------------------------------------------------------------------------
// Stage implementations shared by single commands and `pipeline`.

struct GenDataOutputs {
  std::string dataset, splits;
};

GenDataOutputs do_gen_data(const cfu::DatasetSpec& spec, const std::string& dir) {
  auto [ds, splits] = cfu::generate(spec);
  GenDataOutputs o{out_path(dir, "dataset.csv"), out_path(dir, "splits.csv")};
  cfu::save_dataset(ds, o.dataset);
  cfu::save_splits(splits, o.splits);
  return o;
}

void do_train(const std::string& data, const std::string& split_file, const TrainOptions& t, std::uint64_t seed,
              const std::string& out) {
  const auto ds = cfu::load_dataset(data);
  const auto splits = cfu::load_splits(split_file);
  auto cfg = t.cfg;
  cfg.seed = seed;
  cfu::save_checkpoint(cfu::train_original(ds, splits, t.hidden, cfg), out);
}

void do_unlearn(const std::string& data, const std::string& split_file, const std::string& model,
                const cfu::UnlearnRunConfig& u, const std::string& ckpt_out, const std::string& log_out) {
  const auto ds = cfu::load_dataset(data);
  const auto splits = cfu::load_splits(split_file);
  const auto original = cfu::load_checkpoint(model);
  const auto res = cfu::run_method(u, original, ds, splits);
  cfu::save_checkpoint(res.params, ckpt_out);
  auto log = cfu::text::open_out(log_out);
  cfu::write_epoch_log(log, res.log);
}

void do_predict(const std::string& data, const std::string& split_file, const std::string& model,
                const std::string& selector, const std::string& out) {
  const auto ds = cfu::load_dataset(data);
  const auto splits = cfu::load_splits(split_file);
  const auto params = cfu::load_checkpoint(model);
  const auto wanted = parse_split_selector(selector);
  const auto tags = splits.tags();
  std::vector<cfu::Sample> samples;
  std::vector<cfu::SplitName> t;
  for (std::size_t id = 0; id < ds.samples.size(); ++id) {
    auto it = tags.find(id);
    if (it == tags.end()) continue;
    // Calibration rows carry their own tag but also belong to the pool.
    const bool in_pool = it->second == cfu::SplitName::kPool || it->second == cfu::SplitName::kCalibEval ||
                         it->second == cfu::SplitName::kCalibUnlearn;
    const bool keep = std::any_of(wanted.begin(), wanted.end(), [&](cfu::SplitName w) {
      return w == it->second || (w == cfu::SplitName::kPool && in_pool);
    });
    if (!keep) continue;
    samples.push_back(ds.samples[id]);
    t.push_back(it->second);
  }
  cfu::save_matrix(cfu::predict_matrix(params, samples, t), out);
}

cfu::MetricsReport do_eval(const std::string& predictions, const std::string& split_file,
                           const cfu::EvalConfig& cfg, const std::string& calib_predictions,
                           const std::string& retrain_report, const std::string& method, double lambda) {
  const auto m = cfu::load_matrix(predictions);
  const auto splits = cfu::load_splits(split_file);
  std::optional<cfu::ProbabilityMatrix> calib;
  if (!calib_predictions.empty()) calib = cfu::load_matrix(calib_predictions);
  auto report = cfu::evaluate(m, splits, cfg, calib ? &*calib : nullptr);
  report.method = method;
  report.lambda = lambda;
  if (!retrain_report.empty()) {
    report.gap_to_retrain = cfu::gap_to_retrain(report, cfu::load_report(retrain_report));
  }
  return report;
}

void do_mia(const std::string& predictions, const std::string& split_file, const std::string& report_path,
            double alpha, std::uint64_t seed, const std::string& attack_out, const std::string& retrain_report) {
  const auto m = cfu::load_matrix(predictions);
  const auto splits = cfu::load_splits(split_file);
  auto report = cfu::load_report(report_path);
  const auto run = cfu::add_mia(report, m, splits, alpha, seed);
  if (!retrain_report.empty()) {
    const auto rt = cfu::load_report(retrain_report);
    if (rt.mia) report.gap_to_retrain = cfu::gap_to_retrain(report, rt);
  }
  cfu::save_attack(run.attack, attack_out);
  cfu::save_report(report, report_path);
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepCell {
  std::size_t seed_index;
  cfu::Method method;
  double lambda;
  double alpha;
};

std::map<std::string, std::pair<double, double>> mean_std(const std::vector<const cfu::MetricsReport*>& rs) {
  std::map<std::string, std::pair<double, double>> out;
  for (const auto& col : cfu::flat_columns()) {
    std::vector<double> v;
    for (const auto* r : rs) {
      const double x = cfu::flatten(*r).at(col);
      if (!std::isnan(x)) v.push_back(x);
    }
    if (v.empty()) {
      out[col] = {std::nan(""), std::nan("")};
      continue;
    }
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    out[col] = {mean, sd};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report table

void write_comparison(const std::vector<cfu::MetricsReport>& reports, const std::string& csv_path,
                      const std::string& txt_path) {
  {
    auto out = cfu::text::open_out(csv_path);
    cfu::write_flat_header(out);
    for (const auto& r : reports) cfu::write_flat_row(out, r);
  }
  auto out = cfu::text::open_out(txt_path);
  auto cell = [](double v, int dp) {
    std::ostringstream os;
    if (std::isnan(v)) {
      os << "-";
    } else {
      os << std::fixed << std::setprecision(dp) << v;
    }
    return os.str();
  };
  auto gap = [&](const cfu::MetricsReport& r, const std::string& key, int dp) {
    auto it = r.gap_to_retrain.find(key);
    return it == r.gap_to_retrain.end() ? std::string() : "(" + cell(it->second, dp) + ")";
  };
  out << std::left << std::setw(16) << "method" << std::setw(8) << "lambda" << std::setw(8) << "alpha"
      << std::setw(14) << "UA" << std::setw(14) << "RA" << std::setw(14) << "TA" << std::setw(16) << "CR(D_f)"
      << std::setw(16) << "CR(D_test)" << std::setw(14) << "MIA" << std::setw(16) << "MIACR"
      << "recover(UA)\n";
  for (const auto& r : reports) {
    const auto f = cfu::flatten(r);
    out << std::left << std::setw(16) << r.method << std::setw(8) << cell(r.lambda, 2) << std::setw(8)
        << cell(r.alpha, 2) << std::setw(14) << cell(f.at("ua"), 1) + gap(r, "ua", 1) << std::setw(14)
        << cell(f.at("ra"), 1) + gap(r, "ra", 1) << std::setw(14) << cell(f.at("ta"), 1) + gap(r, "ta", 1)
        << std::setw(16) << cell(f.at("cr_forget"), 3) + gap(r, "cr_forget", 3) << std::setw(16)
        << cell(f.at("cr_test"), 3) + gap(r, "cr_test", 3) << std::setw(14) << cell(f.at("mia"), 1) + gap(r, "mia", 1)
        << std::setw(16) << cell(f.at("miacr"), 3) + gap(r, "miacr", 3) << r.recovery.inset << "/"
        << r.recovery.mislabel << " ("
        << (r.recovery.ratio_undefined ? std::string("n/a") : cell(r.recovery.ratio, 1) + "%") << ")\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Conformal-prediction evaluation and unlearning for classifiers", "cfu"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out_dir = "out";
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Run seed (every stage derives its streams from it)")
        ->envname("CFU_SEED")
        ->capture_default_str();
    sub->add_option("--out-dir", out_dir, "Output directory")->envname("CFU_OUT_DIR")->capture_default_str();
  };

  std::string data_path, split_path, model_path, predictions_path, output_path;
  auto add_inputs = [&](CLI::App* sub, bool data, bool model) {
    if (data) sub->add_option("--data", data_path, "Dataset CSV")->required();
    sub->add_option("--split-file", split_path, "Split CSV")->required();
    if (model) sub->add_option("--model", model_path, "Model checkpoint")->required();
  };

  // gen-data
  DataOptions data_opts;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset and split files");
  add_common(gen);
  data_opts.add(gen);

  // train
  TrainOptions train_opts;
  auto* train = app.add_subcommand("train", "Train the original model");
  add_common(train);
  add_inputs(train, true, false);
  train_opts.add(train);
  train->add_option("--out", output_path, "Checkpoint path (default <out-dir>/original.ckpt)");

  // unlearn
  UnlearnOptions unlearn_opts;
  TrainOptions unlearn_recipe;
  auto* unlearn = app.add_subcommand("unlearn", "Run an unlearning method, optionally with the conformal term");
  add_common(unlearn);
  add_inputs(unlearn, true, true);
  unlearn_opts.add(unlearn, true);
  unlearn->add_option("--train-epochs", unlearn_recipe.cfg.epochs, "Original recipe epochs (used by retrain)")
      ->capture_default_str();
  unlearn->add_option("--train-lr", unlearn_recipe.cfg.learning_rate, "Original recipe learning rate")
      ->capture_default_str();

  // semi-shadow
  cfu::SemiShadowConfig shadow_cfg;
  auto* shadow = app.add_subcommand("semi-shadow", "Finetune the original model on randomly relabelled D_c");
  add_common(shadow);
  add_inputs(shadow, true, true);
  shadow->add_option("--epochs", shadow_cfg.epochs)->capture_default_str();
  shadow->add_option("--lr", shadow_cfg.learning_rate)->capture_default_str();
  shadow->add_option("--out", output_path, "Checkpoint path (default <out-dir>/semi_shadow.ckpt)");

  // predict
  std::string selector = "all";
  auto* predict = app.add_subcommand("predict", "Write the probability matrix of a model");
  add_common(predict);
  add_inputs(predict, true, true);
  predict->add_option("--splits", selector, "'all' or a comma list of split names")->capture_default_str();
  predict->add_option("--out", output_path, "Matrix path (default <out-dir>/predictions.csv)");

  // eval
  cfu::EvalConfig eval_cfg;
  std::string quantile_rule = "corrected", calib_predictions, retrain_report, method_label = "unknown";
  double report_lambda = 0.0;
  auto* eval = app.add_subcommand("eval", "Calibrate on D_c and write the metrics report");
  add_common(eval);
  eval->add_option("--predictions", predictions_path, "Probability matrix CSV")->required();
  add_inputs(eval, false, false);
  eval->add_option("--alpha", eval_cfg.alpha, "Miscoverage level")->envname("CFU_ALPHA")->capture_default_str();
  eval->add_option("--calib-size", eval_cfg.calib_size, "Requested |D_c|")->envname("CFU_CALIB_SIZE")
      ->capture_default_str();
  eval->add_option("--quantile", quantile_rule, "corrected|empirical")
      ->check(CLI::IsMember({"corrected", "empirical"}))
      ->capture_default_str();
  eval->add_option("--calib-predictions", calib_predictions, "Calibrate on this matrix instead (semi-shadow)");
  eval->add_option("--retrain-report", retrain_report, "Retrain report for gap-to-retrain deltas");
  eval->add_option("--method", method_label, "Method label stored in the report")->envname("CFU_METHOD");
  eval->add_option("--lambda", report_lambda, "Lambda label stored in the report")->envname("CFU_LAMBDA");
  eval->add_option("--out", output_path, "Report path (default <out-dir>/report.json)");

  // mia
  std::string report_path, attack_out;
  double mia_alpha = 0.05;
  auto* mia = app.add_subcommand("mia", "Train the membership attack and add MIA/MIACR to a report");
  add_common(mia);
  mia->add_option("--predictions", predictions_path, "Probability matrix CSV")->required();
  add_inputs(mia, false, false);
  mia->add_option("--report", report_path, "Report JSON to update in place")->required();
  mia->add_option("--alpha", mia_alpha, "Miscoverage level for MIACR")->envname("CFU_ALPHA")->capture_default_str();
  mia->add_option("--attack-out", attack_out, "Attack model path (default <out-dir>/attack.txt)");
  mia->add_option("--retrain-report", retrain_report, "Retrain report for gap-to-retrain deltas");

  // calib-stability
  std::string sizes_str = "50,100,200,500,1000,2000", source = "pool";
  int repeats = 20;
  double stab_alpha = 0.05;
  auto* stab = app.add_subcommand("calib-stability", "q_hat stability across calibration sizes");
  add_common(stab);
  stab->add_option("--predictions", predictions_path, "Probability matrix CSV")->required();
  add_inputs(stab, false, false);
  stab->add_option("--sizes", sizes_str)->capture_default_str();
  stab->add_option("--repeats", repeats)->capture_default_str();
  stab->add_option("--alpha", stab_alpha)->envname("CFU_ALPHA")->capture_default_str();
  stab->add_option("--source", source, "pool|calib_eval")->check(CLI::IsMember({"pool", "calib_eval"}))
      ->capture_default_str();

  // sweep
  std::string methods_str = "retrain,finetune,random_label,gradient_ascent,neggrad_plus", lambdas_str = "0",
              alphas_str = "0.05", seeds_str = "1,2,3";
  int jobs = 1;
  bool no_mia = false, semi_shadow = false;
  DataOptions sweep_data;
  TrainOptions sweep_train;
  UnlearnOptions sweep_unlearn;
  cfu::EvalConfig sweep_eval;
  auto* sweep = app.add_subcommand("sweep", "Run the method x lambda x alpha x seed grid");
  add_common(sweep);
  sweep->add_option("--methods", methods_str)->capture_default_str();
  sweep->add_option("--lambdas", lambdas_str)->capture_default_str();
  sweep->add_option("--alphas", alphas_str)->capture_default_str();
  sweep->add_option("--seeds", seeds_str)->capture_default_str();
  sweep->add_option("--jobs", jobs, "Grid cells evaluated concurrently")->capture_default_str();
  sweep->add_option("--calib-size", sweep_eval.calib_size)->envname("CFU_CALIB_SIZE")->capture_default_str();
  sweep->add_flag("--no-mia", no_mia);
  sweep->add_flag("--semi-shadow", semi_shadow, "Calibrate random_label on a semi-shadow model");
  sweep_data.add(sweep);
  sweep_train.add(sweep, "train-");
  sweep_unlearn.add(sweep, false);

  // report
  std::vector<std::string> report_inputs;
  auto* report = app.add_subcommand("report", "Merge report JSONs into one comparison table");
  add_common(report);
  report->add_option("inputs", report_inputs, "Report JSON files")->required();

  // pipeline
  std::string pipe_seeds = "1,2,3";
  DataOptions pipe_data;
  TrainOptions pipe_train;
  UnlearnOptions pipe_unlearn;
  cfu::EvalConfig pipe_eval;
  auto* pipeline = app.add_subcommand("pipeline", "gen-data -> train -> unlearn (all methods) -> eval + mia");
  add_common(pipeline);
  pipeline->add_option("--seeds", pipe_seeds)->capture_default_str();
  pipeline->add_option("--alpha", pipe_eval.alpha)->envname("CFU_ALPHA")->capture_default_str();
  pipeline->add_option("--lambda", pipe_unlearn.cfg.lambda)->envname("CFU_LAMBDA")->capture_default_str();
  pipeline->add_option("--calib-size", pipe_eval.calib_size)->envname("CFU_CALIB_SIZE")->capture_default_str();
  pipe_data.add(pipeline);
  pipe_train.add(pipeline, "train-");
  pipe_unlearn.add(pipeline, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "cfu: " << e.what() << '\n';
    return static_cast<int>(cfu::ExitCode::kUsage);
  }

  try {
    auto* sub = app.get_subcommands().front();
    Manifest manifest(sub->get_name(), args);
    manifest.config()["seed"] = seed;

    if (sub == gen) {
      const auto spec = data_opts.resolve(seed);
      manifest.config()["dataset"] = dataset_spec_json(spec);
      const auto o = do_gen_data(spec, out_dir);
      manifest.output("dataset", o.dataset);
      manifest.output("splits", o.splits);
    } else if (sub == train) {
      require_file(data_path, "dataset");
      require_file(split_path, "split file");
      const auto out = output_path.empty() ? out_path(out_dir, "original.ckpt") : output_path;
      auto cfg = train_opts.cfg;
      cfg.seed = seed;
      manifest.config()["train"] = train_json(cfg, train_opts.hidden);
      manifest.input("dataset", data_path);
      manifest.input("splits", split_path);
      do_train(data_path, split_path, train_opts, seed, out);
      manifest.output("checkpoint", out);
    } else if (sub == unlearn) {
      require_file(data_path, "dataset");
      require_file(split_path, "split file");
      require_file(model_path, "model");
      const auto u = unlearn_opts.resolve(seed, unlearn_recipe.cfg);
      manifest.config()["unlearn"] = unlearn_json(u);
      const std::string stem = std::string(cfu::to_string(u.method)) + "_lambda" + lambda_tag(u.lambda);
      const auto ckpt = out_path(out_dir, stem + ".ckpt");
      const auto log = out_path(out_dir, stem + "_epochs.csv");
      manifest.input("dataset", data_path);
      manifest.input("splits", split_path);
      manifest.input("model", model_path);
      do_unlearn(data_path, split_path, model_path, u, ckpt, log);
      manifest.output("checkpoint", ckpt);
      manifest.output("epoch_log", log);
    } else if (sub == shadow) {
      require_file(data_path, "dataset");
      require_file(split_path, "split file");
      require_file(model_path, "model");
      shadow_cfg.seed = seed;
      const auto ds = cfu::load_dataset(data_path);
      const auto splits = cfu::load_splits(split_path);
      const auto params =
          cfu::semi_shadow_calibrate(cfu::load_checkpoint(model_path), ds.select(splits.calib_eval), shadow_cfg);
      const auto out = output_path.empty() ? out_path(out_dir, "semi_shadow.ckpt") : output_path;
      cfu::save_checkpoint(params, out);
      manifest.config()["semi_shadow"] = {{"epochs", shadow_cfg.epochs}, {"learning_rate", shadow_cfg.learning_rate}};
      manifest.input("model", model_path);
      manifest.output("checkpoint", out);
    } else if (sub == predict) {
      require_file(data_path, "dataset");
      require_file(split_path, "split file");
      require_file(model_path, "model");
      const auto out = output_path.empty() ? out_path(out_dir, "predictions.csv") : output_path;
      do_predict(data_path, split_path, model_path, selector, out);
      manifest.config()["splits"] = selector;
      manifest.input("model", model_path);
      manifest.output("predictions", out);
    } else if (sub == eval) {
      require_file(predictions_path, "predictions");
      require_file(split_path, "split file");
      eval_cfg.seed = seed;
      eval_cfg.rule = parse_rule(quantile_rule);
      const auto r = do_eval(predictions_path, split_path, eval_cfg, calib_predictions, retrain_report, method_label,
                             report_lambda);
      const auto out = output_path.empty() ? out_path(out_dir, "report.json") : output_path;
      cfu::save_report(r, out);
      manifest.config()["eval"] = {{"alpha", eval_cfg.alpha}, {"calib_size", eval_cfg.calib_size},
                                   {"quantile", quantile_rule}};
      manifest.input("predictions", predictions_path);
      manifest.output("report", out);
    } else if (sub == mia) {
      require_file(predictions_path, "predictions");
      require_file(split_path, "split file");
      require_file(report_path, "report");
      const auto out = attack_out.empty() ? out_path(out_dir, "attack.txt") : attack_out;
      do_mia(predictions_path, split_path, report_path, mia_alpha, seed, out, retrain_report);
      manifest.config()["mia"] = {{"alpha", mia_alpha}};
      manifest.output("attack", out);
      manifest.output("report", report_path);
    } else if (sub == stab) {
      require_file(predictions_path, "predictions");
      require_file(split_path, "split file");
      const auto m = cfu::load_matrix(predictions_path);
      const auto splits = cfu::load_splits(split_path);
      const auto& ids = source == "pool" ? splits.validation_pool : splits.calib_eval;
      const auto sizes = parse_list<std::size_t>(sizes_str, "--sizes");
      const auto result = cfu::stability_study(cfu::true_label_scores(m, ids), sizes, repeats, stab_alpha, seed);
      const auto raw = out_path(out_dir, "stability_raw.csv");
      const auto summary = out_path(out_dir, "stability_summary.csv");
      {
        auto o = cfu::text::open_out(raw);
        cfu::write_stability_samples(o, result);
      }
      {
        auto o = cfu::text::open_out(summary);
        cfu::write_stability_summary(o, result);
      }
      manifest.config()["stability"] = {{"sizes", sizes}, {"repeats", repeats}, {"alpha", stab_alpha},
                                        {"source", source}};
      manifest.output("raw", raw);
      manifest.output("summary", summary);
    } else if (sub == sweep) {
      const auto methods = parse_list<std::string>(methods_str, "--methods");
      const auto lambdas = parse_list<double>(lambdas_str, "--lambdas");
      const auto alphas = parse_list<double>(alphas_str, "--alphas");
      const auto seeds = parse_list<std::uint64_t>(seeds_str, "--seeds");
      if (jobs < 1) throw cfu::ConfigError("--jobs must be >= 1");

      std::vector<cfu::ExperimentConfig> base(seeds.size());
      std::vector<cfu::PreparedRun> prepared;
      for (std::size_t i = 0; i < seeds.size(); ++i) {
        auto& c = base[i];
        c.data = sweep_data.resolve(seeds[i]);
        c.hidden = sweep_train.hidden;
        c.train = sweep_train.cfg;
        c.unlearn = sweep_unlearn.resolve(seeds[i], sweep_train.cfg);
        c.eval = sweep_eval;
        c.with_mia = !no_mia;
        if (semi_shadow) c.semi_shadow = cfu::SemiShadowConfig{};
        c.set_seed(seeds[i]);
        prepared.push_back(cfu::prepare(c));
      }
      std::vector<SweepCell> cells;
      for (std::size_t si = 0; si < seeds.size(); ++si)
        for (const auto& m : methods)
          for (double l : lambdas)
            for (double a : alphas) cells.push_back({si, cfu::parse_method(m), l, a});

      std::vector<cfu::MetricsReport> results(cells.size());
      std::vector<std::string> errors(cells.size());
      std::atomic<std::size_t> next{0};
      auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
          try {
            auto c = base[cells[i].seed_index];
            c.unlearn.method = cells[i].method;
            c.unlearn.lambda = cells[i].lambda;
            c.eval.alpha = cells[i].alpha;
            results[i] = cfu::run_cell(prepared[cells[i].seed_index], c).report;
          } catch (const std::exception& e) {
            errors[i] = e.what();
          }
        }
      };
      {
        std::vector<std::jthread> pool;
        for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
        worker();
      }
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (!errors[i].empty()) throw cfu::TrainingError("sweep cell " + std::to_string(i) + ": " + errors[i]);
      }
      // Gap to the retrain cell of the same (seed, alpha), when present.
      for (std::size_t i = 0; i < cells.size(); ++i) {
        for (std::size_t j = 0; j < cells.size(); ++j) {
          if (cells[j].method == cfu::Method::kRetrain && cells[j].seed_index == cells[i].seed_index &&
              cells[j].alpha == cells[i].alpha && cells[j].lambda == lambdas.front()) {
            results[i].gap_to_retrain = cfu::gap_to_retrain(results[i], results[j]);
            break;
          }
        }
      }
      const auto raw = out_path(out_dir, "sweep_raw.csv");
      {
        auto o = cfu::text::open_out(raw);
        cfu::write_flat_header(o);
        for (const auto& r : results) cfu::write_flat_row(o, r);
      }
      const auto summary = out_path(out_dir, "sweep_summary.csv");
      {
        auto o = cfu::text::open_out(summary);
        o << "method,lambda,alpha,n_seeds";
        for (const auto& c : cfu::flat_columns()) o << ',' << c << "_mean," << c << "_std";
        o << '\n';
        for (const auto& m : methods)
          for (double l : lambdas)
            for (double a : alphas) {
              std::vector<const cfu::MetricsReport*> group;
              const auto method = cfu::parse_method(m);
              for (std::size_t i = 0; i < cells.size(); ++i) {
                if (cells[i].method == method && cells[i].lambda == l && cells[i].alpha == a) {
                  group.push_back(&results[i]);
                }
              }
              const auto stats = mean_std(group);
              o << cfu::to_string(method) << ',' << cfu::text::format_exact(l) << ',' << cfu::text::format_exact(a)
                << ',' << group.size();
              for (const auto& c : cfu::flat_columns()) {
                o << ',' << cfu::csv_value(stats.at(c).first) << ',' << cfu::csv_value(stats.at(c).second);
              }
              o << '\n';
            }
      }
      manifest.config()["sweep"] = {{"methods", methods}, {"lambdas", lambdas}, {"alphas", alphas},
                                    {"seeds", seeds},     {"jobs", jobs},       {"mia", !no_mia}};
      manifest.config()["dataset"] = dataset_spec_json(base.front().data);
      manifest.config()["train"] = train_json(base.front().train, base.front().hidden);
      manifest.output("raw", raw);
      manifest.output("summary", summary);
    } else if (sub == report) {
      std::vector<cfu::MetricsReport> reports;
      for (const auto& p : report_inputs) {
        require_file(p, "report");
        reports.push_back(cfu::load_report(p));
        manifest.input(p, p);
      }
      const auto csv = out_path(out_dir, "comparison.csv");
      const auto txt = out_path(out_dir, "comparison.txt");
      write_comparison(reports, csv, txt);
      std::ifstream in(txt);
      std::cout << in.rdbuf();
      manifest.output("csv", csv);
      manifest.output("text", txt);
    } else if (sub == pipeline) {
      const auto seeds = parse_list<std::uint64_t>(pipe_seeds, "--seeds");
      std::vector<cfu::MetricsReport> all;
      std::vector<std::string> all_paths;
      for (auto s : seeds) {
        const auto dir = (fs::path(out_dir) / ("seed_" + std::to_string(s))).string();
        const auto files = do_gen_data(pipe_data.resolve(s), dir);
        const auto original = out_path(dir, "original.ckpt");
        do_train(files.dataset, files.splits, pipe_train, s, original);
        std::string retrain_report;
        for (auto method : cfu::kAllMethods) {
          auto uo = pipe_unlearn;
          uo.method = std::string(cfu::to_string(method));
          const auto u = uo.resolve(s, pipe_train.cfg);
          const std::string stem = uo.method + "_lambda" + lambda_tag(u.lambda);
          const auto ckpt = out_path(dir, stem + ".ckpt");
          do_unlearn(files.dataset, files.splits, original, u, ckpt, out_path(dir, stem + "_epochs.csv"));
          const auto preds = out_path(dir, stem + "_predictions.csv");
          do_predict(files.dataset, files.splits, ckpt, "all", preds);
          auto ecfg = pipe_eval;
          ecfg.seed = s;
          auto r = do_eval(preds, files.splits, ecfg, "", "", uo.method, u.lambda);
          const auto rpath = out_path(dir, stem + "_report.json");
          cfu::save_report(r, rpath);
          do_mia(preds, files.splits, rpath, ecfg.alpha, s, out_path(dir, stem + "_attack.txt"), retrain_report);
          if (method == cfu::Method::kRetrain) {
            retrain_report = rpath;
          }
          // eval gap needs the MIA block on both sides; recompute once both exist.
          if (!retrain_report.empty() && method != cfu::Method::kRetrain) {
            auto full = cfu::load_report(rpath);
            full.gap_to_retrain = cfu::gap_to_retrain(full, cfu::load_report(retrain_report));
            cfu::save_report(full, rpath);
          }
          all.push_back(cfu::load_report(rpath));
          all_paths.push_back(rpath);
          manifest.output("report_seed" + std::to_string(s) + "_" + uo.method, rpath);
        }
        manifest.output("dataset_seed" + std::to_string(s), files.dataset);
        manifest.output("splits_seed" + std::to_string(s), files.splits);
      }
      write_comparison(all, out_path(out_dir, "comparison.csv"), out_path(out_dir, "comparison.txt"));
      manifest.config()["seeds"] = seeds;
      manifest.config()["dataset"] = dataset_spec_json(pipe_data.resolve(0));
      manifest.config()["train"] = train_json(pipe_train.cfg, pipe_train.hidden);
      manifest.config()["unlearn"] = unlearn_json(pipe_unlearn.resolve(0, pipe_train.cfg));
      manifest.config()["eval"] = {{"alpha", pipe_eval.alpha}, {"calib_size", pipe_eval.calib_size}};
      manifest.output("comparison", out_path(out_dir, "comparison.csv"));
    }
    manifest.write(out_dir);
  } catch (const cfu::Error& e) {
    std::cerr << "cfu: " << e.what() << '\n';
    return static_cast<int>(cfu::exit_code(e));
  } catch (const std::exception& e) {
    std::cerr << "cfu: " << e.what() << '\n';
    return static_cast<int>(cfu::ExitCode::kData);
  }
  return 0;
}
