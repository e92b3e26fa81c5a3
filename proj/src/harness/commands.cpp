#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>

#include "json.hpp"
#include "lne/harness.hpp"

namespace lne::harness {

namespace fs = std::filesystem;

ExitCode exit_code_for(const std::exception& e) {
  if (const auto* c = dynamic_cast<const CommandError*>(&e)) return c->code();
  if (dynamic_cast<const ConfigError*>(&e)) return kUsageError;
  if (dynamic_cast<const cohort::DatasetIoError*>(&e)) return kIoError;
  if (dynamic_cast<const model::CheckpointError*>(&e)) return kIoError;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return kIoError;
  return kVerificationFailure;
}

namespace {

fs::path or_default(const fs::path& p, const fs::path& fallback) { return p.empty() ? fallback : p; }

cohort::Cohort load_dataset(const ExperimentConfig& config) {
  const fs::path dir = config.paths.data;
  if (!fs::exists(dir / "manifest.json")) {
    throw CommandError(kIoError, "no dataset at " + dir.string() + " (run gen-data first)");
  }
  return cohort::load_cohort(dir);
}

cohort::Fold fold_of(const ExperimentConfig& config, const cohort::Cohort& cohort, std::size_t fold) {
  if (fold >= config.evaluation.folds) {
    throw CommandError(kUsageError, "fold " + std::to_string(fold) + " out of range (folds = " +
                                        std::to_string(config.evaluation.folds) + ")");
  }
  return cohort::split_folds(cohort, config.evaluation.folds, config.training_seed(),
                             config.evaluation.validation_fraction)[fold];
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CommandError(kIoError, "cannot write " + path.string());
  out << text;
  if (!out) throw CommandError(kIoError, "write failed for " + path.string());
}

model::Checkpoint load_ckpt(const fs::path& dir) {
  if (!fs::exists(dir / "ckpt.json")) throw CommandError(kIoError, "no checkpoint at " + dir.string());
  return model::load_checkpoint(dir);
}

}  // namespace

int cmd_gen_data(const ExperimentConfig& config, const GenDataOptions& options, std::ostream& out) {
  config.validate();
  const fs::path dir = or_default(options.out, config.paths.data);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!options.force) {
      throw CommandError(kIoError, "output directory " + dir.string() + " is not empty (use --force to overwrite)");
    }
    fs::remove_all(dir);
  }
  const auto cohort = cohort::generate_cohort(config.resolved_generator());
  cohort::save_cohort(cohort, dir);
  write_run_metadata(dir, config);
  const auto s = cohort::summarize(cohort);
  out << "dataset: " << dir.string() << "\n"
      << "subjects: " << s.subjects << "\n"
      << "visits: " << s.visits << "\n"
      << "pairs: " << s.pairs << "\n"
      << std::fixed << std::setprecision(3) << "mean visits per subject: " << s.mean_visits << "\n"
      << "mean visit interval (years): " << s.mean_interval << "\n"
      << "mean pair interval (years): " << s.mean_pair_interval << "\n";
  return kSuccess;
}

int cmd_train(const ExperimentConfig& config_in, const TrainCommandOptions& options, std::ostream& out) {
  ExperimentConfig config = config_in;
  try {
    config.training.method = training::method_from_string(options.method);
  } catch (const training::TrainingError& e) {
    throw CommandError(kUsageError, e.what());
  }
  if (options.lambda_dir) config.training.weights.lambda_dir = *options.lambda_dir;
  config.validate();
  const auto cohort = load_dataset(config);
  const auto fold = fold_of(config, cohort, options.fold);
  const fs::path dir = or_default(options.out, options.resume ? *options.resume
                                                               : fs::path(config.paths.output) / "train" /
                                                                     options.method / ("fold" + std::to_string(options.fold)));
  write_run_metadata(dir, config);
  training::TrainOptions topt;
  topt.out_dir = dir;
  topt.resume_from = options.resume;
  topt.stop_after = options.stop_after;
  topt.quiet = true;
  training::TrainResult result;
  try {
    result = training::train(cohort, fold, config.resolved_training(), config.architecture, topt);
  } catch (const training::DivergenceError& e) {
    out << "error: training diverged: " << e.what() << "\n";
    return kVerificationFailure;
  }
  out << "run: " << dir.string() << "\n";
  out << "epochs completed: " << result.epochs_completed << "\n";
  for (auto it = result.log.rbegin(); it != result.log.rend(); ++it) {
    if (it->split == "train") {
      out << std::setprecision(9) << "final train: " << training::metrics_row(*it) << "\n";
      break;
    }
  }
  if (!result.log.empty()) out << "final validation: " << training::metrics_row(result.log.back()) << "\n";
  return kSuccess;
}

int cmd_eval(const ExperimentConfig& config, const EvalCommandOptions& options, std::ostream& out) {
  config.validate();
  evalviz::Task task;
  evalviz::HeadMode mode;
  model::FeatureMode features;
  try {
    task = evalviz::task_from_string(options.task);
    mode = evalviz::head_mode_from_string(options.mode);
    features = options.features ? evalviz::feature_mode_from_string(*options.features)
                                : (task == evalviz::Task::Age ? model::FeatureMode::ZOnly
                                                               : model::FeatureMode::ZConcatDz);
  } catch (const evalviz::EvalError& e) {
    throw CommandError(kUsageError, e.what());
  }
  auto ck = load_ckpt(options.checkpoint);
  const auto cohort = load_dataset(config);
  const auto fold = fold_of(config, cohort, options.fold);
  const auto head = config.head_config();
  evalviz::HeadResult r;
  std::size_t dim = 0;
  if (mode == evalviz::HeadMode::Frozen) {
    const auto train = evalviz::extract_features(ck.params, ck.arch, cohort, fold.train, features);
    const auto val = evalviz::extract_features(ck.params, ck.arch, cohort, fold.validation, features);
    const auto test = evalviz::extract_features(ck.params, ck.arch, cohort, fold.test, features);
    dim = train.dim();
    r = evalviz::fit_head_frozen(train, val, test, task, head);
  } else {
    auto ft = evalviz::fine_tune(ck.params, ck.arch, cohort, fold, task, features, head);
    dim = ft.result.head.config.input_dim;
    r = ft.result;
  }
  const auto record = evalviz::make_record(task, options.label, mode, options.fold, r.test);
  const fs::path dir = or_default(options.out, fs::path(config.paths.output) / "eval");
  write_run_metadata(dir, config);
  write_text(dir / "metrics.csv", evalviz::metrics_csv_header() + "\n" + evalviz::metrics_csv_row(record) + "\n");
  out << "features: " << evalviz::to_string(features) << " (dim " << dim << ")\n";
  out << "samples: train " << r.train.n << ", validation " << r.validation.n << ", test " << r.test.n << "\n";
  out << evalviz::metrics_csv_header() << "\n" << evalviz::metrics_csv_row(record) << "\n";
  return kSuccess;
}

namespace {

/// |dot| between the power-iteration components and a dense eigensolver.
std::array<double, 2> pca_oracle_agreement(const evalviz::Matrix& points, const evalviz::Pca2& pca) {
  const auto m = static_cast<Eigen::Index>(points.rows), d = static_cast<Eigen::Index>(points.cols);
  Eigen::MatrixXd x(m, d);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = points(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  }
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(m - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  std::array<double, 2> agreement{};
  for (int c = 0; c < 2; ++c) {
    const Eigen::VectorXd ref = solver.eigenvectors().col(d - 1 - c);
    double dot = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) dot += ref(j) * pca.components[c][static_cast<std::size_t>(j)];
    agreement[c] = std::abs(dot);
  }
  return agreement;
}

}  // namespace

int cmd_plot(const ExperimentConfig& config, const PlotCommandOptions& options, std::ostream& out) {
  config.validate();
  if (options.color != "age" && options.color != "group") {
    throw CommandError(kUsageError, "--color must be age or group");
  }
  auto ck = load_ckpt(options.checkpoint);
  const auto cohort = load_dataset(config);
  const auto pairs = cohort::build_pairs(cohort);
  if (pairs.size() < 2) throw CommandError(kUsageError, "dataset holds fewer than two pairs");
  evalviz::EncodedPairs enc;
  try {
    enc = evalviz::encode_pairs(ck.params, ck.arch, pairs);
  } catch (const evalviz::EvalError& e) {
    throw CommandError(kUsageError, std::string("checkpoint does not match the dataset: ") + e.what());
  }
  const std::size_t n = pairs.size(), d = enc.z_t.cols;
  evalviz::Matrix both(2 * n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      both(i, k) = enc.z_t(i, k);
      both(n + i, k) = enc.z_s(i, k);
    }
  }
  const auto pca = evalviz::pca_2d(both);
  evalviz::TrajectoryFieldPlot plot;
  std::vector<double> xs, ys;
  const auto names = evalviz::class_names(cohort);
  const bool by_group = options.color == "group";
  if (by_group && names.empty()) throw CommandError(kUsageError, "--color group needs a labelled dataset");
  if (by_group) {
    plot.categories = names;
    plot.key_label = "group";
  }
  for (std::size_t i = 0; i < n; ++i) {
    plot.start.push_back({pca.projection(i, 0), pca.projection(i, 1)});
    plot.end.push_back({pca.projection(n + i, 0), pca.projection(n + i, 1)});
    xs.push_back(pca.projection(i, 0));
    ys.push_back(pca.projection(i, 1));
    if (by_group) {
      const auto g = cohort::to_string(enc.groups[i]);
      plot.color_key.push_back(static_cast<double>(std::find(names.begin(), names.end(), g) - names.begin()));
    } else {
      plot.color_key.push_back(enc.age_t[i]);
    }
  }
  plot.curve = evalviz::robust_quadratic_fit(xs, ys);
  const fs::path dir = or_default(options.out, fs::path(config.paths.output) / "plot");
  write_run_metadata(dir, config);
  evalviz::export_field_plot(plot, dir / "field.svg", dir / "field.csv");

  const auto agreement = pca_oracle_agreement(both, pca);
  nlohmann::json curve{{"a", plot.curve.a},
                       {"b", plot.curve.b},
                       {"c", plot.curve.c},
                       {"iterations", plot.curve.iterations},
                       {"converged", plot.curve.converged},
                       {"eigenvalues", {pca.eigenvalues[0], pca.eigenvalues[1]}},
                       {"oracle_abs_dot", {agreement[0], agreement[1]}}};
  write_text(dir / "curve.json", curve.dump(2) + "\n");

  std::optional<evalviz::GroupNormStats> group_stats;
  if (!names.empty()) {
    std::vector<std::string> labels;
    for (auto g : enc.groups) labels.push_back(cohort::to_string(g));
    try {
      group_stats = evalviz::group_norm_stats(enc.dz, labels);
    } catch (const evalviz::EvalError& e) {
      out << "warning: group statistics skipped: " << e.what() << "\n";
    }
  }
  if (group_stats) {
    const auto& stats = *group_stats;
    std::string csv = "group_a,group_b,n_a,n_b,mean_norm_a,mean_norm_b,t,df,p\n";
    auto find = [&](const std::string& g) {
      return *std::find_if(stats.groups.begin(), stats.groups.end(), [&](const auto& x) { return x.group == g; });
    };
    for (const auto& c : stats.comparisons) {
      const auto ga = find(c.a), gb = find(c.b);
      char buf[512];
      std::snprintf(buf, sizeof buf, "%s,%s,%zu,%zu,%.10g,%.10g,%.10g,%.10g,%.10g\n", c.a.c_str(), c.b.c_str(), ga.n,
                    gb.n, ga.mean_norm, gb.mean_norm, c.test.t, c.test.df, c.test.p);
      csv += buf;
    }
    write_text(dir / "groups.csv", csv);
    for (const auto& g : stats.groups) {
      out << "group " << g.group << ": n=" << g.n << " mean |dz|=" << g.mean_norm << "\n";
    }
  }
  out << "arrows: " << n << "\n";
  out << std::setprecision(10) << "curve: y = " << plot.curve.a << " + " << plot.curve.b << " x + " << plot.curve.c
      << " x^2\n";
  out << "pca oracle |dot|: " << agreement[0] << ", " << agreement[1] << "\n";
  if (!(agreement[0] > 0.999 && agreement[1] > 0.999)) {
    out << "error: principal components disagree with the dense eigensolver\n";
    return kVerificationFailure;
  }
  return kSuccess;
}

int cmd_gradcheck(const GradcheckOptions& options, std::ostream& out) {
  if (options.corrupt) {
    const auto names = gradcheck_names();
    if (std::find(names.begin(), names.end(), *options.corrupt) == names.end()) {
      throw CommandError(kUsageError, "unknown check '" + *options.corrupt + "'");
    }
  }
  const auto entries = run_gradcheck_suite(options.seeds, options.corrupt);
  bool ok = true;
  out << std::left << std::setw(26) << "check" << std::setw(16) << "max_rel_error" << std::setw(10) << "tolerance"
      << "result\n";
  for (const auto& e : entries) {
    char err[32], tol[32];
    std::snprintf(err, sizeof err, "%.3e", e.max_rel_error);
    std::snprintf(tol, sizeof tol, "%.0e", e.tolerance);
    out << std::left << std::setw(26) << e.name << std::setw(16) << err << std::setw(10) << tol
        << (e.passed ? "PASS" : "FAIL") << "\n";
    ok = ok && e.passed;
  }
  out << (ok ? "all gradient checks passed" : "gradient check FAILED") << "\n";
  return ok ? kSuccess : kVerificationFailure;
}

int cmd_cv(const ExperimentConfig& config, const CvCommandOptions& options, std::ostream& out) {
  config.validate();
  const auto cohort = load_dataset(config);
  const fs::path dir = or_default(options.out, fs::path(config.paths.output) / "cv");
  write_run_metadata(dir, config);
  auto cv = config.cv_config();
  cv.work_dir = dir / "models";
  const auto result = evalviz::cross_validate(cohort, cv);
  std::string csv = evalviz::metrics_csv_header() + "\n";
  for (const auto& r : result.records) csv += evalviz::metrics_csv_row(r) + "\n";
  write_text(dir / "metrics.csv", csv);
  std::string summary = "task,method,mode,metric,mean,sd,n\n";
  for (const auto& a : evalviz::aggregate(result.records)) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%s,%.17g,%.17g,%zu\n", a.task.c_str(), a.method.c_str(), a.mode.c_str(),
                  a.metric.c_str(), a.mean, a.sd, a.n);
    summary += buf;
  }
  write_text(dir / "summary.csv", summary);
  out << summary;
  return kSuccess;
}

}  // namespace lne::harness
