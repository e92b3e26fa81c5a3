#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lne/cohort.hpp"
#include "lne/graph.hpp"
#include "lne/model.hpp"
#include "lne/training.hpp"

namespace lne::evalviz {

using graph::Matrix;

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task { Age, Group };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

enum class HeadMode { Frozen, Finetune };
std::string to_string(HeadMode m);
HeadMode head_mode_from_string(const std::string& s);

std::string to_string(model::FeatureMode m);
model::FeatureMode feature_mode_from_string(const std::string& s);

struct FeatureSet {
  model::FeatureMode mode = model::FeatureMode::ZOnly;
  Matrix features;
  std::vector<double> ages;      // age at the (first) image
  std::vector<int> labels;       // class index into class_names, -1 when unlabeled
  std::vector<std::string> subject_ids;
  std::vector<std::string> class_names;

  std::size_t size() const { return features.rows; }
  std::size_t dim() const { return features.cols; }
};

/// Latents of a list of pairs in eval mode.
struct EncodedPairs {
  Matrix z_t;
  Matrix z_s;
  Matrix dz;
  std::vector<double> age_t;
  std::vector<cohort::Group> groups;
  std::vector<std::string> subject_ids;
};

/// Eval-mode encoding of images in fixed-size chunks.
Matrix encode_images(model::ModelParamsF& params, const model::Architecture& arch,
                     const std::vector<const cohort::Image*>& images, std::size_t chunk = 64);

EncodedPairs encode_pairs(model::ModelParamsF& params, const model::Architecture& arch,
                          const std::vector<cohort::ImagePair>& pairs);

/// Class names of a labelled cohort in group order; the group task needs
/// exactly two.
std::vector<std::string> class_names(const cohort::Cohort& cohort);

/// ZOnly: one sample per image of the listed subjects. ZConcatDz: one
/// sample [z_t, dz] per pair.
FeatureSet extract_features(model::ModelParamsF& params, const model::Architecture& arch, const cohort::Cohort& cohort,
                            const std::vector<std::string>& subjects, model::FeatureMode mode);

// Metrics ------------------------------------------------------------------

double r2(std::span<const double> predictions, std::span<const double> targets);
double rmse(std::span<const double> predictions, std::span<const double> targets);
double bacc(std::span<const int> predicted, std::span<const int> truth);
/// Inverse class frequencies normalized to sum to one.
std::vector<double> class_weights(std::span<const int> labels, std::size_t num_classes);

struct Scores {
  double r2 = 0.0;
  double rmse = 0.0;
  double bacc = 0.0;
  std::size_t n = 0;
};

// Heads --------------------------------------------------------------------

struct HeadTrainConfig {
  std::size_t epochs = 100;
  std::size_t finetune_epochs = 20;
  std::size_t batch_size = 64;
  training::AdamConfig adam;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Column standardization fitted on training features.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> inv_sd;

  static Standardizer fit(const Matrix& x);
  Matrix apply(const Matrix& x) const;
};

struct HeadModel {
  Task task = Task::Age;
  model::HeadConfig config;
  model::ModelParamsF params;
  Standardizer features;
  double target_mean = 0.0;
  double target_sd = 1.0;
  std::size_t num_classes = 1;
};

struct HeadResult {
  HeadModel head;
  Scores train;
  Scores validation;
  Scores test;
  std::size_t best_epoch = 0;
};

/// Regression predictions (ages) or arg-max class indices as doubles.
std::vector<double> predict(const HeadModel& head, const Matrix& features);
Scores score(const HeadModel& head, const FeatureSet& set);

/// Trains the head only, on fixed features; keeps the epoch with the best
/// validation metric (R2 for age, BACC for group; epoch 0 is the init).
HeadResult fit_head_frozen(const FeatureSet& train, const FeatureSet& validation, const FeatureSet& test, Task task,
                           const HeadTrainConfig& config);

struct FinetuneResult {
  HeadResult result;
  model::ModelParamsF encoder;
};

/// Starts from the frozen head fitted on `encoder` features and trains
/// encoder and head jointly; selection by validation metric as above.
FinetuneResult fine_tune(const model::ModelParamsF& encoder, const model::Architecture& arch,
                         const cohort::Cohort& cohort, const cohort::Fold& fold, Task task, model::FeatureMode mode,
                         const HeadTrainConfig& config);

// Projection, curve, statistics ------------------------------------------------

struct Pca2 {
  std::array<std::vector<double>, 2> components;
  std::array<double, 2> eigenvalues{};
  std::vector<double> mean;
  Matrix projection;  // [M,2]

  std::array<double, 2> project(std::span<const double> point) const;
};

inline constexpr double kPcaTolerance = 1e-9;
inline constexpr std::size_t kPcaMaxIterations = 1000;

/// Top-2 covariance eigenvectors by power iteration with deflation.
Pca2 pca_2d(const Matrix& points);

struct QuadraticFit {
  double a = 0.0, b = 0.0, c = 0.0;
  std::size_t iterations = 0;
  bool converged = false;

  double operator()(double x) const { return a + b * x + c * x * x; }
};

/// Ordinary least squares y = a + b x + c x^2.
QuadraticFit least_squares_quadratic(std::span<const double> x, std::span<const double> y,
                                     std::span<const double> weights = {});
/// Huber IRLS (delta 1.345 on MAD-scaled residuals).
QuadraticFit robust_quadratic_fit(std::span<const double> x, std::span<const double> y);

struct WelchTest {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};
/// Two-sided Welch test with a normal approximation; needs df > 30.
WelchTest welch_test(std::span<const double> a, std::span<const double> b);

struct GroupNorm {
  std::string group;
  std::size_t n = 0;
  double mean_norm = 0.0;
  double sd_norm = 0.0;
};
struct GroupComparison {
  std::string a;
  std::string b;
  WelchTest test;
};
struct GroupNormStats {
  std::vector<GroupNorm> groups;
  std::vector<GroupComparison> comparisons;  // every unordered group pair
};

GroupNormStats group_norm_stats(const Matrix& dz, const std::vector<std::string>& group_labels);

// Plot -----------------------------------------------------------------------

struct TrajectoryFieldPlot {
  std::vector<std::array<double, 2>> start;
  std::vector<std::array<double, 2>> end;
  std::vector<double> color_key;              // age, or category index
  std::vector<std::string> categories;        // empty for a continuous key
  QuadraticFit curve;
  std::string key_label = "age";

  void validate() const;
};

/// Writes <stem>.svg and <stem>.csv (x_t,y_t,x_s,y_s,color_key).
void export_field_plot(const TrajectoryFieldPlot& plot, const std::filesystem::path& svg_path,
                       const std::filesystem::path& csv_path);

/// Formatting shared by the table and the vector graphics.
std::string format_coordinate(double v);
std::array<unsigned char, 3> viridis(double t);

// Cross-validation -----------------------------------------------------------

struct MetricsRecord {
  std::string task;
  std::string method;
  std::string mode;
  std::size_t fold = 0;
  std::optional<double> r2;
  std::optional<double> rmse;
  std::optional<double> bacc;
  std::size_t n_samples = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text);

MetricsRecord make_record(Task task, const std::string& method, HeadMode mode, std::size_t fold, const Scores& s);

struct Aggregate {
  std::string task, method, mode, metric;
  double mean = 0.0;
  double sd = 0.0;
  std::size_t n = 0;
};
/// Mean and sample standard deviation per (task, method, mode, metric).
std::vector<Aggregate> aggregate(const std::vector<MetricsRecord>& records);

struct CvConfig {
  std::size_t folds = 5;
  double validation_fraction = 0.1;
  std::vector<training::Method> methods{training::Method::LNE, training::Method::AE};
  std::vector<Task> tasks{Task::Age};
  std::vector<HeadMode> modes{HeadMode::Frozen, HeadMode::Finetune};
  std::optional<model::FeatureMode> group_features;  // default z+dz
  training::TrainConfig train;
  HeadTrainConfig head;
  model::Architecture arch;
  /// Per-fold training output goes to <work_dir>/<method>/fold<k>.
  std::optional<std::filesystem::path> work_dir;
  /// Load <work_dir>/<method>/fold<k>/final instead of training when present.
  bool reuse_checkpoints = false;
  bool include_no_pretrain = false;
  bool quiet = true;
};

struct CvResult {
  std::vector<MetricsRecord> records;
  std::vector<cohort::Fold> folds;
};

CvResult cross_validate(const cohort::Cohort& cohort, const CvConfig& config);

}  // namespace lne::evalviz
