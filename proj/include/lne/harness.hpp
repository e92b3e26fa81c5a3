#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lne/cohort.hpp"
#include "lne/evalviz.hpp"
#include "lne/model.hpp"
#include "lne/training.hpp"

namespace lne::harness {

enum ExitCode : int { kSuccess = 0, kVerificationFailure = 1, kUsageError = 2, kIoError = 3 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure carrying the process exit code it maps to.
class CommandError : public std::runtime_error {
 public:
  CommandError(ExitCode code, const std::string& message) : std::runtime_error(message), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Maps an exception escaping a command to an exit code.
ExitCode exit_code_for(const std::exception& e);

struct EvaluationConfig {
  std::size_t folds = 5;
  double validation_fraction = 0.1;
  std::size_t head_epochs = 100;
  std::size_t finetune_epochs = 20;
  std::size_t head_batch_size = 64;
  double head_lr = 5e-4;
  double head_weight_decay = 1e-5;
  std::vector<std::string> methods{"lne", "ae"};
  std::vector<std::string> tasks{"age"};
  std::vector<std::string> modes{"frozen", "finetune"};
  std::string group_features = "z+dz";
  bool include_no_pretrain = false;
};

struct PathsConfig {
  std::string data = "data";
  std::string output = "runs";
};

/// Everything one experiment needs. One global seed fans out to the
/// generator, training and head streams.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  cohort::GeneratorConfig generator;
  model::Architecture architecture;
  training::TrainConfig training;
  EvaluationConfig evaluation;
  PathsConfig paths;

  std::uint64_t generator_seed() const;
  std::uint64_t training_seed() const;
  std::uint64_t head_seed() const;

  /// Generator/training configs with the derived seeds filled in.
  cohort::GeneratorConfig resolved_generator() const;
  training::TrainConfig resolved_training() const;
  evalviz::HeadTrainConfig head_config() const;
  evalviz::CvConfig cv_config() const;

  void validate() const;
};

/// Parses a JSON document; unknown keys anywhere are rejected, absent keys
/// keep their defaults.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string to_json(const ExperimentConfig& config);

/// Version string baked in at build time (git describe when available).
std::string version();

/// Writes config.resolved.json and VERSION into `dir`.
void write_run_metadata(const std::filesystem::path& dir, const ExperimentConfig& config);

// Commands ------------------------------------------------------------------

struct GenDataOptions {
  std::filesystem::path out;
  bool force = false;
};
int cmd_gen_data(const ExperimentConfig& config, const GenDataOptions& options, std::ostream& out);

struct TrainCommandOptions {
  std::string method = "lne";
  std::size_t fold = 0;
  std::optional<double> lambda_dir;
  std::optional<std::filesystem::path> resume;
  std::optional<std::size_t> stop_after;
  std::filesystem::path out;
};
int cmd_train(const ExperimentConfig& config, const TrainCommandOptions& options, std::ostream& out);

struct EvalCommandOptions {
  std::filesystem::path checkpoint;
  std::string task = "age";
  std::string mode = "frozen";
  std::optional<std::string> features;
  std::size_t fold = 0;
  std::string label = "checkpoint";
  std::filesystem::path out;
};
int cmd_eval(const ExperimentConfig& config, const EvalCommandOptions& options, std::ostream& out);

struct PlotCommandOptions {
  std::filesystem::path checkpoint;
  std::string color = "age";  // age | group
  std::filesystem::path out;
};
int cmd_plot(const ExperimentConfig& config, const PlotCommandOptions& options, std::ostream& out);

struct GradcheckOptions {
  std::size_t seeds = 20;
  std::optional<std::string> corrupt;  // check name whose backward is deliberately broken
};
int cmd_gradcheck(const GradcheckOptions& options, std::ostream& out);

struct CvCommandOptions {
  std::filesystem::path out;
};
int cmd_cv(const ExperimentConfig& config, const CvCommandOptions& options, std::ostream& out);

// Gradient-check suite --------------------------------------------------------

struct GradcheckEntry {
  std::string name;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::size_t seeds = 0;
  std::size_t coordinates = 0;
  bool passed = false;
};

std::vector<std::string> gradcheck_names();
/// Runs every check over `seeds` seeds. `corrupt` names one check whose
/// function gets a backward rule scaled by 1.5.
std::vector<GradcheckEntry> run_gradcheck_suite(std::size_t seeds, const std::optional<std::string>& corrupt = {});

}  // namespace lne::harness
