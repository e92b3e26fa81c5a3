#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lne/autodiff/ops.hpp"
#include "lne/cohort.hpp"
#include "lne/graph.hpp"
#include "lne/model.hpp"

namespace lne::training {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a loss or gradient stops being finite.
class DivergenceError : public TrainingError {
 public:
  using TrainingError::TrainingError;
};

enum class Method { LNE, AE, LSSL };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct LossWeights {
  double lambda_recon = 2.0;
  double lambda_dir = 1.0;
  double cosine_eps = 1e-8;

  void validate() const;
};

struct AdamConfig {
  double lr = 5e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  std::size_t n_nb = 5;
  AdamConfig adam;
  LossWeights weights;
  bool detach_dh = true;
  bool augment = true;
  Method method = Method::LNE;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Name of the learnable global direction used by the LSSL objective.
inline constexpr const char* kTauName = "lssl.tau";

template <typename T>
struct OptimizerState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<T>> first_moment;
  std::map<std::string, std::vector<T>> second_moment;
};

/// Whether weight decay applies to a parameter (batchnorm affine terms are exempt).
bool decays(const std::string& name);

/// One Adam update with bias correction. Weight decay enters as wd * theta
/// added to the gradient before the moment update. Parameters without a
/// gradient are left untouched.
template <typename T>
void adam_step(model::ModelParams<T>& params, OptimizerState<T>& state, const AdamConfig& config);

template <typename T>
struct LossBreakdown {
  ad::Tensor<T> total;
  double recon = 0.0;         // lambda_recon * (mse_t + mse_s)
  double cosine_term = 0.0;   // -lambda_dir * mean cos
  double cosine_mean = 0.0;   // mean cos of the objective's direction pair
};

template <typename T>
LossBreakdown<T> lne_loss(ad::Tape<T>& tape, const ad::Tensor<T>& x_t, const ad::Tensor<T>& x_s,
                          const ad::Tensor<T>& recon_t, const ad::Tensor<T>& recon_s, const ad::Tensor<T>& dz,
                          const ad::Tensor<T>& dh, const LossWeights& weights);

template <typename T>
LossBreakdown<T> ae_loss(ad::Tape<T>& tape, const ad::Tensor<T>& x_t, const ad::Tensor<T>& x_s,
                         const ad::Tensor<T>& recon_t, const ad::Tensor<T>& recon_s, const LossWeights& weights);

template <typename T>
LossBreakdown<T> lssl_loss(ad::Tape<T>& tape, const ad::Tensor<T>& x_t, const ad::Tensor<T>& x_s,
                           const ad::Tensor<T>& recon_t, const ad::Tensor<T>& recon_s, const ad::Tensor<T>& dz,
                           const ad::Tensor<T>& tau, const LossWeights& weights);

/// Pools dz over the batch graph on the tape: dh = D^{-1} A dz. With
/// detach, dz enters as a constant and dh carries no gradient.
template <typename T>
ad::Tensor<T> pool_on_tape(ad::Tape<T>& tape, const graph::NeighborhoodGraph& g, const ad::Tensor<T>& dz,
                           bool detach);

template <typename T>
struct BatchResult {
  LossBreakdown<T> loss;
  /// Mean cos(dz, dh) over the batch graph, computed for every method.
  double graph_cosine = 0.0;
  ad::Tensor<T> z_t;
  ad::Tensor<T> dz;
};

/// Encodes x_t and x_s in one concatenated batch, decodes, builds the graph
/// on z_t and evaluates the configured objective.
template <typename T>
BatchResult<T> batch_objective(ad::Tape<T>& tape, model::ModelParams<T>& params, const model::Architecture& arch,
                               const ad::Tensor<T>& x_t, const ad::Tensor<T>& x_s, std::span<const T> delta_t,
                               const TrainConfig& config, model::Mode mode);

/// Stacks pair images into [B,1,H,W] tensors.
struct PairBatch {
  ad::TensorF x_t;
  ad::TensorF x_s;
  std::vector<float> delta_t;
};
PairBatch make_batch(const std::vector<const cohort::ImagePair*>& pairs);

/// Initial parameter set for a method (the LSSL direction is added for LSSL).
model::ModelParamsF init_training_params(const model::Architecture& arch, const TrainConfig& config);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double total_loss = 0.0;
  double recon_loss = 0.0;
  double cosine_mean = 0.0;  // NaN when no batch had >= 2 pairs
  double wall_time = 0.0;
};

std::string metrics_header();
std::string metrics_row(const EpochMetrics& m);

struct TrainOptions {
  /// Receives `best/`, `final/`, `last/` checkpoints and `metrics.csv`.
  std::optional<std::filesystem::path> out_dir;
  /// Continue from an end-of-epoch checkpoint written by an earlier run.
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many epochs in total (simulates an interruption).
  std::optional<std::size_t> stop_after;
  std::function<void(const EpochMetrics&)> on_epoch;
  /// Called with the parameters at the end of every epoch.
  std::function<void(std::size_t, const model::ModelParamsF&)> on_params;
  bool quiet = true;
};

struct TrainResult {
  model::ModelParamsF params;
  model::ModelParamsF best_params;
  OptimizerState<float> optimizer;
  std::vector<EpochMetrics> log;
  std::size_t epochs_completed = 0;
  double best_validation = 0.0;
};

TrainResult train(const cohort::Cohort& cohort, const cohort::Fold& fold, const TrainConfig& config,
                  const model::Architecture& arch, const TrainOptions& options = {});

model::OptimizerSnapshot to_snapshot(const OptimizerState<float>& state);
OptimizerState<float> from_snapshot(const model::OptimizerSnapshot& snapshot);

}  // namespace lne::training
