#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>

#include "lne/seed.hpp"
#include "lne/training.hpp"

namespace lne::training {

namespace fs = std::filesystem;

PairBatch make_batch(const std::vector<const cohort::ImagePair*>& pairs) {
  if (pairs.empty()) throw TrainingError("make_batch: empty batch");
  const std::size_t h = pairs.front()->x_t.height, w = pairs.front()->x_t.width, hw = h * w;
  std::vector<float> xt(pairs.size() * hw), xs(pairs.size() * hw);
  PairBatch b{ad::TensorF::zeros({1}), ad::TensorF::zeros({1}), {}};
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = *pairs[i];
    if (p.x_t.height != h || p.x_t.width != w || p.x_s.height != h || p.x_s.width != w) {
      throw TrainingError("make_batch: images of one batch must share a size");
    }
    std::copy(p.x_t.pixels.begin(), p.x_t.pixels.end(), xt.begin() + static_cast<std::ptrdiff_t>(i * hw));
    std::copy(p.x_s.pixels.begin(), p.x_s.pixels.end(), xs.begin() + static_cast<std::ptrdiff_t>(i * hw));
    b.delta_t.push_back(static_cast<float>(p.delta_t));
  }
  b.x_t = ad::TensorF({pairs.size(), 1, h, w}, std::move(xt));
  b.x_s = ad::TensorF({pairs.size(), 1, h, w}, std::move(xs));
  return b;
}

model::ModelParamsF init_training_params(const model::Architecture& arch, const TrainConfig& config) {
  auto params = model::init_params<float>(arch, derive_seed(config.seed, "init"));
  if (config.method == Method::LSSL) {
    Rng rng = make_rng(config.seed, "tau");
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<float> tau(arch.latent_dim());
    for (auto& t : tau) t = static_cast<float>(normal(rng) / std::sqrt(static_cast<double>(tau.size())));
    const std::size_t d = tau.size();
    params.add(kTauName, ad::TensorF({d}, std::move(tau), true));
  }
  return params;
}

std::string metrics_header() { return "epoch,split,total_loss,recon_loss,cosine_mean,wall_time"; }

std::string metrics_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g,%.3f", m.epoch, m.split.c_str(), m.total_loss, m.recon_loss,
                m.cosine_mean, m.wall_time);
  return buf;
}

model::OptimizerSnapshot to_snapshot(const OptimizerState<float>& state) {
  return {state.step, state.first_moment, state.second_moment};
}

OptimizerState<float> from_snapshot(const model::OptimizerSnapshot& snapshot) {
  return {snapshot.step, snapshot.first_moment, snapshot.second_moment};
}

namespace {

struct Accumulator {
  double total = 0.0, recon = 0.0, cosine = 0.0;
  std::size_t n = 0, n_cosine = 0;

  void add(double t, double r, double c, std::size_t count, bool has_cosine) {
    total += t * static_cast<double>(count);
    recon += r * static_cast<double>(count);
    n += count;
    if (has_cosine) {
      cosine += c * static_cast<double>(count);
      n_cosine += count;
    }
  }

  EpochMetrics finish(std::size_t epoch, const std::string& split, double wall) const {
    EpochMetrics m;
    m.epoch = epoch;
    m.split = split;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    m.total_loss = n ? total / static_cast<double>(n) : nan;
    m.recon_loss = n ? recon / static_cast<double>(n) : nan;
    m.cosine_mean = n_cosine ? cosine / static_cast<double>(n_cosine) : nan;
    m.wall_time = wall;
    return m;
  }
};

std::uint64_t augment_index(std::size_t epoch, std::size_t position) {
  return (static_cast<std::uint64_t>(epoch) << 32) | static_cast<std::uint64_t>(position);
}

void ensure_finite(double value, const char* what, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(value)) {
    throw DivergenceError(std::string(what) + " became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                          std::to_string(batch));
  }
}

/// Validation pass in eval mode with near-equal batches so that no batch
/// holds a single pair unless the split has only one.
Accumulator evaluate(model::ModelParamsF& params, const model::Architecture& arch,
                     const std::vector<cohort::ImagePair>& pairs, const TrainConfig& config) {
  Accumulator acc;
  if (pairs.empty()) return acc;
  const std::size_t n = pairs.size();
  const std::size_t n_batches = (n + config.batch_size - 1) / config.batch_size;
  std::size_t begin = 0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    const std::size_t end = begin + (n - begin) / (n_batches - b);
    std::vector<const cohort::ImagePair*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&pairs[i]);
    const auto data = make_batch(batch);
    ad::Tape<float> tape(false);
    if (batch.size() >= 2) {
      const auto r = batch_objective(tape, params, arch, data.x_t, data.x_s, std::span<const float>(data.delta_t),
                                     config, model::Mode::Eval);
      acc.add(r.loss.total.item(), r.loss.recon, r.graph_cosine, batch.size(), true);
    } else {
      const auto x = ad::concat_rows(tape, data.x_t, data.x_s);
      const auto recon = model::decode(tape, params, arch, model::encode(tape, params, arch, x, model::Mode::Eval),
                                       model::Mode::Eval);
      const auto l = ae_loss(tape, data.x_t, data.x_s, ad::slice_rows(tape, recon, 0, 1),
                             ad::slice_rows(tape, recon, 1, 2), config.weights);
      acc.add(l.total.item(), l.recon, 0.0, 1, false);
    }
    begin = end;
  }
  return acc;
}

void save(const fs::path& dir, const model::Architecture& arch, const model::ModelParamsF& params,
          const OptimizerState<float>* opt, std::size_t epoch, const std::map<std::string, double>& scalars) {
  model::Checkpoint ck{arch, params, std::nullopt, epoch, scalars};
  if (opt) ck.optimizer = to_snapshot(*opt);
  model::save_checkpoint(dir, ck);
}

}  // namespace

TrainResult train(const cohort::Cohort& cohort, const cohort::Fold& fold, const TrainConfig& config,
                  const model::Architecture& arch, const TrainOptions& options) {
  config.validate();
  arch.validate();
  if (cohort.config.image_size != arch.input_size) {
    throw TrainingError("cohort image size " + std::to_string(cohort.config.image_size) +
                        " does not match the architecture input size " + std::to_string(arch.input_size));
  }
  const auto train_pairs = cohort::build_pairs(cohort, fold.train);
  const auto val_pairs = cohort::build_pairs(cohort, fold.validation);
  if (train_pairs.size() < 2) throw TrainingError("training split holds fewer than two pairs");

  TrainResult result;
  result.params = init_training_params(arch, config);
  std::size_t first_epoch = 1;
  double best = std::numeric_limits<double>::infinity();
  const std::map<std::string, double> identity{{"seed", static_cast<double>(config.seed)},
                                               {"method", static_cast<double>(config.method)}};

  if (options.resume_from) {
    const auto ck = model::load_checkpoint(*options.resume_from / "last");
    for (const auto& [key, value] : identity) {
      auto it = ck.scalars.find(key);
      if (it == ck.scalars.end() || it->second != value) {
        throw TrainingError("checkpoint in " + options.resume_from->string() + " was written with a different " + key);
      }
    }
    model::load_params_into(*options.resume_from / "last", result.params);
    if (!ck.optimizer) throw TrainingError("resume checkpoint lacks optimizer state");
    result.optimizer = from_snapshot(*ck.optimizer);
    first_epoch = ck.epoch + 1;
    best = ck.scalars.at("best_validation");
    result.best_params = result.params.clone();
    if (fs::exists(*options.resume_from / "best" / "ckpt.json")) {
      model::load_params_into(*options.resume_from / "best", result.best_params);
    }
    result.epochs_completed = ck.epoch;
  } else {
    result.best_params = result.params.clone();
  }

  std::ofstream log;
  if (options.out_dir) {
    fs::create_directories(*options.out_dir);
    const auto path = *options.out_dir / "metrics.csv";
    const bool append = options.resume_from && fs::exists(path);
    log.open(path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw TrainingError("cannot write " + path.string());
    if (!append) log << metrics_header() << "\n";
  }

  const std::size_t last_epoch = std::min(config.epochs, options.stop_after.value_or(config.epochs));
  std::vector<std::size_t> order(train_pairs.size());
  for (std::size_t epoch = first_epoch; epoch <= last_epoch; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = make_rng(config.seed, "shuffle", epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    Accumulator train_acc;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      if (end - begin < 2) break;
      std::vector<cohort::ImagePair> augmented;
      std::vector<const cohort::ImagePair*> batch;
      augmented.reserve(end - begin);
      for (std::size_t pos = begin; pos < end; ++pos) {
        const auto& pair = train_pairs[order[pos]];
        if (config.augment) {
          augmented.push_back(
              cohort::augment_pair(pair, derive_seed(config.seed, "augment", augment_index(epoch, pos))));
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&pair);
        }
      }
      const auto data = make_batch(batch);
      result.params.zero_grad();
      ad::Tape<float> tape;
      BatchResult<float> r;
      try {
        r = batch_objective(tape, result.params, arch, data.x_t, data.x_s, std::span<const float>(data.delta_t), config,
                            model::Mode::Train);
      } catch (const ad::NonFiniteError& e) {
        throw DivergenceError("non-finite value at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_index) + ": " + e.what());
      }
      ensure_finite(r.loss.total.item(), "training loss", epoch, batch_index);
      tape.backward(r.loss.total);
      adam_step(result.params, result.optimizer, config.adam);
      train_acc.add(r.loss.total.item(), r.loss.recon, r.graph_cosine, batch.size(), true);
    }
    if (options.on_params) options.on_params(epoch, result.params);
    const auto val_acc = evaluate(result.params, arch, val_pairs, config);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const auto train_m = train_acc.finish(epoch, "train", wall);
    const auto val_m = val_acc.finish(epoch, "validation", wall);
    for (const auto* m : {&train_m, &val_m}) {
      result.log.push_back(*m);
      if (log) log << metrics_row(*m) << "\n" << std::flush;
      if (options.on_epoch) options.on_epoch(*m);
      if (!options.quiet) std::cerr << metrics_row(*m) << "\n";
    }

    const double selection = val_acc.n ? val_m.total_loss : train_m.total_loss;
    auto scalars = identity;
    if (selection < best) {
      best = selection;
      result.best_params = result.params.clone();
      if (options.out_dir) {
        scalars["validation_loss"] = selection;
        save(*options.out_dir / "best", arch, result.best_params, nullptr, epoch, scalars);
      }
    }
    scalars["best_validation"] = best;
    if (options.out_dir) save(*options.out_dir / "last", arch, result.params, &result.optimizer, epoch, scalars);
    result.epochs_completed = epoch;
    if (epoch == config.epochs && options.out_dir) {
      save(*options.out_dir / "final", arch, result.params, &result.optimizer, epoch, scalars);
    }
  }
  result.best_validation = best;
  return result;
}

}  // namespace lne::training
