#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lne/evalviz.hpp"
#include "lne/seed.hpp"

namespace lne::evalviz {

namespace {

constexpr double kSlope = 0.2;

bool is_regression(Task t) { return t == Task::Age; }

}  // namespace

void HeadTrainConfig::validate() const {
  if (epochs == 0) throw EvalError("head epochs must be positive");
  if (batch_size < 2) throw EvalError("head batch size must be at least 2");
  adam.validate();
}

Standardizer Standardizer::fit(const Matrix& x) {
  if (x.rows == 0) throw EvalError("cannot standardize an empty feature set");
  Standardizer s;
  s.mean.assign(x.cols, 0.0);
  s.inv_sd.assign(x.cols, 1.0);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) s.mean[j] += x(i, j);
  }
  for (auto& m : s.mean) m /= static_cast<double>(x.rows);
  for (std::size_t j = 0; j < x.cols; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) ss += (x(i, j) - s.mean[j]) * (x(i, j) - s.mean[j]);
    const double sd = std::sqrt(ss / static_cast<double>(x.rows));
    s.inv_sd[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  if (x.cols != mean.size()) throw EvalError("feature dimension does not match the fitted standardizer");
  Matrix out = x;
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = (x(i, j) - mean[j]) * inv_sd[j];
  }
  return out;
}

namespace {

ad::TensorF to_tensor(const Matrix& m, const std::vector<std::size_t>& rows) {
  std::vector<float> v;
  v.reserve(rows.size() * m.cols);
  for (std::size_t r : rows) {
    for (std::size_t j = 0; j < m.cols; ++j) v.push_back(static_cast<float>(m(r, j)));
  }
  return ad::TensorF({rows.size(), m.cols}, std::move(v));
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

std::vector<double> decode_outputs(const HeadModel& head, const ad::TensorF& out) {
  const std::size_t n = out.dim(0), c = out.dim(1);
  std::vector<double> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (is_regression(head.task)) {
      pred[i] = static_cast<double>(out.data()[i]) * head.target_sd + head.target_mean;
    } else {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k) {
        if (out.data()[i * c + k] > out.data()[i * c + best]) best = k;
      }
      pred[i] = static_cast<double>(best);
    }
  }
  return pred;
}

Scores score_predictions(Task task, const std::vector<double>& pred, const FeatureSet& set) {
  Scores s;
  s.n = set.size();
  if (set.size() == 0) return s;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (is_regression(task)) {
    s.bacc = nan;
    s.rmse = set.size() >= 2 ? rmse(pred, set.ages) : std::abs(pred[0] - set.ages[0]);
    try {
      s.r2 = r2(pred, set.ages);
    } catch (const EvalError&) {
      s.r2 = nan;
    }
  } else {
    s.r2 = s.rmse = nan;
    std::vector<int> p(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) p[i] = static_cast<int>(pred[i]);
    s.bacc = bacc(p, set.labels);
  }
  return s;
}

/// Higher is better.
double selection_value(Task task, const Scores& s) { return is_regression(task) ? -s.rmse : s.bacc; }

void check_labels(const FeatureSet& set, const char* split) {
  for (int y : set.labels) {
    if (y < 0) throw EvalError(std::string("group task needs labelled samples; the ") + split + " split has none");
  }
}

struct Targets {
  std::vector<float> regression;  // standardized
  std::vector<int> labels;
};

ad::TensorF head_loss(ad::Tape<float>& tape, const HeadModel& head, const ad::TensorF& out,
                      const std::vector<std::size_t>& rows, const Targets& targets,
                      const std::vector<float>& weights) {
  if (is_regression(head.task)) {
    std::vector<float> y;
    for (std::size_t r : rows) y.push_back(targets.regression[r]);
    return ad::mse(tape, out, ad::TensorF({rows.size(), 1}, std::move(y)));
  }
  std::vector<int> y;
  for (std::size_t r : rows) y.push_back(targets.labels[r]);
  return ad::softmax_cross_entropy(tape, out, std::span<const int>(y), std::span<const float>(weights));
}

Targets make_targets(const HeadModel& head, const FeatureSet& set) {
  Targets t;
  if (is_regression(head.task)) {
    for (double a : set.ages) t.regression.push_back(static_cast<float>((a - head.target_mean) / head.target_sd));
  } else {
    t.labels = set.labels;
  }
  return t;
}

std::vector<float> loss_weights(const HeadModel& head, const FeatureSet& train) {
  if (is_regression(head.task)) return {};
  const auto w = class_weights(train.labels, head.num_classes);
  return {w.begin(), w.end()};
}

HeadModel init_head_model(const FeatureSet& train, Task task, std::uint64_t seed) {
  HeadModel h;
  h.task = task;
  if (train.size() < 2) throw EvalError("need at least two training samples");
  if (is_regression(task)) {
    h.num_classes = 1;
    double mean = 0.0, ss = 0.0;
    for (double a : train.ages) mean += a;
    mean /= static_cast<double>(train.ages.size());
    for (double a : train.ages) ss += (a - mean) * (a - mean);
    h.target_mean = mean;
    h.target_sd = std::sqrt(ss / static_cast<double>(train.ages.size()));
    if (!(h.target_sd > 0.0)) throw EvalError("constant regression targets");
  } else {
    check_labels(train, "training");
    h.num_classes = train.class_names.size();
    if (h.num_classes != 2) {
      throw EvalError("group task needs exactly two classes, found " + std::to_string(h.num_classes));
    }
    std::vector<int> seen(h.num_classes, 0);
    for (int y : train.labels) seen[static_cast<std::size_t>(y)] = 1;
    if (std::accumulate(seen.begin(), seen.end(), 0) < 2) throw EvalError("single-class training targets");
  }
  const std::size_t latent = train.mode == model::FeatureMode::ZOnly ? train.dim() : train.dim() / 2;
  h.config = model::HeadConfig::for_task(latent, train.mode, h.num_classes);
  if (h.config.input_dim != train.dim()) throw EvalError("feature dimension does not match the feature mode");
  h.params = model::init_head<float>(h.config, kSlope, derive_seed(seed, "head"));
  h.features = Standardizer::fit(train.features);
  return h;
}

}  // namespace

std::vector<double> predict(const HeadModel& head, const Matrix& features) {
  if (features.rows == 0) return {};
  const auto x = head.features.apply(features);
  ad::Tape<float> tape(false);
  const auto out = model::head_forward(tape, head.params, head.config, kSlope, to_tensor(x, all_rows(x.rows)));
  return decode_outputs(head, out);
}

Scores score(const HeadModel& head, const FeatureSet& set) {
  if (head.task == Task::Group && set.size() > 0) check_labels(set, "evaluated");
  return score_predictions(head.task, predict(head, set.features), set);
}

HeadResult fit_head_frozen(const FeatureSet& train, const FeatureSet& validation, const FeatureSet& test, Task task,
                           const HeadTrainConfig& config) {
  config.validate();
  HeadResult result;
  result.head = init_head_model(train, task, config.seed);
  HeadModel& head = result.head;
  const auto x = head.features.apply(train.features);
  const auto targets = make_targets(head, train);
  const auto weights = loss_weights(head, train);
  const FeatureSet& select_on = validation.size() > 0 ? validation : train;

  training::OptimizerState<float> opt;
  auto best_params = head.params.clone();
  double best = selection_value(task, score(head, select_on));
  std::vector<std::size_t> order = all_rows(train.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng = make_rng(config.seed, "head-shuffle", epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                          order.begin() + static_cast<std::ptrdiff_t>(
                                                              std::min(order.size(), begin + config.batch_size)));
      head.params.zero_grad();
      ad::Tape<float> tape;
      const auto out = model::head_forward(tape, head.params, head.config, kSlope, to_tensor(x, rows));
      const auto loss = head_loss(tape, head, out, rows, targets, weights);
      tape.backward(loss);
      training::adam_step(head.params, opt, config.adam);
    }
    const double value = selection_value(task, score(head, select_on));
    if (value > best) {
      best = value;
      best_params = head.params.clone();
      result.best_epoch = epoch;
    }
  }
  head.params = best_params;
  result.train = score(head, train);
  result.validation = score(head, validation);
  result.test = score(head, test);
  return result;
}

// ---------------------------------------------------------------------------

namespace {

/// One fine-tuning sample: an image (z features) or a pair (z+dz features).
struct Sample {
  const cohort::Image* x_t = nullptr;
  const cohort::Image* x_s = nullptr;
  double delta_t = 0.0;
};

std::vector<Sample> samples_for(const cohort::Cohort& cohort, const std::vector<std::string>& subjects,
                                model::FeatureMode mode, std::vector<cohort::ImagePair>& pair_storage) {
  std::vector<Sample> out;
  if (mode == model::FeatureMode::ZOnly) {
    for (const auto& id : subjects) {
      for (const auto& v : cohort.subject(id).visits) out.push_back({&v.image, nullptr, 0.0});
    }
    return out;
  }
  pair_storage = cohort::build_pairs(cohort, subjects);
  for (const auto& p : pair_storage) out.push_back({&p.x_t, &p.x_s, p.delta_t});
  return out;
}

ad::TensorF stack(const std::vector<const cohort::Image*>& images, std::size_t size) {
  std::vector<float> v;
  v.reserve(images.size() * size * size);
  for (const auto* img : images) v.insert(v.end(), img->pixels.begin(), img->pixels.end());
  return ad::TensorF({images.size(), 1, size, size}, std::move(v));
}

}  // namespace

FinetuneResult fine_tune(const model::ModelParamsF& encoder, const model::Architecture& arch,
                         const cohort::Cohort& cohort, const cohort::Fold& fold, Task task, model::FeatureMode mode,
                         const HeadTrainConfig& config) {
  config.validate();
  FinetuneResult out;
  out.encoder = encoder.clone();
  auto features = [&](const std::vector<std::string>& ids) {
    return extract_features(out.encoder, arch, cohort, ids, mode);
  };
  const auto train_set = features(fold.train);
  const auto val_set = features(fold.validation);
  out.result = fit_head_frozen(train_set, val_set, features(fold.test), task, config);
  HeadModel& head = out.result.head;

  std::vector<cohort::ImagePair> pair_storage;
  const auto samples = samples_for(cohort, fold.train, mode, pair_storage);
  const auto targets = make_targets(head, train_set);
  const auto weights = loss_weights(head, train_set);
  std::vector<float> shift(head.features.mean.begin(), head.features.mean.end());
  std::vector<float> scale(head.features.inv_sd.begin(), head.features.inv_sd.end());

  auto eval_value = [&]() {
    const auto v = val_set.size() > 0 ? features(fold.validation) : features(fold.train);
    return selection_value(task, score(head, v));
  };
  double best = eval_value();
  auto best_encoder = out.encoder.clone();
  auto best_head = head.params.clone();
  std::size_t best_epoch = 0;

  training::OptimizerState<float> enc_opt, head_opt;
  std::vector<std::size_t> order = all_rows(samples.size());
  for (std::size_t epoch = 1; epoch <= config.finetune_epochs; ++epoch) {
    Rng rng = make_rng(config.seed, "finetune-shuffle", epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      if (end - begin < 2) break;  // batchnorm needs two samples
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<const cohort::Image*> xt, xs;
      std::vector<float> dt;
      for (std::size_t r : rows) {
        xt.push_back(samples[r].x_t);
        if (samples[r].x_s) {
          xs.push_back(samples[r].x_s);
          dt.push_back(static_cast<float>(samples[r].delta_t));
        }
      }
      out.encoder.zero_grad();
      head.params.zero_grad();
      ad::Tape<float> tape;
      ad::TensorF feats = ad::TensorF::zeros({1});
      if (mode == model::FeatureMode::ZOnly) {
        feats = model::encode(tape, out.encoder, arch, stack(xt, arch.input_size), model::Mode::Train);
      } else {
        const auto x = ad::concat_rows(tape, stack(xt, arch.input_size), stack(xs, arch.input_size));
        const auto z = model::encode(tape, out.encoder, arch, x, model::Mode::Train);
        const auto z_t = ad::slice_rows(tape, z, 0, rows.size());
        const auto z_s = ad::slice_rows(tape, z, rows.size(), 2 * rows.size());
        const auto dz = graph::trajectory_vectors(tape, z_t, z_s, std::span<const float>(dt));
        feats = ad::concat_cols(tape, z_t, dz);
      }
      const auto standardized =
          ad::affine_columns(tape, feats, std::span<const float>(shift), std::span<const float>(scale));
      const auto pred = model::head_forward(tape, head.params, head.config, kSlope, standardized);
      const auto loss = head_loss(tape, head, pred, rows, targets, weights);
      tape.backward(loss);
      training::adam_step(out.encoder, enc_opt, config.adam);
      training::adam_step(head.params, head_opt, config.adam);
    }
    const double value = eval_value();
    if (value > best) {
      best = value;
      best_encoder = out.encoder.clone();
      best_head = head.params.clone();
      best_epoch = epoch;
    }
  }
  out.encoder = best_encoder;
  head.params = best_head;
  out.result.best_epoch = best_epoch;
  out.result.train = score(head, features(fold.train));
  out.result.validation = score(head, features(fold.validation));
  out.result.test = score(head, features(fold.test));
  return out;
}

}  // namespace lne::evalviz
