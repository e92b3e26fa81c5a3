#include <cmath>

#include "lne/training.hpp"

namespace lne::training {

std::string to_string(Method m) {
  switch (m) {
    case Method::LNE: return "lne";
    case Method::AE: return "ae";
    case Method::LSSL: return "lssl";
  }
  return "lne";
}

Method method_from_string(const std::string& s) {
  if (s == "lne") return Method::LNE;
  if (s == "ae") return Method::AE;
  if (s == "lssl") return Method::LSSL;
  throw TrainingError("unknown method '" + s + "' (expected lne, ae or lssl)");
}

void LossWeights::validate() const {
  if (!(lambda_recon >= 0.0) || !(lambda_dir >= 0.0)) throw TrainingError("loss weights must be nonnegative");
  if (!(cosine_eps > 0.0)) throw TrainingError("cosine eps must be positive");
}

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw TrainingError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw TrainingError("weight decay must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw TrainingError("Adam betas must lie in [0,1)");
  }
  if (!(eps > 0.0)) throw TrainingError("Adam eps must be positive");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw TrainingError("epochs must be positive");
  if (batch_size < 2) throw TrainingError("batch_size must be at least 2 (the graph needs two pairs)");
  if (n_nb == 0) throw TrainingError("n_nb must be positive");
  adam.validate();
  weights.validate();
}

bool decays(const std::string& name) { return name.find(".bn.") == std::string::npos; }

template <typename T>
void adam_step(model::ModelParams<T>& params, OptimizerState<T>& state, const AdamConfig& config) {
  const auto names = params.trainable_names();
  for (const auto& name : names) {
    const auto& p = params.at(name);
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw DivergenceError("non-finite gradient in parameter " + name + "; step aborted");
      }
    }
  }
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (const auto& name : names) {
    auto& p = params.at(name);
    if (!p.has_grad()) continue;
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) m.assign(p.size(), T(0));
    if (v.empty()) v.assign(p.size(), T(0));
    if (m.size() != p.size() || v.size() != p.size()) {
      throw TrainingError("optimizer state for " + name + " does not match the parameter shape");
    }
    const double wd = decays(name) ? config.weight_decay : 0.0;
    auto theta = p.mutable_data();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = static_cast<double>(grad[i]) + wd * static_cast<double>(theta[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = config.lr * (mi / c1) / (std::sqrt(vi / c2) + config.eps);
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) - update);
    }
  }
}

namespace {

template <typename T>
void check_pair_shapes(const ad::Tensor<T>& x_t, const ad::Tensor<T>& x_s, const ad::Tensor<T>& recon_t,
                       const ad::Tensor<T>& recon_s) {
  if (x_t.shape() != recon_t.shape() || x_s.shape() != recon_s.shape() || x_t.shape() != x_s.shape()) {
    throw ad::ShapeError("loss: images and reconstructions must share one shape");
  }
}

template <typename T>
ad::Tensor<T> direction_term(ad::Tape<T>& tape, const ad::Tensor<T>& recon_total, const ad::Tensor<T>& cos,
                             const LossWeights& w, LossBreakdown<T>& out) {
  const auto cos_mean = ad::mean(tape, cos);
  out.cosine_mean = static_cast<double>(cos_mean.item());
  out.cosine_term = -w.lambda_dir * out.cosine_mean;
  return ad::sub(tape, recon_total, ad::scale(tape, cos_mean, static_cast<T>(w.lambda_dir)));
}

}  // namespace

template <typename T>
LossBreakdown<T> ae_loss(ad::Tape<T>& tape, const ad::Tensor<T>& x_t, const ad::Tensor<T>& x_s,
                         const ad::Tensor<T>& recon_t, const ad::Tensor<T>& recon_s, const LossWeights& weights) {
  check_pair_shapes(x_t, x_s, recon_t, recon_s);
  LossBreakdown<T> out;
  const auto mse_sum = ad::add(tape, ad::mse(tape, x_t, recon_t), ad::mse(tape, x_s, recon_s));
  out.total = ad::scale(tape, mse_sum, static_cast<T>(weights.lambda_recon));
  out.recon = static_cast<double>(out.total.item());
  out.cosine_term = 0.0;
  out.cosine_mean = std::nan("");
  return out;
}

template <typename T>
LossBreakdown<T> lne_loss(ad::Tape<T>& tape, const ad::Tensor<T>& x_t, const ad::Tensor<T>& x_s,
                          const ad::Tensor<T>& recon_t, const ad::Tensor<T>& recon_s, const ad::Tensor<T>& dz,
                          const ad::Tensor<T>& dh, const LossWeights& weights) {
  if (dz.rank() != 2 || dz.shape() != dh.shape()) throw ad::ShapeError("lne_loss: dz and dh must be [N,d] alike");
  if (dz.dim(0) < 2) throw TrainingError("lne_loss: batch size must be at least 2");
  if (dz.dim(0) != x_t.dim(0)) throw ad::ShapeError("lne_loss: dz rows must match the image batch");
  if (weights.lambda_dir == 0.0) return ae_loss(tape, x_t, x_s, recon_t, recon_s, weights);
  LossBreakdown<T> out = ae_loss(tape, x_t, x_s, recon_t, recon_s, weights);
  const auto cos = ad::cosine_rows(tape, dz, dh, static_cast<T>(weights.cosine_eps));
  out.total = direction_term(tape, out.total, cos, weights, out);
  return out;
}

template <typename T>
LossBreakdown<T> lssl_loss(ad::Tape<T>& tape, const ad::Tensor<T>& x_t, const ad::Tensor<T>& x_s,
                           const ad::Tensor<T>& recon_t, const ad::Tensor<T>& recon_s, const ad::Tensor<T>& dz,
                           const ad::Tensor<T>& tau, const LossWeights& weights) {
  if (dz.rank() != 2 || tau.rank() != 1 || tau.dim(0) != dz.dim(1)) {
    throw ad::ShapeError("lssl_loss: tau must be a [d] vector matching dz [N,d]");
  }
  if (!tau.requires_grad()) throw TrainingError("lssl_loss: tau must be trainable");
  LossBreakdown<T> out = ae_loss(tape, x_t, x_s, recon_t, recon_s, weights);
  if (weights.lambda_dir == 0.0) return out;
  const auto tiled = ad::tile_rows(tape, tau, dz.dim(0));
  const auto cos = ad::cosine_rows(tape, dz, tiled, static_cast<T>(weights.cosine_eps));
  out.total = direction_term(tape, out.total, cos, weights, out);
  return out;
}

template <typename T>
ad::Tensor<T> pool_on_tape(ad::Tape<T>& tape, const graph::NeighborhoodGraph& g, const ad::Tensor<T>& dz,
                           bool detach) {
  const auto w = g.pooling_weights();
  std::vector<T> weights(w.data.size());
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = static_cast<T>(w.data[i]);
  if (detach) {
    ad::Tape<T> scratch(false);
    return ad::matmul_const(scratch, std::span<const T>(weights), dz.detached());
  }
  return ad::matmul_const(tape, std::span<const T>(weights), dz);
}

namespace {

double graph_cosine(const graph::NeighborhoodGraph& g, const graph::Matrix& dz, double eps) {
  const auto dh = graph::apply_weights(g.pooling_weights(), dz);
  double acc = 0.0;
  for (std::size_t i = 0; i < dz.rows; ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < dz.cols; ++k) {
      dot += dz(i, k) * dh(i, k);
      na += dz(i, k) * dz(i, k);
      nb += dh(i, k) * dh(i, k);
    }
    acc += dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
  }
  return acc / static_cast<double>(dz.rows);
}

}  // namespace

template <typename T>
BatchResult<T> batch_objective(ad::Tape<T>& tape, model::ModelParams<T>& params, const model::Architecture& arch,
                               const ad::Tensor<T>& x_t, const ad::Tensor<T>& x_s, std::span<const T> delta_t,
                               const TrainConfig& config, model::Mode mode) {
  const std::size_t n = x_t.dim(0);
  if (n < 2) throw TrainingError("batch_objective: batch size must be at least 2");
  if (x_s.dim(0) != n || delta_t.size() != n) throw ad::ShapeError("batch_objective: pair arrays disagree in length");
  const auto x = ad::concat_rows(tape, x_t, x_s);
  const auto z = model::encode(tape, params, arch, x, mode);
  const auto recon = model::decode(tape, params, arch, z, mode);
  BatchResult<T> r;
  r.z_t = ad::slice_rows(tape, z, 0, n);
  const auto z_s = ad::slice_rows(tape, z, n, 2 * n);
  const auto recon_t = ad::slice_rows(tape, recon, 0, n);
  const auto recon_s = ad::slice_rows(tape, recon, n, 2 * n);
  r.dz = graph::trajectory_vectors(tape, r.z_t, z_s, delta_t);

  const auto g = graph::build_neighborhood(graph::Matrix::from_tensor(r.z_t), config.n_nb);
  r.graph_cosine = graph_cosine(g, graph::Matrix::from_tensor(r.dz), config.weights.cosine_eps);

  const bool reconstruct_only = config.method == Method::AE || config.weights.lambda_dir == 0.0;
  if (reconstruct_only) {
    r.loss = ae_loss(tape, x_t, x_s, recon_t, recon_s, config.weights);
  } else if (config.method == Method::LNE) {
    const auto dh = pool_on_tape(tape, g, r.dz, config.detach_dh);
    r.loss = lne_loss(tape, x_t, x_s, recon_t, recon_s, r.dz, dh, config.weights);
  } else {
    if (!params.contains(kTauName)) throw TrainingError("LSSL objective needs the parameter " + std::string(kTauName));
    r.loss = lssl_loss(tape, x_t, x_s, recon_t, recon_s, r.dz, params.at(kTauName), config.weights);
  }
  return r;
}

#define LNE_INSTANTIATE(T)                                                                                          \
  template void adam_step(model::ModelParams<T>&, OptimizerState<T>&, const AdamConfig&);                          \
  template LossBreakdown<T> lne_loss(ad::Tape<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,                     \
                                     const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,              \
                                     const ad::Tensor<T>&, const LossWeights&);                                    \
  template LossBreakdown<T> ae_loss(ad::Tape<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&, \
                                    const ad::Tensor<T>&, const LossWeights&);                                     \
  template LossBreakdown<T> lssl_loss(ad::Tape<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,                    \
                                      const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,             \
                                      const ad::Tensor<T>&, const LossWeights&);                                   \
  template ad::Tensor<T> pool_on_tape(ad::Tape<T>&, const graph::NeighborhoodGraph&, const ad::Tensor<T>&, bool);  \
  template BatchResult<T> batch_objective(ad::Tape<T>&, model::ModelParams<T>&, const model::Architecture&,         \
                                          const ad::Tensor<T>&, const ad::Tensor<T>&, std::span<const T>,          \
                                          const TrainConfig&, model::Mode);

LNE_INSTANTIATE(float)
LNE_INSTANTIATE(double)

#undef LNE_INSTANTIATE

}  // namespace lne::training
