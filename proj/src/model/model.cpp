#include "lne/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "lne/seed.hpp"

namespace lne::model {

void Architecture::validate() const {
  if (encoder_channels.empty() || decoder_channels.empty()) throw ModelError("channel lists must be non-empty");
  for (auto c : encoder_channels) {
    if (c == 0) throw ModelError("encoder channel counts must be positive");
  }
  for (auto c : decoder_channels) {
    if (c == 0) throw ModelError("decoder channel counts must be positive");
  }
  if (decoder_channels.size() != encoder_channels.size()) {
    throw ModelError("decoder must have as many upsampling blocks as the encoder has pooling blocks");
  }
  const std::size_t factor = std::size_t{1} << encoder_channels.size();
  if (input_size == 0 || input_size % factor != 0) {
    throw ModelError("input size " + std::to_string(input_size) + " must be divisible by " + std::to_string(factor));
  }
  if (!(slope > 0.0 && slope < 1.0)) throw ModelError("leaky relu slope must lie in (0,1)");
}

std::size_t Architecture::latent_dim() const {
  const std::size_t s = bottleneck_size();
  return encoder_channels.back() * s * s;
}

HeadConfig HeadConfig::for_task(std::size_t latent_dim, FeatureMode features, std::size_t output_dim) {
  HeadConfig cfg;
  cfg.input_dim = features == FeatureMode::ZOnly ? latent_dim : 2 * latent_dim;
  for (auto& h : cfg.hidden) h = std::min(h, std::max<std::size_t>(latent_dim, 64));
  cfg.output_dim = output_dim;
  return cfg;
}

void HeadConfig::validate() const {
  if (input_dim == 0 || output_dim == 0) throw ModelError("head dims must be positive");
  for (auto h : hidden) {
    if (h == 0) throw ModelError("head hidden dims must be positive");
  }
}

// ---------------------------------------------------------------------------

template <typename T>
void ModelParams<T>::add(const std::string& name, ad::Tensor<T> tensor) {
  if (index_.count(name)) throw ModelError("duplicate parameter name: " + name);
  index_[name] = names_.size();
  names_.push_back(name);
  tensors_.push_back(std::move(tensor));
}

template <typename T>
const ad::Tensor<T>& ModelParams<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ModelError("unknown parameter: " + name);
  return tensors_[it->second];
}

template <typename T>
ad::Tensor<T>& ModelParams<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ModelError("unknown parameter: " + name);
  return tensors_[it->second];
}

template <typename T>
std::vector<std::string> ModelParams<T>::trainable_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (tensors_[i].requires_grad()) out.push_back(names_[i]);
  }
  return out;
}

template <typename T>
std::size_t ModelParams<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) {
    if (t.requires_grad()) n += t.size();
  }
  return n;
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

template <typename T>
void ModelParams<T>::set_trainable(const std::string& prefix, bool trainable) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto& n = names_[i];
    if (n.rfind(prefix, 0) != 0) continue;
    if (n.find("running_") != std::string::npos) continue;
    tensors_[i].node().requires_grad = trainable;
  }
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams out;
  for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tensors_[i].clone());
  return out;
}

template <typename T>
bool ModelParams<T>::identical(const ModelParams& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto& a = tensors_[i];
    const auto& b = other.tensors_[i];
    if (a.shape() != b.shape()) return false;
    if (std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) != 0) return false;
  }
  return true;
}

template <typename T>
void ModelParams<T>::merge(const ModelParams& other) {
  for (std::size_t i = 0; i < other.names_.size(); ++i) add(other.names_[i], other.tensors_[i]);
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
ad::Tensor<T> kaiming(Rng& rng, ad::Shape shape, std::size_t fan_in, double slope) {
  const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  std::vector<T> data(ad::shape_size(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return ad::Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
void add_conv_block(ModelParams<T>& params, Rng& rng, const std::string& prefix, std::size_t in, std::size_t out,
                    double slope, bool with_bn) {
  params.add(prefix + ".conv.weight", kaiming<T>(rng, {out, in, 3, 3}, in * 9, slope));
  params.add(prefix + ".conv.bias", ad::Tensor<T>::zeros({out}, true));
  if (!with_bn) return;
  params.add(prefix + ".bn.gamma", ad::Tensor<T>::filled({out}, T(1), true));
  params.add(prefix + ".bn.beta", ad::Tensor<T>::zeros({out}, true));
  params.add(prefix + ".bn.running_mean", ad::Tensor<T>::zeros({out}));
  params.add(prefix + ".bn.running_var", ad::Tensor<T>::filled({out}, T(1)));
}

template <typename T>
ad::Tensor<T> conv_bn_act(ad::Tape<T>& tape, ModelParams<T>& params, const std::string& prefix,
                          const ad::Tensor<T>& x, Mode mode, double slope) {
  auto h = ad::conv2d(tape, x, params.at(prefix + ".conv.weight"), params.at(prefix + ".conv.bias"));
  ad::BatchNormStats<T> stats{params.at(prefix + ".bn.running_mean"), params.at(prefix + ".bn.running_var")};
  h = ad::batchnorm(tape, h, params.at(prefix + ".bn.gamma"), params.at(prefix + ".bn.beta"), stats,
                    mode == Mode::Train ? ad::BatchNormMode::Train : ad::BatchNormMode::Eval);
  return ad::leaky_relu(tape, h, static_cast<T>(slope));
}

}  // namespace

template <typename T>
ModelParams<T> init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  ModelParams<T> params;
  std::size_t in = 1;
  for (std::size_t i = 0; i < arch.encoder_channels.size(); ++i) {
    add_conv_block(params, rng, "enc." + std::to_string(i), in, arch.encoder_channels[i], arch.slope, true);
    in = arch.encoder_channels[i];
  }
  for (std::size_t i = 0; i < arch.decoder_channels.size(); ++i) {
    add_conv_block(params, rng, "dec." + std::to_string(i), in, arch.decoder_channels[i], arch.slope, true);
    in = arch.decoder_channels[i];
  }
  // The output conv has no activation; gain 1.
  params.add("out.conv.weight", kaiming<T>(rng, {1, in, 3, 3}, in * 9, 1.0));
  params.add("out.conv.bias", ad::Tensor<T>::zeros({1}, true));
  return params;
}

template <typename T>
ModelParams<T> init_head(const HeadConfig& head, double slope, std::uint64_t seed) {
  head.validate();
  Rng rng(seed);
  ModelParams<T> params;
  std::size_t in = head.input_dim;
  std::size_t layer = 0;
  for (auto h : head.hidden) {
    const std::string p = "head." + std::to_string(layer++);
    params.add(p + ".weight", kaiming<T>(rng, {h, in}, in, slope));
    params.add(p + ".bias", ad::Tensor<T>::zeros({h}, true));
    in = h;
  }
  const std::string p = "head." + std::to_string(layer);
  params.add(p + ".weight", kaiming<T>(rng, {head.output_dim, in}, in, 1.0));
  params.add(p + ".bias", ad::Tensor<T>::zeros({head.output_dim}, true));
  return params;
}

template <typename T>
ad::Tensor<T> encode(ad::Tape<T>& tape, ModelParams<T>& params, const Architecture& arch,
                     const ad::Tensor<T>& images, Mode mode) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != arch.input_size ||
      images.dim(3) != arch.input_size) {
    throw ModelError("encode: expected [B,1," + std::to_string(arch.input_size) + "," +
                     std::to_string(arch.input_size) + "], got " + ad::shape_string(images.shape()));
  }
  ad::Tensor<T> h = images;
  for (std::size_t i = 0; i < arch.encoder_channels.size(); ++i) {
    h = conv_bn_act(tape, params, "enc." + std::to_string(i), h, mode, arch.slope);
    h = ad::maxpool2(tape, h);
  }
  return ad::reshape(tape, h, {images.dim(0), arch.latent_dim()});
}

template <typename T>
ad::Tensor<T> decode(ad::Tape<T>& tape, ModelParams<T>& params, const Architecture& arch, const ad::Tensor<T>& z,
                     Mode mode) {
  if (z.rank() != 2 || z.dim(1) != arch.latent_dim()) {
    throw ModelError("decode: expected [B," + std::to_string(arch.latent_dim()) + "], got " +
                     ad::shape_string(z.shape()));
  }
  const std::size_t s = arch.bottleneck_size();
  ad::Tensor<T> h = ad::reshape(tape, z, {z.dim(0), arch.encoder_channels.back(), s, s});
  for (std::size_t i = 0; i < arch.decoder_channels.size(); ++i) {
    h = conv_bn_act(tape, params, "dec." + std::to_string(i), h, mode, arch.slope);
    h = ad::upsample2(tape, h);
  }
  return ad::conv2d(tape, h, params.at("out.conv.weight"), params.at("out.conv.bias"));
}

template <typename T>
ad::Tensor<T> head_forward(ad::Tape<T>& tape, const ModelParams<T>& head_params, const HeadConfig& head,
                           double slope, const ad::Tensor<T>& features) {
  if (features.rank() != 2 || features.dim(1) != head.input_dim) {
    throw ModelError("head_forward: expected [N," + std::to_string(head.input_dim) + "] features, got " +
                     ad::shape_string(features.shape()));
  }
  ad::Tensor<T> h = features;
  const std::size_t layers = head.hidden.size() + 1;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string p = "head." + std::to_string(i);
    h = ad::dense(tape, h, head_params.at(p + ".weight"), head_params.at(p + ".bias"));
    if (i + 1 < layers) h = ad::leaky_relu(tape, h, static_cast<T>(slope));
  }
  return h;
}

template <typename T>
std::vector<std::pair<std::string, double>> activation_scan(ModelParams<T>& params, const Architecture& arch,
                                                            const ad::Tensor<T>& images) {
  auto sd = [](const ad::Tensor<T>& t) {
    double m = 0.0, s = 0.0;
    for (T v : t.data()) m += v;
    m /= static_cast<double>(t.size());
    for (T v : t.data()) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(t.size()));
  };
  std::vector<std::pair<std::string, double>> out;
  ad::Tape<T> tape(false);
  ad::Tensor<T> h = images;
  for (std::size_t i = 0; i < arch.encoder_channels.size(); ++i) {
    const std::string p = "enc." + std::to_string(i);
    h = ad::maxpool2(tape, conv_bn_act(tape, params, p, h, Mode::Train, arch.slope));
    out.emplace_back(p, sd(h));
  }
  const std::size_t s = arch.bottleneck_size();
  h = ad::reshape(tape, h, {images.dim(0), arch.encoder_channels.back(), s, s});
  for (std::size_t i = 0; i < arch.decoder_channels.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    h = ad::upsample2(tape, conv_bn_act(tape, params, p, h, Mode::Train, arch.slope));
    out.emplace_back(p, sd(h));
  }
  h = ad::conv2d(tape, h, params.at("out.conv.weight"), params.at("out.conv.bias"));
  out.emplace_back("out", sd(h));
  return out;
}

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += p[i] = std::exp(logits[i] - mx);
  for (auto& v : p) v /= z;
  return p;
}

template class ModelParams<float>;
template class ModelParams<double>;

#define LNE_INSTANTIATE_MODEL(T)                                                                                  \
  template ModelParams<T> init_params<T>(const Architecture&, std::uint64_t);                                    \
  template ModelParams<T> init_head<T>(const HeadConfig&, double, std::uint64_t);                                \
  template ad::Tensor<T> encode(ad::Tape<T>&, ModelParams<T>&, const Architecture&, const ad::Tensor<T>&, Mode); \
  template ad::Tensor<T> decode(ad::Tape<T>&, ModelParams<T>&, const Architecture&, const ad::Tensor<T>&, Mode); \
  template ad::Tensor<T> head_forward(ad::Tape<T>&, const ModelParams<T>&, const HeadConfig&, double,            \
                                      const ad::Tensor<T>&);                                                      \
  template std::vector<std::pair<std::string, double>> activation_scan(ModelParams<T>&, const Architecture&,      \
                                                                       const ad::Tensor<T>&);

LNE_INSTANTIATE_MODEL(float)
LNE_INSTANTIATE_MODEL(double)

#undef LNE_INSTANTIATE_MODEL

}  // namespace lne::model
