#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lne/autodiff/ops.hpp"

namespace lne::model {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public ModelError {
 public:
  using ModelError::ModelError;
};

enum class Mode { Train, Eval };

/// Encoder C_k blocks (conv, batchnorm, leaky relu, maxpool) followed by
/// decoder CD_k blocks (conv, batchnorm, leaky relu, upsample) and a final
/// reconstruction conv with no activation.
struct Architecture {
  std::vector<std::size_t> encoder_channels{16, 32, 64, 16};
  std::vector<std::size_t> decoder_channels{64, 32, 16, 16};
  std::size_t input_size = 32;
  double slope = 0.2;

  void validate() const;
  std::size_t bottleneck_size() const { return input_size >> encoder_channels.size(); }
  /// c_last * (H / 2^blocks) * (W / 2^blocks)
  std::size_t latent_dim() const;
};

enum class FeatureMode { ZOnly, ZConcatDz };

struct HeadConfig {
  std::vector<std::size_t> hidden{1024, 64};
  std::size_t input_dim = 0;
  std::size_t output_dim = 1;

  /// Hidden widths capped at the latent dimensionality, but never below 64.
  static HeadConfig for_task(std::size_t latent_dim, FeatureMode features, std::size_t output_dim);
  void validate() const;
};

/// Named tensors in insertion order. Trainable tensors carry requires_grad;
/// batchnorm running statistics are stored alongside as plain tensors.
template <typename T>
class ModelParams {
 public:
  void add(const std::string& name, ad::Tensor<T> tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const ad::Tensor<T>& at(const std::string& name) const;
  ad::Tensor<T>& at(const std::string& name);
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

  std::vector<std::string> trainable_names() const;
  std::size_t trainable_count() const;
  void zero_grad();
  void set_trainable(const std::string& prefix, bool trainable);
  ModelParams clone() const;
  /// Bitwise equality of names, shapes and values.
  bool identical(const ModelParams& other) const;
  /// Appends every tensor of `other` (names must not collide).
  void merge(const ModelParams& other);

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

using ModelParamsF = ModelParams<float>;

/// Kaiming fan-in normal initialization with leaky-relu gain; zero biases;
/// batchnorm gamma 1, beta 0, running mean 0, running var 1.
template <typename T>
ModelParams<T> init_params(const Architecture& arch, std::uint64_t seed);

template <typename T>
ModelParams<T> init_head(const HeadConfig& head, double slope, std::uint64_t seed);

/// images [B,1,H,W] -> latents [B, latent_dim], channel-major flatten.
template <typename T>
ad::Tensor<T> encode(ad::Tape<T>& tape, ModelParams<T>& params, const Architecture& arch,
                     const ad::Tensor<T>& images, Mode mode);

/// latents [B, latent_dim] -> reconstructions [B,1,H,W].
template <typename T>
ad::Tensor<T> decode(ad::Tape<T>& tape, ModelParams<T>& params, const Architecture& arch, const ad::Tensor<T>& z,
                     Mode mode);

/// dense, leaky relu, dense, leaky relu, dense.
template <typename T>
ad::Tensor<T> head_forward(ad::Tape<T>& tape, const ModelParams<T>& head_params, const HeadConfig& head,
                           double slope, const ad::Tensor<T>& features);

/// Per-block activation standard deviations of one encode+decode pass in
/// train mode; keyed by block name in forward order.
template <typename T>
std::vector<std::pair<std::string, double>> activation_scan(ModelParams<T>& params, const Architecture& arch,
                                                            const ad::Tensor<T>& images);

std::vector<double> softmax(std::span<const float> logits);

// Checkpoint: <dir>/ckpt.json manifest + <dir>/ckpt.bin with little-endian
// float32 arrays concatenated in manifest order.
inline constexpr int kCheckpointVersion = 1;

struct OptimizerSnapshot {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<float>> first_moment;
  std::map<std::string, std::vector<float>> second_moment;
};

struct Checkpoint {
  Architecture arch;
  ModelParamsF params;
  std::optional<OptimizerSnapshot> optimizer;
  std::uint64_t epoch = 0;
  std::map<std::string, double> scalars;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& dir);
/// Loads values into an existing parameter set, checking every name and shape.
void load_params_into(const std::filesystem::path& dir, ModelParamsF& params);

}  // namespace lne::model
