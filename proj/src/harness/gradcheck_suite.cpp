#include <algorithm>
#include <functional>
#include <map>
#include <random>

#include "lne/autodiff/gradcheck.hpp"
#include "lne/graph.hpp"
#include "lne/harness.hpp"
#include "lne/model.hpp"
#include "lne/seed.hpp"
#include "lne/training.hpp"

namespace lne::harness {

namespace {

using ad::Tape;
using ad::TensorD;
using Span = std::span<const TensorD>;
using Fn = std::function<TensorD(Tape<double>&, Span)>;

constexpr double kOpTolerance = 1e-4;
constexpr double kLooseTolerance = 1e-3;

/// One instantiated check: the function, its inputs and how to compare.
struct Case {
  Fn function;
  std::vector<TensorD> inputs;
  ad::GradCheckOptions options;
};

struct Check {
  std::string name;
  double tolerance;
  std::function<Case(Rng&, std::uint64_t)> make;
};

TensorD random_tensor(Rng& rng, ad::Shape shape, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(ad::shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return TensorD(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> random_values(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

/// Scalar reduction sum(w * out) with fixed random weights, so every output
/// coordinate contributes with a distinct sensitivity.
Fn reduced(Rng& rng, std::size_t out_size, std::function<TensorD(Tape<double>&, Span)> op) {
  auto w = std::make_shared<std::vector<double>>(random_values(rng, out_size));
  return [w, op](Tape<double>& tape, Span in) {
    return ad::sum(tape, ad::mul_const(tape, op(tape, in), std::span<const double>(*w)));
  };
}

Case op_case(Rng& rng, std::vector<TensorD> inputs, std::size_t out_size,
             std::function<TensorD(Tape<double>&, Span)> op) {
  Case c;
  c.function = reduced(rng, out_size, std::move(op));
  c.inputs = std::move(inputs);
  return c;
}

// Micro model for the composite objectives: 16x16 images, latent d = 8.
model::Architecture micro_arch() {
  model::Architecture a;
  a.encoder_channels = {4, 4, 2};
  a.decoder_channels = {4, 4, 4};
  a.input_size = 16;
  return a;
}

constexpr std::size_t kMicroPairs = 4;
constexpr std::size_t kMicroNeighbors = 2;
constexpr std::size_t kCompositeCoordinates = 6;
constexpr double kCompositeStep = 1e-6;

/// A conv bias feeding train-mode batchnorm is cancelled by the batch mean:
/// its exact gradient is zero and finite differences only see roundoff.
bool bias_before_batchnorm(const model::ModelParams<double>& params, const std::string& name) {
  const std::string suffix = ".conv.bias";
  if (!name.ends_with(suffix)) return false;
  return params.contains(name.substr(0, name.size() - suffix.size()) + ".bn.gamma");
}

enum class Composite { LneDetached, LneFull, Lssl, Ae };

/// The graph and (for the detached variant) the pooled target are computed
/// once from the unperturbed parameters and then held fixed, as they are
/// constants of the objective's gradient.
Case composite_case(Rng& rng, std::uint64_t seed, Composite kind) {
  const auto arch = micro_arch();
  auto params = std::make_shared<model::ModelParams<double>>(model::init_params<double>(arch, seed));
  const std::size_t d = arch.latent_dim(), s = arch.input_size;
  // Move batchnorm affine terms and biases off their neutral init values.
  for (const auto& name : params->trainable_names()) {
    if (name.find(".weight") != std::string::npos) continue;
    auto values = params->at(name).mutable_data();
    const bool gamma = name.ends_with(".gamma");
    for (auto& v : values) v = gamma ? std::uniform_real_distribution<double>(0.5, 1.5)(rng)
                                     : std::normal_distribution<double>(0.0, 0.1)(rng);
  }
  if (kind == Composite::Lssl) params->add(training::kTauName, random_tensor(rng, {d}));
  const auto x_t = random_tensor(rng, {kMicroPairs, 1, s, s}, false);
  const auto x_s = random_tensor(rng, {kMicroPairs, 1, s, s}, false);
  training::LossWeights weights;

  auto forward = [=](Tape<double>& tape) {
    const auto x = ad::concat_rows(tape, x_t, x_s);
    const auto z = model::encode(tape, *params, arch, x, model::Mode::Train);
    const auto recon = model::decode(tape, *params, arch, z, model::Mode::Train);
    const auto z_t = ad::slice_rows(tape, z, 0, kMicroPairs);
    const auto dz = ad::sub(tape, ad::slice_rows(tape, z, kMicroPairs, 2 * kMicroPairs), z_t);
    return std::tuple{z_t, dz, ad::slice_rows(tape, recon, 0, kMicroPairs),
                      ad::slice_rows(tape, recon, kMicroPairs, 2 * kMicroPairs)};
  };

  std::shared_ptr<graph::NeighborhoodGraph> g;
  TensorD fixed_dh;
  if (kind == Composite::LneDetached || kind == Composite::LneFull) {
    Tape<double> probe(false);
    const auto [z_t, dz, rt, rs] = forward(probe);
    g = std::make_shared<graph::NeighborhoodGraph>(
        graph::build_neighborhood(graph::Matrix::from_tensor(z_t), kMicroNeighbors));
    fixed_dh = training::pool_on_tape(probe, *g, dz, true);
  }

  Case c;
  c.function = [=](Tape<double>& tape, Span) {
    const auto [z_t, dz, rt, rs] = forward(tape);
    switch (kind) {
      case Composite::LneDetached:
        return training::lne_loss(tape, x_t, x_s, rt, rs, dz, fixed_dh, weights).total;
      case Composite::LneFull:
        return training::lne_loss(tape, x_t, x_s, rt, rs, dz, training::pool_on_tape(tape, *g, dz, false), weights)
            .total;
      case Composite::Lssl:
        return training::lssl_loss(tape, x_t, x_s, rt, rs, dz, params->at(training::kTauName), weights).total;
      case Composite::Ae:
        break;
    }
    return training::ae_loss(tape, x_t, x_s, rt, rs, weights).total;
  };
  for (const auto& name : params->trainable_names()) {
    if (bias_before_batchnorm(*params, name)) continue;
    c.inputs.push_back(params->at(name));
  }
  c.options.step = kCompositeStep;
  c.options.max_per_input = kCompositeCoordinates;
  c.options.seed = seed;
  return c;
}

const std::vector<Check>& checks() {
  static const std::vector<Check> all = [] {
    std::vector<Check> v;
    auto op = [&](std::string name, double tol, std::function<Case(Rng&)> make) {
      v.push_back({std::move(name), tol, [make](Rng& rng, std::uint64_t) { return make(rng); }});
    };
    op("conv2d", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {2, 2, 4, 4}), random_tensor(r, {3, 2, 3, 3}), random_tensor(r, {3})},
                     2 * 3 * 16, [](Tape<double>& t, Span in) { return ad::conv2d(t, in[0], in[1], in[2]); });
    });
    op("leaky_relu", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {3, 5})}, 15,
                     [](Tape<double>& t, Span in) { return ad::leaky_relu(t, in[0], 0.2); });
    });
    op("maxpool2", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {1, 1, 4, 4})}, 4,
                     [](Tape<double>& t, Span in) { return ad::maxpool2(t, in[0]); });
    });
    op("upsample2", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {1, 2, 3, 3})}, 2 * 36,
                     [](Tape<double>& t, Span in) { return ad::upsample2(t, in[0]); });
    });
    for (auto mode : {ad::BatchNormMode::Train, ad::BatchNormMode::Eval}) {
      const bool train = mode == ad::BatchNormMode::Train;
      op(train ? "batchnorm_train" : "batchnorm_eval", kLooseTolerance, [mode](Rng& r) {
        auto stats = std::make_shared<ad::BatchNormStats<double>>();
        stats->running_mean = random_tensor(r, {3}, false);
        auto var = random_values(r, 3, 0.5, 2.0);
        stats->running_var = TensorD({3}, var);
        return op_case(r, {random_tensor(r, {4, 3, 2, 2}), random_tensor(r, {3}), random_tensor(r, {3})}, 48,
                       [stats, mode](Tape<double>& t, Span in) {
                         return ad::batchnorm(t, in[0], in[1], in[2], *stats, mode);
                       });
      });
    }
    op("dense", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {3, 5}), random_tensor(r, {4, 5}), random_tensor(r, {4})}, 12,
                     [](Tape<double>& t, Span in) { return ad::dense(t, in[0], in[1], in[2]); });
    });
    op("cosine_similarity", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {6}), random_tensor(r, {6})}, 1,
                     [](Tape<double>& t, Span in) { return ad::cosine_similarity(t, in[0], in[1], 1e-8); });
    });
    op("cosine_rows", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {4, 5}), random_tensor(r, {4, 5})}, 4,
                     [](Tape<double>& t, Span in) { return ad::cosine_rows(t, in[0], in[1], 1e-8); });
    });
    op("mse", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {3, 4}), random_tensor(r, {3, 4})}, 1,
                     [](Tape<double>& t, Span in) { return ad::mse(t, in[0], in[1]); });
    });
    op("dense_mse", kOpTolerance, [](Rng& r) {
      auto y = random_tensor(r, {3, 2}, false);
      return op_case(r, {random_tensor(r, {3, 4}), random_tensor(r, {2, 4}), random_tensor(r, {2})}, 1,
                     [y](Tape<double>& t, Span in) { return ad::mse(t, ad::dense(t, in[0], in[1], in[2]), y); });
    });
    op("sum", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {2, 3})}, 1, [](Tape<double>& t, Span in) { return ad::sum(t, in[0]); });
    });
    op("mean", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {2, 3})}, 1, [](Tape<double>& t, Span in) { return ad::mean(t, in[0]); });
    });
    op("add", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {2, 3}), random_tensor(r, {2, 3})}, 6,
                     [](Tape<double>& t, Span in) { return ad::add(t, in[0], in[1]); });
    });
    op("sub", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {2, 3}), random_tensor(r, {2, 3})}, 6,
                     [](Tape<double>& t, Span in) { return ad::sub(t, in[0], in[1]); });
    });
    op("scale", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {2, 3})}, 6,
                     [](Tape<double>& t, Span in) { return ad::scale(t, in[0], -1.7); });
    });
    op("mul_const", kOpTolerance, [](Rng& r) {
      auto f = std::make_shared<std::vector<double>>(random_values(r, 6));
      return op_case(r, {random_tensor(r, {2, 3})}, 6, [f](Tape<double>& t, Span in) {
        return ad::mul_const(t, in[0], std::span<const double>(*f));
      });
    });
    op("reshape", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {2, 6})}, 12,
                     [](Tape<double>& t, Span in) { return ad::reshape(t, in[0], {3, 4}); });
    });
    op("concat_rows", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {2, 3}), random_tensor(r, {1, 3})}, 9,
                     [](Tape<double>& t, Span in) { return ad::concat_rows(t, in[0], in[1]); });
    });
    op("slice_rows", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {4, 3})}, 6,
                     [](Tape<double>& t, Span in) { return ad::slice_rows(t, in[0], 1, 3); });
    });
    op("concat_cols", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {3, 2}), random_tensor(r, {3, 4})}, 18,
                     [](Tape<double>& t, Span in) { return ad::concat_cols(t, in[0], in[1]); });
    });
    op("row_divide", kOpTolerance, [](Rng& r) {
      auto dv = std::make_shared<std::vector<double>>(random_values(r, 3, 0.5, 2.0));
      return op_case(r, {random_tensor(r, {3, 4})}, 12, [dv](Tape<double>& t, Span in) {
        return ad::row_divide(t, in[0], std::span<const double>(*dv));
      });
    });
    op("matmul_const", kOpTolerance, [](Rng& r) {
      auto m = std::make_shared<std::vector<double>>(random_values(r, 16));
      return op_case(r, {random_tensor(r, {4, 3})}, 12, [m](Tape<double>& t, Span in) {
        return ad::matmul_const(t, std::span<const double>(*m), in[0]);
      });
    });
    op("tile_rows", kOpTolerance, [](Rng& r) {
      return op_case(r, {random_tensor(r, {5})}, 15,
                     [](Tape<double>& t, Span in) { return ad::tile_rows(t, in[0], 3); });
    });
    op("affine_columns", kOpTolerance, [](Rng& r) {
      auto sh = std::make_shared<std::vector<double>>(random_values(r, 4));
      auto sc = std::make_shared<std::vector<double>>(random_values(r, 4, 0.5, 2.0));
      return op_case(r, {random_tensor(r, {3, 4})}, 12, [sh, sc](Tape<double>& t, Span in) {
        return ad::affine_columns(t, in[0], std::span<const double>(*sh), std::span<const double>(*sc));
      });
    });
    op("softmax_cross_entropy", kOpTolerance, [](Rng& r) {
      std::uniform_int_distribution<int> cls(0, 2);
      auto labels = std::make_shared<std::vector<int>>(5);
      for (auto& l : *labels) l = cls(r);
      auto w = std::make_shared<std::vector<double>>(random_values(r, 3, 0.2, 1.0));
      return op_case(r, {random_tensor(r, {5, 3})}, 1, [labels, w](Tape<double>& t, Span in) {
        return ad::softmax_cross_entropy(t, in[0], std::span<const int>(*labels), std::span<const double>(*w));
      });
    });
    op("lne_loss", kOpTolerance, [](Rng& r) {
      Case c;
      for (int i = 0; i < 4; ++i) c.inputs.push_back(random_tensor(r, {4, 1, 3, 3}));
      c.inputs.push_back(random_tensor(r, {4, 5}));
      c.inputs.push_back(random_tensor(r, {4, 5}));
      c.function = [](Tape<double>& t, Span in) {
        return training::lne_loss(t, in[0], in[1], in[2], in[3], in[4], in[5], training::LossWeights{}).total;
      };
      return c;
    });
    op("lssl_loss", kOpTolerance, [](Rng& r) {
      Case c;
      for (int i = 0; i < 4; ++i) c.inputs.push_back(random_tensor(r, {4, 1, 3, 3}));
      c.inputs.push_back(random_tensor(r, {4, 5}));
      c.inputs.push_back(random_tensor(r, {5}));
      c.function = [](Tape<double>& t, Span in) {
        return training::lssl_loss(t, in[0], in[1], in[2], in[3], in[4], in[5], training::LossWeights{}).total;
      };
      return c;
    });
    auto composite = [&](std::string name, Composite kind) {
      v.push_back({std::move(name), kLooseTolerance,
                   [kind](Rng& rng, std::uint64_t seed) { return composite_case(rng, seed, kind); }});
    };
    composite("model_lne_detached", Composite::LneDetached);
    composite("model_lne_full", Composite::LneFull);
    composite("model_lssl", Composite::Lssl);
    composite("model_ae", Composite::Ae);
    return v;
  }();
  return all;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (const auto& c : checks()) names.push_back(c.name);
  return names;
}

std::vector<GradcheckEntry> run_gradcheck_suite(std::size_t seeds, const std::optional<std::string>& corrupt) {
  if (seeds == 0) throw CommandError(kUsageError, "gradcheck needs at least one seed");
  std::vector<GradcheckEntry> entries;
  for (const auto& check : checks()) {
    GradcheckEntry e;
    e.name = check.name;
    e.tolerance = check.tolerance;
    e.seeds = seeds;
    for (std::size_t s = 0; s < seeds; ++s) {
      const std::uint64_t seed = derive_seed(0, check.name, s);
      Rng rng(seed);
      Case c = check.make(rng, seed);
      if (corrupt && *corrupt == check.name) {
        auto inner = c.function;
        c.function = [inner](Tape<double>& t, Span in) { return ad::testing::faulty_identity(t, inner(t, in), 1.5); };
      }
      const auto r = ad::grad_check(c.function, c.inputs, c.options);
      e.max_rel_error = std::max(e.max_rel_error, r.max_rel_error);
      e.coordinates += r.coordinates_checked;
    }
    e.passed = e.max_rel_error <= e.tolerance;
    entries.push_back(e);
  }
  return entries;
}

}  // namespace lne::harness
