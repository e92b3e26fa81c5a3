#include "lne/autodiff/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

namespace lne::ad {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {
std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  require(s.size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

template <typename T>
bool any_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Output gradient, or nullptr when nothing downstream consumed the output.
template <typename T>
const std::vector<T>* out_grad(const std::shared_ptr<TensorNode<T>>& out) {
  return out->grad.empty() ? nullptr : &out->grad;
}

template <typename T>
std::vector<T>* in_grad(const std::shared_ptr<TensorNode<T>>& in) {
  if (!in->requires_grad) return nullptr;
  in->ensure_grad();
  return &in->grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d: im2col + GEMM over the whole batch, or direct loops when one
// channel count is 1.

namespace {

template <typename T>
void conv_direct_forward(const T* x, const T* w, const T* bias, T* out, std::size_t B, std::size_t C, std::size_t K,
                         std::size_t H, std::size_t W) {
  const std::size_t HW = H * W;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      T* o = out + (b * K + k) * HW;
      std::fill(o, o + HW, bias[k]);
      for (std::size_t c = 0; c < C; ++c) {
        const T* plane = x + (b * C + c) * HW;
        const T* wk = w + (k * C + c) * 9;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const T wv = wk[ky * 3 + kx];
            const std::size_t x0 = kx == 0 ? 1 : 0;
            const std::size_t x1 = kx == 2 ? W - 1 : W;
            for (std::size_t y = 0; y < H; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
              const T* src = plane + sy * W + kx;
              T* dst = o + y * W;
              for (std::size_t xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx - 1];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_direct_backward(const T* x, const T* w, const T* g, T* gx, T* gw, T* gb, std::size_t B, std::size_t C,
                          std::size_t K, std::size_t H, std::size_t W) {
  const std::size_t HW = H * W;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      const T* go = g + (b * K + k) * HW;
      if (gb) {
        T acc = 0;
        for (std::size_t p = 0; p < HW; ++p) acc += go[p];
        gb[k] += acc;
      }
      for (std::size_t c = 0; c < C; ++c) {
        const T* plane = x + (b * C + c) * HW;
        T* gplane = gx ? gx + (b * C + c) * HW : nullptr;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::size_t widx = (k * C + c) * 9 + ky * 3 + kx;
            const T wv = w[widx];
            const std::size_t x0 = kx == 0 ? 1 : 0;
            const std::size_t x1 = kx == 2 ? W - 1 : W;
            T acc = 0;
            for (std::size_t y = 0; y < H; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
              const T* src = plane + sy * W + kx;
              const T* gr = go + y * W;
              if (gw) {
                for (std::size_t xx = x0; xx < x1; ++xx) acc += gr[xx] * src[xx - 1];
              }
              if (gplane) {
                T* dst = gplane + sy * W + kx;
                for (std::size_t xx = x0; xx < x1; ++xx) dst[xx - 1] += wv * gr[xx];
              }
            }
            if (gw) gw[widx] += acc;
          }
        }
      }
    }
  }
}

bool use_direct_conv(std::size_t C, std::size_t K, std::size_t W) { return W >= 16 && (C == 1 || K == 1); }

}  // namespace

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  require_rank(bias.shape(), 1, "conv2d bias");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t K = kernel.dim(0);
  require(kernel.dim(1) == C, "conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
                                  std::to_string(C));
  require(kernel.dim(2) == 3 && kernel.dim(3) == 3, "conv2d: kernel must be 3x3");
  require(bias.dim(0) == K, "conv2d: bias length must equal output channels");

  const std::size_t HW = H * W;
  const bool needs = any_grad<T>({&input, &kernel, &bias});

  if (use_direct_conv(C, K, W)) {
    std::vector<T> out(B * K * HW);
    conv_direct_forward(input.data().data(), kernel.data().data(), bias.data().data(), out.data(), B, C, K, H, W);
    Tensor<T> result = tape.make_output("conv2d", {B, K, H, W}, std::move(out), needs);
    if (result.requires_grad()) {
      auto on = result.node_ptr(), xn = input.node_ptr(), wn = kernel.node_ptr(), bn = bias.node_ptr();
      tape.record([=]() {
        const auto* gout = out_grad(on);
        if (!gout) return;
        auto* gx = in_grad(xn);
        auto* gw = in_grad(wn);
        auto* gb = in_grad(bn);
        conv_direct_backward(xn->value.data(), wn->value.data(), gout->data(), gx ? gx->data() : nullptr,
                             gw ? gw->data() : nullptr, gb ? gb->data() : nullptr, B, C, K, H, W);
      });
    }
    return result;
  }

  const std::size_t C9 = C * 9;
  auto col = std::make_shared<RowMat<T>>(static_cast<Eigen::Index>(C9), static_cast<Eigen::Index>(B * HW));
  col->setZero();
  const T* x = input.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* plane = x + (b * C + c) * HW;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          T* row = col->data() + (c * 9 + ky * 3 + kx) * B * HW + b * HW;
          for (std::size_t y = 0; y < H; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
            const T* src = plane + sy * W;
            T* dst = row + y * W;
            const std::size_t x0 = kx == 0 ? 1 : 0;
            const std::size_t x1 = kx == 2 ? W - 1 : W;
            for (std::size_t xx = x0; xx < x1; ++xx) dst[xx] = src[xx + kx - 1];
          }
        }
      }
    }
  }

  ConstRowMap<T> wmat(kernel.data().data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(C9));
  RowMat<T> prod = wmat * (*col);

  std::vector<T> out(B * K * HW);
  const T* bptr = bias.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      const T* src = prod.data() + k * B * HW + b * HW;
      T* dst = out.data() + (b * K + k) * HW;
      for (std::size_t p = 0; p < HW; ++p) dst[p] = src[p] + bptr[k];
    }
  }

  Tensor<T> result = tape.make_output("conv2d", {B, K, H, W}, std::move(out), needs);
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr(), wn = kernel.node_ptr(), bn = bias.node_ptr();
    tape.record([=]() {
      const auto* gout = out_grad(on);
      if (!gout) return;
      RowMat<T> g(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(B * HW));
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
          std::copy_n(gout->data() + (b * K + k) * HW, HW, g.data() + k * B * HW + b * HW);
        }
      }
      if (auto* gb = in_grad(bn)) {
        for (std::size_t k = 0; k < K; ++k) (*gb)[k] += g.row(static_cast<Eigen::Index>(k)).sum();
      }
      if (auto* gw = in_grad(wn)) {
        RowMap<T> gwm(gw->data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(C9));
        gwm.noalias() += g * col->transpose();
      }
      if (auto* gx = in_grad(xn)) {
        ConstRowMap<T> wm(wn->value.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(C9));
        RowMat<T> gcol = wm.transpose() * g;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            T* plane = gx->data() + (b * C + c) * HW;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const T* row = gcol.data() + (c * 9 + ky * 3 + kx) * B * HW + b * HW;
                for (std::size_t y = 0; y < H; ++y) {
                  const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                  T* dst = plane + sy * W;
                  const T* src = row + y * W;
                  const std::size_t x0 = kx == 0 ? 1 : 0;
                  const std::size_t x1 = kx == 2 ? W - 1 : W;
                  for (std::size_t xx = x0; xx < x1; ++xx) dst[xx + kx - 1] += src[xx];
                }
              }
            }
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& input, T slope) {
  if (!(slope > T(0) && slope < T(1))) throw AutodiffError("leaky_relu: slope must lie in (0,1)");
  auto x = input.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : slope * x[i];
  Tensor<T> result = tape.make_output("leaky_relu", input.shape(), std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < g->size(); ++i) (*gx)[i] += xn->value[i] > T(0) ? (*g)[i] : slope * (*g)[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> maxpool2(Tape<T>& tape, const Tensor<T>& input) {
  require_rank(input.shape(), 4, "maxpool2");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2: spatial dims must be even, got " + shape_string(input.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  auto x = input.data();
  std::vector<T> out(B * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        const std::size_t base = bc * H * W + 2 * y * W + 2 * xx;
        const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q) {
          if (x[cand[q]] > x[best]) best = cand[q];
        }
        const std::size_t o = bc * Ho * Wo + y * Wo + xx;
        out[o] = x[best];
        (*argmax)[o] = best;
      }
    }
  }
  Tensor<T> result = tape.make_output("maxpool2", {B, C, Ho, Wo}, std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t o = 0; o < g->size(); ++o) (*gx)[(*argmax)[o]] += (*g)[o];
    });
  }
  return result;
}

template <typename T>
Tensor<T> upsample2(Tape<T>& tape, const Tensor<T>& input) {
  require_rank(input.shape(), 4, "upsample2");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  auto x = input.data();
  std::vector<T> out(B * C * Ho * Wo);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    for (std::size_t y = 0; y < Ho; ++y) {
      const T* src = x.data() + bc * H * W + (y / 2) * W;
      T* dst = out.data() + bc * Ho * Wo + y * Wo;
      for (std::size_t xx = 0; xx < Wo; ++xx) dst[xx] = src[xx / 2];
    }
  }
  Tensor<T> result = tape.make_output("upsample2", {B, C, Ho, Wo}, std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        for (std::size_t y = 0; y < Ho; ++y) {
          const T* src = g->data() + bc * Ho * Wo + y * Wo;
          T* dst = gx->data() + bc * H * W + (y / 2) * W;
          for (std::size_t xx = 0; xx < Wo; ++xx) dst[xx / 2] += src[xx];
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batchnorm(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, BatchNormMode mode, double eps, double momentum) {
  require(input.rank() >= 2, "batchnorm: input must be at least [B,C]");
  const std::size_t B = input.dim(0), C = input.dim(1);
  const std::size_t S = input.size() / (B * C);
  require(gamma.size() == C && beta.size() == C, "batchnorm: gamma/beta length must equal channel count");
  require(stats.running_mean.size() == C && stats.running_var.size() == C,
          "batchnorm: running statistics length must equal channel count");
  if (mode == BatchNormMode::Train && B < 2) {
    throw AutodiffError("batchnorm: train mode requires batch size >= 2");
  }
  const std::size_t M = B * S;
  auto x = input.data();
  auto inv_std = std::make_shared<std::vector<T>>(C);
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  std::vector<T> out(x.size());

  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (mode == BatchNormMode::Train) {
      double acc = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) acc += p[s];
      }
      mu = acc / static_cast<double>(M);
      double sq = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) {
          const double d = p[s] - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(M);
      auto rm = stats.running_mean.mutable_data();
      auto rv = stats.running_var.mutable_data();
      const double unbiased = var * static_cast<double>(M) / static_cast<double>(M - 1);
      rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * mu);
      rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * unbiased);
    } else {
      mu = stats.running_mean.data()[c];
      var = stats.running_var.data()[c];
    }
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[c] = static_cast<T>(istd);
    const T g = gamma.data()[c], bt = beta.data()[c];
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const T xh = static_cast<T>((x[off + s] - mu) * istd);
        (*xhat)[off + s] = xh;
        out[off + s] = g * xh + bt;
      }
    }
  }

  Tensor<T> result = tape.make_output("batchnorm", input.shape(), std::move(out), any_grad<T>({&input, &gamma, &beta}));
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    const bool train = mode == BatchNormMode::Train;
    tape.record([=]() {
      const auto* g = out_grad(on);
      if (!g) return;
      auto* gg = in_grad(gn);
      auto* gb = in_grad(bn);
      auto* gx = in_grad(xn);
      for (std::size_t c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t off = (b * C + c) * S;
          for (std::size_t s = 0; s < S; ++s) {
            sum_dy += (*g)[off + s];
            sum_dy_xhat += static_cast<double>((*g)[off + s]) * (*xhat)[off + s];
          }
        }
        if (gg) (*gg)[c] += static_cast<T>(sum_dy_xhat);
        if (gb) (*gb)[c] += static_cast<T>(sum_dy);
        if (!gx) continue;
        const double scale = static_cast<double>(gn->value[c]) * (*inv_std)[c];
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t off = (b * C + c) * S;
          for (std::size_t s = 0; s < S; ++s) {
            double d = (*g)[off + s];
            if (train) d -= (sum_dy + (*xhat)[off + s] * sum_dy_xhat) / static_cast<double>(M);
            (*gx)[off + s] += static_cast<T>(scale * d);
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dense(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input.shape(), 2, "dense input");
  require_rank(weight.shape(), 2, "dense weight");
  require_rank(bias.shape(), 1, "dense bias");
  const std::size_t B = input.dim(0), N = input.dim(1), M = weight.dim(0);
  require(weight.dim(1) == N, "dense: weight expects " + std::to_string(weight.dim(1)) + " inputs, got " +
                                  std::to_string(N));
  require(bias.dim(0) == M, "dense: bias length must equal output dim");
  ConstRowMap<T> xm(input.data().data(), B, N);
  ConstRowMap<T> wm(weight.data().data(), M, N);
  std::vector<T> out(B * M);
  RowMap<T> om(out.data(), B, M);
  om.noalias() = xm * wm.transpose();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t m = 0; m < M; ++m) out[b * M + m] += bias.data()[m];
  }
  Tensor<T> result = tape.make_output("dense", {B, M}, std::move(out), any_grad<T>({&input, &weight, &bias}));
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr(), wn = weight.node_ptr(), bn = bias.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      if (!g) return;
      ConstRowMap<T> gm(g->data(), B, M);
      if (auto* gb = in_grad(bn)) {
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t m = 0; m < M; ++m) (*gb)[m] += gm(b, m);
        }
      }
      if (auto* gw = in_grad(wn)) {
        ConstRowMap<T> xv(xn->value.data(), B, N);
        RowMap<T> gwm(gw->data(), M, N);
        gwm.noalias() += gm.transpose() * xv;
      }
      if (auto* gx = in_grad(xn)) {
        ConstRowMap<T> wv(wn->value.data(), M, N);
        RowMap<T> gxm(gx->data(), B, N);
        gxm.noalias() += gm * wv;
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cosine_rows(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, T eps) {
  require_rank(a.shape(), 2, "cosine_rows");
  require(a.shape() == b.shape(), "cosine_rows: shape mismatch " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
  const std::size_t N = a.dim(0), d = a.dim(1);
  auto av = a.data(), bv = b.data();
  auto norms = std::make_shared<std::vector<double>>(2 * N);
  auto dots = std::make_shared<std::vector<double>>(N);
  std::vector<T> out(N);
  for (std::size_t i = 0; i < N; ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = av[i * d + j], y = bv[i * d + j];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    (*norms)[2 * i] = na;
    (*norms)[2 * i + 1] = nb;
    (*dots)[i] = dot;
    out[i] = static_cast<T>(dot / (std::max<double>(na, eps) * std::max<double>(nb, eps)));
  }
  Tensor<T> result = tape.make_output("cosine_rows", {N}, std::move(out), any_grad<T>({&a, &b}));
  if (result.requires_grad()) {
    auto on = result.node_ptr(), an = a.node_ptr(), bn = b.node_ptr();
    const double e = eps;
    tape.record([=]() {
      const auto* g = out_grad(on);
      if (!g) return;
      auto* ga = in_grad(an);
      auto* gb = in_grad(bn);
      for (std::size_t i = 0; i < N; ++i) {
        const double na = (*norms)[2 * i], nb = (*norms)[2 * i + 1];
        const double ma = std::max(na, e), mb = std::max(nb, e);
        const double dot = (*dots)[i];
        const double gi = (*g)[i];
        // d/da [a.b/(ma mb)] = b/(ma mb) - dot a / (ma^2 mb na) when na > eps.
        const double ca = na > e ? dot / (ma * ma * mb * na) : 0.0;
        const double cb = nb > e ? dot / (ma * mb * mb * nb) : 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double x = an->value[i * d + j], y = bn->value[i * d + j];
          if (ga) (*ga)[i * d + j] += static_cast<T>(gi * (y / (ma * mb) - ca * x));
          if (gb) (*gb)[i * d + j] += static_cast<T>(gi * (x / (ma * mb) - cb * y));
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> cosine_similarity(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, T eps) {
  require(a.rank() == 1 && a.shape() == b.shape(), "cosine_similarity: expects two vectors of equal length");
  const std::size_t n = a.size();
  auto ar = reshape(tape, a, {1, n});
  auto br = reshape(tape, b, {1, n});
  return cosine_rows(tape, ar, br, eps);
}

template <typename T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mse: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  auto av = a.data(), bv = b.data();
  const std::size_t n = av.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(av[i]) - bv[i];
    acc += d * d;
  }
  Tensor<T> result =
      tape.make_output("mse", {1}, {static_cast<T>(acc / static_cast<double>(n))}, any_grad<T>({&a, &b}));
  if (result.requires_grad()) {
    auto on = result.node_ptr(), an = a.node_ptr(), bn = b.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      if (!g) return;
      const double k = 2.0 * (*g)[0] / static_cast<double>(n);
      auto* ga = in_grad(an);
      auto* gb = in_grad(bn);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(an->value[i]) - bn->value[i];
        if (ga) (*ga)[i] += static_cast<T>(k * d);
        if (gb) (*gb)[i] -= static_cast<T>(k * d);
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& input) {
  double acc = 0.0;
  for (T v : input.data()) acc += v;
  Tensor<T> result = tape.make_output("sum", {1}, {static_cast<T>(acc)}, input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (auto& v : *gx) v += (*g)[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& input) {
  const std::size_t n = input.size();
  double acc = 0.0;
  for (T v : input.data()) acc += v;
  Tensor<T> result =
      tape.make_output("mean", {1}, {static_cast<T>(acc / static_cast<double>(n))}, input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      const T k = static_cast<T>((*g)[0] / static_cast<double>(n));
      for (auto& v : *gx) v += k;
    });
  }
  return result;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor<T> result = tape.make_output("add", a.shape(), std::move(out), any_grad<T>({&a, &b}));
  if (result.requires_grad()) {
    auto on = result.node_ptr(), an = a.node_ptr(), bn = b.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      if (!g) return;
      if (auto* ga = in_grad(an)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i];
      }
      if (auto* gb = in_grad(bn)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*gb)[i] += (*g)[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Tensor<T> result = tape.make_output("sub", a.shape(), std::move(out), any_grad<T>({&a, &b}));
  if (result.requires_grad()) {
    auto on = result.node_ptr(), an = a.node_ptr(), bn = b.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      if (!g) return;
      if (auto* ga = in_grad(an)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i];
      }
      if (auto* gb = in_grad(bn)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*gb)[i] -= (*g)[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& input, T factor) {
  std::vector<T> out(input.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * input.data()[i];
  Tensor<T> result = tape.make_output("scale", input.shape(), std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < g->size(); ++i) (*gx)[i] += factor * (*g)[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mul_const(Tape<T>& tape, const Tensor<T>& input, std::span<const T> factors) {
  require(factors.size() == input.size(), "mul_const: factor count must equal element count");
  auto f = std::make_shared<std::vector<T>>(factors.begin(), factors.end());
  std::vector<T> out(input.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*f)[i] * input.data()[i];
  Tensor<T> result = tape.make_output("mul_const", input.shape(), std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < g->size(); ++i) (*gx)[i] += (*f)[i] * (*g)[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& input, Shape shape) {
  require(shape_size(shape) == input.size(),
          "reshape: cannot view " + shape_string(input.shape()) + " as " + shape_string(shape));
  std::vector<T> out(input.data().begin(), input.data().end());
  Tensor<T> result = tape.make_output("reshape", std::move(shape), std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < g->size(); ++i) (*gx)[i] += (*g)[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat_rows(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == b.rank() && std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1),
          "concat_rows: trailing dimensions differ " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<T> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  Tensor<T> result = tape.make_output("concat_rows", std::move(shape), std::move(out), any_grad<T>({&a, &b}));
  if (result.requires_grad()) {
    auto on = result.node_ptr(), an = a.node_ptr(), bn = b.node_ptr();
    const std::size_t na = a.size();
    tape.record([=]() {
      const auto* g = out_grad(on);
      if (!g) return;
      if (auto* ga = in_grad(an)) {
        for (std::size_t i = 0; i < na; ++i) (*ga)[i] += (*g)[i];
      }
      if (auto* gb = in_grad(bn)) {
        for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += (*g)[na + i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& input, std::size_t begin, std::size_t end) {
  require(begin < end && end <= input.dim(0), "slice_rows: invalid range");
  const std::size_t row = input.size() / input.dim(0);
  Shape shape = input.shape();
  shape[0] = end - begin;
  std::vector<T> out(input.data().begin() + begin * row, input.data().begin() + end * row);
  Tensor<T> result = tape.make_output("slice_rows", std::move(shape), std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    const std::size_t off = begin * row;
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < g->size(); ++i) (*gx)[off + i] += (*g)[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "concat_cols");
  require_rank(b.shape(), 2, "concat_cols");
  require(a.dim(0) == b.dim(0), "concat_cols: row counts differ");
  const std::size_t N = a.dim(0), p = a.dim(1), q = b.dim(1);
  std::vector<T> out(N * (p + q));
  for (std::size_t i = 0; i < N; ++i) {
    std::copy_n(a.data().data() + i * p, p, out.data() + i * (p + q));
    std::copy_n(b.data().data() + i * q, q, out.data() + i * (p + q) + p);
  }
  Tensor<T> result = tape.make_output("concat_cols", {N, p + q}, std::move(out), any_grad<T>({&a, &b}));
  if (result.requires_grad()) {
    auto on = result.node_ptr(), an = a.node_ptr(), bn = b.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      if (!g) return;
      auto* ga = in_grad(an);
      auto* gb = in_grad(bn);
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < p; ++j) {
          if (ga) (*ga)[i * p + j] += (*g)[i * (p + q) + j];
        }
        for (std::size_t j = 0; j < q; ++j) {
          if (gb) (*gb)[i * q + j] += (*g)[i * (p + q) + p + j];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> row_divide(Tape<T>& tape, const Tensor<T>& input, std::span<const T> divisors) {
  const std::size_t N = input.dim(0);
  require(divisors.size() == N, "row_divide: need one divisor per row");
  const std::size_t row = input.size() / N;
  auto div = std::make_shared<std::vector<T>>(divisors.begin(), divisors.end());
  std::vector<T> out(input.size());
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < row; ++j) out[i * row + j] = input.data()[i * row + j] / (*div)[i];
  }
  Tensor<T> result = tape.make_output("row_divide", input.shape(), std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < row; ++j) (*gx)[i * row + j] += (*g)[i * row + j] / (*div)[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> matmul_const(Tape<T>& tape, std::span<const T> matrix, const Tensor<T>& input) {
  require_rank(input.shape(), 2, "matmul_const");
  const std::size_t N = input.dim(0), d = input.dim(1);
  require(matrix.size() == N * N, "matmul_const: matrix must be [N,N] for N input rows");
  auto mat = std::make_shared<std::vector<T>>(matrix.begin(), matrix.end());
  std::vector<T> out(N * d, T(0));
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 0; k < N; ++k) {
      const T w = (*mat)[i * N + k];
      if (w == T(0)) continue;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += w * input.data()[k * d + j];
    }
  }
  Tensor<T> result = tape.make_output("matmul_const", {N, d}, std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t k = 0; k < N; ++k) {
          const T w = (*mat)[i * N + k];
          if (w == T(0)) continue;
          for (std::size_t j = 0; j < d; ++j) (*gx)[k * d + j] += w * (*g)[i * d + j];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> tile_rows(Tape<T>& tape, const Tensor<T>& vec, std::size_t n) {
  require(vec.rank() == 1 && n > 0, "tile_rows: expects a vector and n > 0");
  const std::size_t d = vec.size();
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < n; ++i) std::copy(vec.data().begin(), vec.data().end(), out.begin() + i * d);
  Tensor<T> result = tape.make_output("tile_rows", {n, d}, std::move(out), vec.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = vec.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) (*gx)[j] += (*g)[i * d + j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> affine_columns(Tape<T>& tape, const Tensor<T>& input, std::span<const T> shift, std::span<const T> scale) {
  require_rank(input.shape(), 2, "affine_columns");
  const std::size_t N = input.dim(0), d = input.dim(1);
  require(shift.size() == d && scale.size() == d, "affine_columns: need one shift/scale per column");
  auto sc = std::make_shared<std::vector<T>>(scale.begin(), scale.end());
  std::vector<T> out(N * d);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (input.data()[i * d + j] - shift[j]) * scale[j];
  }
  Tensor<T> result = tape.make_output("affine_columns", {N, d}, std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < d; ++j) (*gx)[i * d + j] += (*g)[i * d + j] * (*sc)[j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels,
                                std::span<const T> class_weights) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  require(labels.size() == N, "softmax_cross_entropy: need one label per row");
  require(class_weights.size() == C, "softmax_cross_entropy: need one weight per class");
  auto probs = std::make_shared<std::vector<double>>(N * C);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  auto w = std::make_shared<std::vector<double>>(class_weights.begin(), class_weights.end());
  double total = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw ShapeError("softmax_cross_entropy: label out of range");
    const T* row = logits.data().data() + i * C;
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) (*probs)[i * C + c] = std::exp(row[c] - mx) / z;
    const double wi = (*w)[y];
    total += wi * -(row[y] - mx - std::log(z));
    wsum += wi;
  }
  if (!(wsum > 0.0)) throw AutodiffError("softmax_cross_entropy: total class weight must be positive");
  Tensor<T> result =
      tape.make_output("softmax_cross_entropy", {1}, {static_cast<T>(total / wsum)}, logits.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = logits.node_ptr();
    tape.record([=]() {
      const auto* g = out_grad(on);
      auto* gx = in_grad(xn);
      if (!g || !gx) return;
      for (std::size_t i = 0; i < N; ++i) {
        const int y = (*lab)[i];
        const double k = (*g)[0] * (*w)[y] / wsum;
        for (std::size_t c = 0; c < C; ++c) {
          const double target = static_cast<int>(c) == y ? 1.0 : 0.0;
          (*gx)[i * C + c] += static_cast<T>(k * ((*probs)[i * C + c] - target));
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------

#define LNE_INSTANTIATE_OPS(T)                                                                                    \
  template Tensor<T> conv2d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> leaky_relu(Tape<T>&, const Tensor<T>&, T);                                                   \
  template Tensor<T> maxpool2(Tape<T>&, const Tensor<T>&);                                                        \
  template Tensor<T> upsample2(Tape<T>&, const Tensor<T>&);                                                       \
  template Tensor<T> batchnorm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormStats<T>&, \
                               BatchNormMode, double, double);                                                    \
  template Tensor<T> dense(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> cosine_similarity(Tape<T>&, const Tensor<T>&, const Tensor<T>&, T);                          \
  template Tensor<T> cosine_rows(Tape<T>&, const Tensor<T>&, const Tensor<T>&, T);                                \
  template Tensor<T> mse(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                             \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                                            \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                                        \
  template Tensor<T> mul_const(Tape<T>&, const Tensor<T>&, std::span<const T>);                                   \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                                  \
  template Tensor<T> concat_rows(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> slice_rows(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);                            \
  template Tensor<T> concat_cols(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> row_divide(Tape<T>&, const Tensor<T>&, std::span<const T>);                                  \
  template Tensor<T> matmul_const(Tape<T>&, std::span<const T>, const Tensor<T>&);                                \
  template Tensor<T> tile_rows(Tape<T>&, const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> affine_columns(Tape<T>&, const Tensor<T>&, std::span<const T>, std::span<const T>);          \
  template Tensor<T> softmax_cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const int>, std::span<const T>);

LNE_INSTANTIATE_OPS(float)
LNE_INSTANTIATE_OPS(double)

#undef LNE_INSTANTIATE_OPS

}  // namespace lne::ad
