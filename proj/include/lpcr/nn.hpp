#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lpcr/parallel.hpp"
#include "lpcr/rng.hpp"
#include "lpcr/tensor.hpp"

// Minimal dense CNN kernel: conv3x3 (same padding), spatial batchnorm, relu,
// 2x2/stride-2 maxpool, fully connected, inverted dropout, softmax. Forward,
// backward, and SGD with classic momentum. Everything is templated on the
// scalar type: float for production, double for the finite-difference
// gradient checker.

namespace lpcr {

enum class LayerKind { Conv3x3, BatchNorm, Relu, MaxPool2, Fc, Dropout, Softmax };

struct LayerSpec {
  LayerKind kind;
  int units = 0;      // conv: filter count; fc: neuron count
  double rate = 0.0;  // dropout keep-out probability, in [0,1)
};

const char* layer_kind_name(LayerKind k);

struct LayerDims {
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0, out_h = 0, out_w = 0;
};

template <typename T>
struct LayerT {
  LayerSpec spec;
  TensorT<T> w, b;                        // conv / fc
  TensorT<T> gamma, beta;                 // batchnorm (trained)
  TensorT<T> run_mean, run_var;           // batchnorm (running state)
};

template <typename T>
struct NetT {
  int in_c = 0, in_h = 0, in_w = 0;
  std::vector<LayerT<T>> layers;
  std::vector<LayerDims> dims;

  int out_dim() const { return dims.empty() ? 0 : dims.back().out_c; }
  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers)
      n += l.w.numel() + l.b.numel() + l.gamma.numel() + l.beta.numel();
    return n;
  }
};

using Net = NetT<float>;

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

enum class Mode { Train, Eval };

struct FwdOpt {
  Mode mode = Mode::Eval;
  bool freeze_bn = false;     // use running stats even in train mode
  bool update_running = true; // only honored in unfrozen train mode
  Rng* dropout_rng = nullptr; // required when a dropout layer is active
  int threads = 1;
};

template <typename T>
struct ForwardCacheT {
  std::vector<TensorT<T>> acts;                      // acts[0] = input
  std::vector<std::vector<T>> bn_mean, bn_invstd;    // per layer, per channel
  std::vector<std::vector<std::uint8_t>> drop_mask;  // per layer, per element
  std::vector<std::vector<int>> pool_arg;            // per layer, source offsets
  bool bn_used_batch_stats = false;
};

using ForwardCache = ForwardCacheT<float>;

// ---------------------------------------------------------------------------
// Construction

template <typename T>
NetT<T> make_net(int in_c, int in_h, int in_w, const std::vector<LayerSpec>& specs);

// He-normal conv/fc weights, zero biases, unit gamma / zero beta. Each layer
// draws from its own child stream, so widths of one layer do not shift
// another layer's draws.
template <typename T>
void init_params(NetT<T>& net, const Rng& rng);

template <typename T>
struct ParamRef {
  int layer;
  const char* name;
  TensorT<T>* tensor;
  bool trainable;
};

template <typename T>
std::vector<ParamRef<T>> param_refs(NetT<T>& net);

// Gradients/velocity are aligned with the trainable entries of param_refs.
template <typename T>
std::vector<TensorT<T>> make_grad_slots(const NetT<T>& net);

// ---------------------------------------------------------------------------
// Forward / backward

// Runs all layers; a trailing Softmax layer outputs probabilities. Shape
// errors name the offending layer index. Train mode with an active dropout
// layer requires opt.dropout_rng.
template <typename T>
TensorT<T> forward(NetT<T>& net, const TensorT<T>& x, const FwdOpt& opt,
                   ForwardCacheT<T>* cache = nullptr);

template <typename T>
struct LossGrad {
  double loss = 0;
  std::vector<TensorT<T>> grads;     // aligned with trainable param_refs
  TensorT<T> input_grad;             // d loss / d input (for FGSM)
  std::vector<int> predictions;
};

// Mean softmax cross-entropy over the batch. A trailing Softmax layer is
// differentiated analytically through its logits. Empty batches and labels
// outside [0, out_dim) are rejected.
template <typename T>
LossGrad<T> loss_and_grad(NetT<T>& net, const TensorT<T>& x,
                          const std::vector<int>& labels, const FwdOpt& opt,
                          bool want_input_grad = false);

// v <- momentum * v + g;  p <- p - lr * v
template <typename T>
void sgd_momentum_step(NetT<T>& net, std::vector<TensorT<T>>& velocity,
                       const std::vector<TensorT<T>>& grads, double lr, double momentum);

// Row-wise softmax of a (N, D) tensor.
template <typename T>
void softmax_rows(const T* in, int n, int d, T* out);

int argmax_row(const float* row, int d);
int argmax_row(const double* row, int d);

// ---------------------------------------------------------------------------
// Gradient checking (double precision)

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;  // max |a-n| / max(|a|,|n|,1e-8)
  double max_abs_err = 0;
  // Like max_rel_err, but elements where analytic and numeric agree within
  // 1e-7 absolute count as zero. A conv bias feeding batchnorm has an exactly
  // zero gradient; fd noise against the 1e-8 floor would otherwise read as a
  // bogus relative error.
  double max_effective_err = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0;            // over max_rel_err
  double worst_effective = 0;  // over max_effective_err
};

// Central finite differences over every parameter element. Rejects nets with
// an active dropout layer (the check needs a deterministic forward).
// inject_grad_error is a test hook: it corrupts the first analytic gradient
// element so the failure path of the check itself can be exercised.
GradCheckReport gradient_check(NetT<double>& net, const TensorT<double>& x,
                               const std::vector<int>& labels, double eps,
                               bool freeze_bn = true, double inject_grad_error = 0.0);

// ---------------------------------------------------------------------------
// Implementation

namespace detail {

// Adds the three kx taps of one input row into output columns [x0, x1).
// Every conv path (full plane, bounded rect) funnels through this helper, so
// per-element accumulation order is identical everywhere and a region
// recompute reproduces the full pass bit for bit.
template <typename T>
inline void conv_row_update(const T* __restrict__ a, T w0, T w1, T w2, T* __restrict__ o,
                            int x0, int x1, int w) {
  int x = x0;
  if (x == 0 && x < x1) {
    o[0] += w1 * a[0];
    if (w > 1) o[0] += w2 * a[1];
    ++x;
  }
  int xm = std::min(x1, w - 1);
  for (; x < xm; ++x) {
    o[x] += w0 * a[x - 1];
    o[x] += w1 * a[x];
    o[x] += w2 * a[x + 1];
  }
  if (x1 == w && x == w - 1 && x >= x0) {
    o[x] += w0 * a[x - 1];
    o[x] += w1 * a[x];
  }
}

template <typename T>
void conv3x3_plane(const T* in, int c_in, int h, int w, const T* w_oc, T bias, T* out) {
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < plane; ++i) out[i] = bias;
  for (int ic = 0; ic < c_in; ++ic) {
    const T* wk = w_oc + ic * 9;
    const T* inp = in + ic * plane;
    for (int ky = -1; ky <= 1; ++ky) {
      int y0 = std::max(0, -ky), y1 = h - std::max(0, ky);
      T w0 = wk[(ky + 1) * 3 + 0], w1 = wk[(ky + 1) * 3 + 1], w2 = wk[(ky + 1) * 3 + 2];
      for (int y = y0; y < y1; ++y)
        conv_row_update(inp + static_cast<std::int64_t>(y + ky) * w,
                        w0, w1, w2, out + static_cast<std::int64_t>(y) * w, 0, w, w);
    }
  }
}

// Fixed-order unrolled dot product: sixteen independent lanes combined in a
// fixed order. The lane layout matches what the vectorizer emits, so the
// result is deterministic and identical across call sites.
template <typename T>
inline T dot_span(const T* __restrict__ a, const T* __restrict__ b, int n) {
  constexpr int kLanes = 16;
  T s[kLanes] = {};
  int i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int k = 0; k < kLanes; ++k) s[k] += a[i + k] * b[i + k];
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  T total = 0;
  for (int k = 0; k < kLanes; ++k) total += s[k];
  return total + tail;
}

}  // namespace detail

}  // namespace lpcr

#include "lpcr/nn_impl.hpp"
