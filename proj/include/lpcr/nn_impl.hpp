#pragma once

// Template bodies for nn.hpp. Include nn.hpp, not this header.

#include <cassert>

#include "lpcr/errors.hpp"
#include "lpcr/nn.hpp"

namespace lpcr {

template <typename T>
NetT<T> make_net(int in_c, int in_h, int in_w, const std::vector<LayerSpec>& specs) {
  if (in_c <= 0 || in_h <= 0 || in_w <= 0) throw ConfigError("net: bad input dims");
  if (specs.empty()) throw ConfigError("net: no layers");

  NetT<T> net;
  net.in_c = in_c;
  net.in_h = in_h;
  net.in_w = in_w;

  int c = in_c, h = in_h, w = in_w;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    if (s.kind == LayerKind::Softmax && i + 1 != specs.size())
      throw ConfigError("net: softmax must be the final layer");

    LayerT<T> layer;
    layer.spec = s;
    LayerDims d;
    d.in_c = c;
    d.in_h = h;
    d.in_w = w;
    switch (s.kind) {
      case LayerKind::Conv3x3:
        if (s.units <= 0) throw ConfigError("net: conv filter count must be positive");
        if (h == 1 && w == 1 && c != in_c && i > 0 && specs[i - 1].kind == LayerKind::Fc)
          throw ConfigError("net: conv after fc is not supported");
        layer.w = TensorT<T>({s.units, c, 3, 3});
        layer.b = TensorT<T>({s.units});
        c = s.units;
        break;
      case LayerKind::BatchNorm:
        layer.gamma = TensorT<T>({c});
        layer.beta = TensorT<T>({c});
        layer.run_mean = TensorT<T>({c});
        layer.run_var = TensorT<T>({c});
        break;
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool2:
        if (h / 2 < 1 || w / 2 < 1)
          throw ConfigError("net: maxpool at layer " + std::to_string(i) + " would produce an empty map");
        h /= 2;
        w /= 2;
        break;
      case LayerKind::Fc: {
        if (s.units <= 0) throw ConfigError("net: fc width must be positive");
        int in_features = c * h * w;
        layer.w = TensorT<T>({s.units, in_features});
        layer.b = TensorT<T>({s.units});
        c = s.units;
        h = 1;
        w = 1;
        break;
      }
      case LayerKind::Dropout:
        if (s.rate < 0 || s.rate >= 1) throw ConfigError("net: dropout rate must be in [0,1)");
        break;
      case LayerKind::Softmax:
        if (h != 1 || w != 1) throw ConfigError("net: softmax requires a flat input");
        break;
    }
    d.out_c = c;
    d.out_h = h;
    d.out_w = w;
    net.dims.push_back(d);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

template <typename T>
void init_params(NetT<T>& net, const Rng& rng) {
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto& l = net.layers[li];
    Rng r = rng.split(li);
    switch (l.spec.kind) {
      case LayerKind::Conv3x3: {
        double std = std::sqrt(2.0 / (static_cast<double>(net.dims[li].in_c) * 9.0));
        for (auto& v : l.w.data) v = static_cast<T>(std * r.next_normal());
        l.b.fill(T(0));
        break;
      }
      case LayerKind::Fc: {
        double std = std::sqrt(2.0 / static_cast<double>(l.w.shape[1]));
        for (auto& v : l.w.data) v = static_cast<T>(std * r.next_normal());
        l.b.fill(T(0));
        break;
      }
      case LayerKind::BatchNorm:
        l.gamma.fill(T(1));
        l.beta.fill(T(0));
        l.run_mean.fill(T(0));
        l.run_var.fill(T(1));
        break;
      default:
        break;
    }
  }
}

template <typename T>
std::vector<ParamRef<T>> param_refs(NetT<T>& net) {
  std::vector<ParamRef<T>> refs;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto& l = net.layers[li];
    int i = static_cast<int>(li);
    switch (l.spec.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Fc:
        refs.push_back({i, "w", &l.w, true});
        refs.push_back({i, "b", &l.b, true});
        break;
      case LayerKind::BatchNorm:
        refs.push_back({i, "gamma", &l.gamma, true});
        refs.push_back({i, "beta", &l.beta, true});
        refs.push_back({i, "run_mean", &l.run_mean, false});
        refs.push_back({i, "run_var", &l.run_var, false});
        break;
      default:
        break;
    }
  }
  return refs;
}

template <typename T>
std::vector<TensorT<T>> make_grad_slots(const NetT<T>& net) {
  std::vector<TensorT<T>> slots;
  for (const auto& l : net.layers) {
    switch (l.spec.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Fc:
        slots.emplace_back(l.w.shape);
        slots.emplace_back(l.b.shape);
        break;
      case LayerKind::BatchNorm:
        slots.emplace_back(l.gamma.shape);
        slots.emplace_back(l.beta.shape);
        break;
      default:
        break;
    }
  }
  return slots;
}

namespace detail {

// Planes narrower than this use the im2col path: per-row updates on very
// short rows are all loop overhead, while a (ic,ky,kx)-ordered column dotted
// with a weight row vectorizes over the channel axis.
constexpr int kNarrowPlaneWidth = 16;

// Column of the 3x3 neighborhood of (y, x), ordered (ic, ky, kx), zero padded.
// Both the full pass and the patched-region recompute build columns with this
// function and reduce them with dot_span, so they agree bit for bit.
template <typename T>
inline void im2col_at(const T* in, int c_in, int h, int w, int y, int x, T* __restrict__ col) {
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  int k = 0;
  for (int ic = 0; ic < c_in; ++ic) {
    const T* inp = in + ic * plane;
    for (int ky = -1; ky <= 1; ++ky) {
      int yy = y + ky;
      if (yy < 0 || yy >= h) {
        col[k] = T(0);
        col[k + 1] = T(0);
        col[k + 2] = T(0);
        k += 3;
        continue;
      }
      const T* row = inp + static_cast<std::int64_t>(yy) * w;
      col[k++] = x > 0 ? row[x - 1] : T(0);
      col[k++] = row[x];
      col[k++] = x + 1 < w ? row[x + 1] : T(0);
    }
  }
}

template <typename T>
void conv_forward(const LayerT<T>& l, const LayerDims& d, const TensorT<T>& in,
                  TensorT<T>& out, int n, int threads) {
  std::int64_t in_plane = static_cast<std::int64_t>(d.in_h) * d.in_w;
  std::int64_t out_plane = in_plane;  // same padding
  const int oc = d.out_c;
  const int kdim = d.in_c * 9;

  if (d.in_w < kNarrowPlaneWidth) {
    parallel_for(0, n, threads, [&](int ni) {
      const T* inp = in.ptr() + ni * d.in_c * in_plane;
      std::vector<T> col(static_cast<std::size_t>(out_plane) * kdim);
      for (int y = 0; y < d.in_h; ++y)
        for (int x = 0; x < d.in_w; ++x)
          im2col_at(inp, d.in_c, d.in_h, d.in_w, y, x,
                    col.data() + (static_cast<std::int64_t>(y) * d.in_w + x) * kdim);
      for (int o = 0; o < oc; ++o) {
        const T* wr = l.w.ptr() + static_cast<std::int64_t>(o) * kdim;
        T bj = l.b.data[o];
        T* outp = out.ptr() + (static_cast<std::int64_t>(ni) * oc + o) * out_plane;
        for (std::int64_t m = 0; m < out_plane; ++m)
          outp[m] = bj + dot_span(wr, col.data() + m * kdim, kdim);
      }
    });
    return;
  }

  parallel_for(0, n * oc, threads, [&](int task) {
    int ni = task / oc, o = task % oc;
    const T* inp = in.ptr() + ni * d.in_c * in_plane;
    T* outp = out.ptr() + (static_cast<std::int64_t>(ni) * oc + o) * out_plane;
    conv3x3_plane(inp, d.in_c, d.in_h, d.in_w, l.w.ptr() + static_cast<std::int64_t>(o) * d.in_c * 9,
                  l.b.data[o], outp);
  });
}

template <typename T>
void conv_backward(const LayerT<T>& l, const LayerDims& d, const TensorT<T>& in,
                   const TensorT<T>& gout, TensorT<T>& gin, TensorT<T>& gw, TensorT<T>& gb,
                   int n, int threads) {
  const int h = d.in_h, w = d.in_w;
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const int ci = d.in_c, co = d.out_c;
  const bool narrow = w < kNarrowPlaneWidth;

  // d loss / d input: din[y][x] = sum_(oc,ky,kx) w[ky][kx] * gout[y-ky][x-kx];
  // taps outside gout contribute nothing (same-padding conv).
  if (narrow) {
    // Flipped-kernel conv as weight-row x gout-column dots. Wt rows are laid
    // out (oc, qy, qx) to match im2col_at columns over gout.
    const int k2 = co * 9;
    std::vector<T> wt(static_cast<std::size_t>(ci) * k2);
    for (int ic = 0; ic < ci; ++ic)
      for (int o = 0; o < co; ++o)
        for (int qy = 0; qy < 3; ++qy)
          for (int qx = 0; qx < 3; ++qx)
            wt[(static_cast<std::size_t>(ic) * co + o) * 9 + qy * 3 + qx] =
                l.w.data[((static_cast<std::int64_t>(o) * ci + ic) * 3 + (2 - qy)) * 3 + (2 - qx)];
    parallel_for(0, n, threads, [&](int ni) {
      const T* gop = gout.ptr() + static_cast<std::int64_t>(ni) * co * plane;
      std::vector<T> col(static_cast<std::size_t>(plane) * k2);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          im2col_at(gop, co, h, w, y, x, col.data() + (static_cast<std::int64_t>(y) * w + x) * k2);
      for (int ic = 0; ic < ci; ++ic) {
        const T* wr = wt.data() + static_cast<std::size_t>(ic) * k2;
        T* gip = gin.ptr() + (static_cast<std::int64_t>(ni) * ci + ic) * plane;
        for (std::int64_t m = 0; m < plane; ++m) gip[m] = dot_span(wr, col.data() + m * k2, k2);
      }
    });
  } else {
    parallel_for(0, n * ci, threads, [&](int task) {
      int ni = task / ci, ic = task % ci;
      T* gip = gin.ptr() + (static_cast<std::int64_t>(ni) * ci + ic) * plane;
      for (std::int64_t i = 0; i < plane; ++i) gip[i] = T(0);
      for (int o = 0; o < co; ++o) {
        const T* gop = gout.ptr() + (static_cast<std::int64_t>(ni) * co + o) * plane;
        const T* wk = l.w.ptr() + (static_cast<std::int64_t>(o) * ci + ic) * 9;
        for (int ky = -1; ky <= 1; ++ky) {
          // din row y reads gout row y-ky; reversed kx taps map onto the row
          // helper with the kx weights swapped.
          int y0 = std::max(0, ky), y1 = h + std::min(0, ky);
          T w0 = wk[(ky + 1) * 3 + 2], w1 = wk[(ky + 1) * 3 + 1], w2 = wk[(ky + 1) * 3 + 0];
          for (int y = y0; y < y1; ++y)
            conv_row_update(gop + static_cast<std::int64_t>(y - ky) * w, w0, w1, w2,
                            gip + static_cast<std::int64_t>(y) * w, 0, w, w);
        }
      }
    });
  }

  // d loss / d weights, bias
  if (narrow) {
    const int kdim = ci * 9;
    std::vector<double> acc(static_cast<std::size_t>(co) * kdim, 0.0);
    std::vector<T> colk(static_cast<std::size_t>(kdim) * plane);  // k-major
    std::vector<T> col(static_cast<std::size_t>(plane) * kdim);
    for (int ni = 0; ni < n; ++ni) {
      const T* inp = in.ptr() + static_cast<std::int64_t>(ni) * ci * plane;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          im2col_at(inp, ci, h, w, y, x, col.data() + (static_cast<std::int64_t>(y) * w + x) * kdim);
      for (std::int64_t m = 0; m < plane; ++m)
        for (int k = 0; k < kdim; ++k)
          colk[static_cast<std::size_t>(k) * plane + m] = col[m * kdim + k];
      parallel_for(0, co, threads, [&](int o) {
        const T* gop = gout.ptr() + (static_cast<std::int64_t>(ni) * co + o) * plane;
        for (int k = 0; k < kdim; ++k)
          acc[static_cast<std::size_t>(o) * kdim + k] += static_cast<double>(
              dot_span(gop, colk.data() + static_cast<std::size_t>(k) * plane, static_cast<int>(plane)));
      });
    }
    for (std::size_t i = 0; i < acc.size(); ++i) gw.data[i] = static_cast<T>(acc[i]);
  } else {
    parallel_for(0, co, threads, [&](int o) {
      for (int ic = 0; ic < ci; ++ic) {
        for (int ky = -1; ky <= 1; ++ky) {
          int y0 = std::max(0, -ky), y1 = h - std::max(0, ky);
          for (int kx = -1; kx <= 1; ++kx) {
            int x0 = std::max(0, -kx), x1 = w - std::max(0, kx);
            double acc = 0;
            for (int ni = 0; ni < n; ++ni) {
              const T* gop = gout.ptr() + (static_cast<std::int64_t>(ni) * co + o) * plane;
              const T* inp = in.ptr() + (static_cast<std::int64_t>(ni) * ci + ic) * plane;
              for (int y = y0; y < y1; ++y)
                acc += static_cast<double>(
                    dot_span(gop + static_cast<std::int64_t>(y) * w + x0,
                             inp + static_cast<std::int64_t>(y + ky) * w + x0 + kx, x1 - x0));
            }
            gw.data[((static_cast<std::int64_t>(o) * ci + ic) * 3 + (ky + 1)) * 3 + (kx + 1)] =
                static_cast<T>(acc);
          }
        }
      }
    });
  }
  parallel_for(0, co, threads, [&](int o) {
    double bacc = 0;
    for (int ni = 0; ni < n; ++ni) {
      const T* gop = gout.ptr() + (static_cast<std::int64_t>(ni) * co + o) * plane;
      for (std::int64_t i = 0; i < plane; ++i) bacc += static_cast<double>(gop[i]);
    }
    gb.data[o] = static_cast<T>(bacc);
  });
}

template <typename T>
void bn_forward(LayerT<T>& l, const LayerDims& d, const TensorT<T>& in, TensorT<T>& out,
                int n, const FwdOpt& opt, std::vector<T>* mean_out, std::vector<T>* invstd_out,
                bool* used_batch) {
  const int c = d.in_c;
  std::int64_t plane = static_cast<std::int64_t>(d.in_h) * d.in_w;
  std::int64_t m = static_cast<std::int64_t>(n) * plane;
  bool batch_stats = (opt.mode == Mode::Train) && !opt.freeze_bn;
  if (used_batch) *used_batch = batch_stats;

  std::vector<T> mean(c), invstd(c);
  std::vector<double> var(c);
  if (batch_stats) {
    parallel_for(0, c, opt.threads, [&](int ch) {
      double sum = 0;
      for (int ni = 0; ni < n; ++ni) {
        const T* p = in.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) sum += static_cast<double>(p[i]);
      }
      double mu = sum / static_cast<double>(m);
      double vs = 0;
      for (int ni = 0; ni < n; ++ni) {
        const T* p = in.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          double dv = static_cast<double>(p[i]) - mu;
          vs += dv * dv;
        }
      }
      double v = vs / static_cast<double>(m);
      mean[ch] = static_cast<T>(mu);
      var[ch] = v;
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(v + kBnEps));
    });
    if (opt.update_running) {
      for (int ch = 0; ch < c; ++ch) {
        double unbiased = m > 1 ? var[ch] * static_cast<double>(m) / static_cast<double>(m - 1)
                                : var[ch];
        l.run_mean.data[ch] = static_cast<T>((1.0 - kBnMomentum) * l.run_mean.data[ch] +
                                             kBnMomentum * mean[ch]);
        l.run_var.data[ch] = static_cast<T>((1.0 - kBnMomentum) * l.run_var.data[ch] +
                                            kBnMomentum * unbiased);
      }
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = l.run_mean.data[ch];
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(l.run_var.data[ch]) + kBnEps));
    }
  }

  parallel_for(0, c, opt.threads, [&](int ch) {
    T mu = mean[ch], iv = invstd[ch], g = l.gamma.data[ch], b = l.beta.data[ch];
    for (int ni = 0; ni < n; ++ni) {
      const T* p = in.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
      T* q = out.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * iv * g + b;
    }
  });

  if (mean_out) *mean_out = std::move(mean);
  if (invstd_out) *invstd_out = std::move(invstd);
}

template <typename T>
void bn_backward(const LayerT<T>& l, const LayerDims& d, const TensorT<T>& in,
                 const std::vector<T>& mean, const std::vector<T>& invstd, bool batch_stats,
                 const TensorT<T>& gout, TensorT<T>& gin, TensorT<T>& dgamma, TensorT<T>& dbeta,
                 int n, int threads) {
  const int c = d.in_c;
  std::int64_t plane = static_cast<std::int64_t>(d.in_h) * d.in_w;
  std::int64_t m = static_cast<std::int64_t>(n) * plane;
  parallel_for(0, c, threads, [&](int ch) {
    T mu = mean[ch], iv = invstd[ch];
    double sum_g = 0, sum_gx = 0;
    for (int ni = 0; ni < n; ++ni) {
      const T* gp = gout.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
      const T* ip = in.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        double xhat = (static_cast<double>(ip[i]) - static_cast<double>(mu)) * static_cast<double>(iv);
        sum_g += static_cast<double>(gp[i]);
        sum_gx += static_cast<double>(gp[i]) * xhat;
      }
    }
    dgamma.data[ch] = static_cast<T>(sum_gx);
    dbeta.data[ch] = static_cast<T>(sum_g);

    T g = l.gamma.data[ch];
    if (batch_stats) {
      T mean_g = static_cast<T>(sum_g / static_cast<double>(m));
      T mean_gx = static_cast<T>(sum_gx / static_cast<double>(m));
      for (int ni = 0; ni < n; ++ni) {
        const T* gp = gout.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
        const T* ip = in.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
        T* qp = gin.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          T xhat = (ip[i] - mu) * iv;
          qp[i] = g * iv * (gp[i] - mean_g - xhat * mean_gx);
        }
      }
    } else {
      for (int ni = 0; ni < n; ++ni) {
        const T* gp = gout.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
        T* qp = gin.ptr() + (static_cast<std::int64_t>(ni) * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) qp[i] = gp[i] * g * iv;
      }
    }
  });
}

// Weight rows are streamed once per batch (j outer); activations stay cache
// resident. The single-row expression is shared with the patched evaluator.
template <typename T>
void fc_forward(const LayerT<T>& l, const TensorT<T>& in, TensorT<T>& out, int n, int threads) {
  const int dout = l.w.shape[0], din = l.w.shape[1];
  parallel_for(0, dout, threads, [&](int j) {
    const T* wr = l.w.ptr() + static_cast<std::int64_t>(j) * din;
    T bj = l.b.data[j];
    for (int ni = 0; ni < n; ++ni) {
      const T* x = in.ptr() + static_cast<std::int64_t>(ni) * din;
      out.ptr()[static_cast<std::int64_t>(ni) * dout + j] = bj + dot_span(wr, x, din);
    }
  });
}

template <typename T>
void fc_backward(const LayerT<T>& l, const TensorT<T>& in, const TensorT<T>& gout,
                 TensorT<T>& gin, TensorT<T>& gw, TensorT<T>& gb, int n, int threads) {
  const int dout = l.w.shape[0], din = l.w.shape[1];
  // d loss / d input, blocked over the batch so each thread streams the
  // weight matrix once while its gin rows stay in cache.
  int blocks = std::min(threads < 1 ? 1 : threads, n);
  int chunk = (n + blocks - 1) / blocks;
  parallel_for(0, blocks, threads, [&](int bi) {
    int n0 = bi * chunk, n1 = std::min(n, n0 + chunk);
    for (int ni = n0; ni < n1; ++ni) {
      T* gi = gin.ptr() + static_cast<std::int64_t>(ni) * din;
      for (int i = 0; i < din; ++i) gi[i] = T(0);
    }
    for (int j = 0; j < dout; ++j) {
      const T* __restrict__ wr = l.w.ptr() + static_cast<std::int64_t>(j) * din;
      for (int ni = n0; ni < n1; ++ni) {
        T gv = gout.ptr()[static_cast<std::int64_t>(ni) * dout + j];
        T* __restrict__ gi = gin.ptr() + static_cast<std::int64_t>(ni) * din;
        for (int i = 0; i < din; ++i) gi[i] += gv * wr[i];
      }
    }
  });
  parallel_for(0, dout, threads, [&](int j) {
    T* __restrict__ gwr = gw.ptr() + static_cast<std::int64_t>(j) * din;
    for (int i = 0; i < din; ++i) gwr[i] = T(0);
    double bacc = 0;
    for (int ni = 0; ni < n; ++ni) {
      T gv = gout.ptr()[static_cast<std::int64_t>(ni) * dout + j];
      const T* __restrict__ x = in.ptr() + static_cast<std::int64_t>(ni) * din;
      for (int i = 0; i < din; ++i) gwr[i] += gv * x[i];
      bacc += static_cast<double>(gv);
    }
    gb.data[j] = static_cast<T>(bacc);
  });
}

template <typename T>
void pool_forward(const LayerDims& d, const TensorT<T>& in, TensorT<T>& out,
                  std::vector<int>* argmax, int n, int threads) {
  const int c = d.in_c, oh = d.out_h, ow = d.out_w, ih = d.in_h, iw = d.in_w;
  if (argmax) argmax->assign(static_cast<std::size_t>(n) * c * oh * ow, 0);
  parallel_for(0, n * c, threads, [&](int task) {
    const T* ip = in.ptr() + static_cast<std::int64_t>(task) * ih * iw;
    T* op = out.ptr() + static_cast<std::int64_t>(task) * oh * ow;
    int* ap = argmax ? argmax->data() + static_cast<std::int64_t>(task) * oh * ow : nullptr;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        int base_y = 2 * y, base_x = 2 * x;
        T best = ip[static_cast<std::int64_t>(base_y) * iw + base_x];
        int best_k = 0;
        for (int k = 1; k < 4; ++k) {
          int yy = base_y + (k >> 1), xx = base_x + (k & 1);
          T v = ip[static_cast<std::int64_t>(yy) * iw + xx];
          if (v > best) {
            best = v;
            best_k = k;
          }
        }
        op[static_cast<std::int64_t>(y) * ow + x] = best;
        if (ap) ap[static_cast<std::int64_t>(y) * ow + x] = best_k;
      }
    }
  });
}

template <typename T>
void pool_backward(const LayerDims& d, const std::vector<int>& argmax, const TensorT<T>& gout,
                   TensorT<T>& gin, int n, int threads) {
  const int c = d.in_c, oh = d.out_h, ow = d.out_w, ih = d.in_h, iw = d.in_w;
  parallel_for(0, n * c, threads, [&](int task) {
    T* gi = gin.ptr() + static_cast<std::int64_t>(task) * ih * iw;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(ih) * iw; ++i) gi[i] = T(0);
    const T* go = gout.ptr() + static_cast<std::int64_t>(task) * oh * ow;
    const int* ap = argmax.data() + static_cast<std::int64_t>(task) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        int k = ap[static_cast<std::int64_t>(y) * ow + x];
        int yy = 2 * y + (k >> 1), xx = 2 * x + (k & 1);
        gi[static_cast<std::int64_t>(yy) * iw + xx] += go[static_cast<std::int64_t>(y) * ow + x];
      }
  });
}

}  // namespace detail

template <typename T>
void softmax_rows(const T* in, int n, int d, T* out) {
  for (int ni = 0; ni < n; ++ni) {
    const T* x = in + static_cast<std::int64_t>(ni) * d;
    T* y = out + static_cast<std::int64_t>(ni) * d;
    T mx = x[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    T sum = T(0);
    for (int i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    for (int i = 0; i < d; ++i) y[i] /= sum;
  }
}

template <typename T>
TensorT<T> forward(NetT<T>& net, const TensorT<T>& x, const FwdOpt& opt,
                   ForwardCacheT<T>* cache) {
  if (x.shape.size() != 4)
    throw ConfigError("forward: input must be a (N,C,H,W) tensor, got " + shape_str(x.shape));
  const int n = x.shape[0];
  if (n < 1) throw ConfigError("forward: empty batch");
  if (x.shape[1] != net.in_c || x.shape[2] != net.in_h || x.shape[3] != net.in_w)
    throw ConfigError("forward: shape mismatch at layer 0 (" +
                      std::string(layer_kind_name(net.layers[0].spec.kind)) + "): input " +
                      shape_str(x.shape) + " expected (N," + std::to_string(net.in_c) + "," +
                      std::to_string(net.in_h) + "," + std::to_string(net.in_w) + ")");

  std::size_t nl = net.layers.size();
  if (cache) {
    cache->acts.assign(nl + 1, TensorT<T>());
    cache->bn_mean.assign(nl, {});
    cache->bn_invstd.assign(nl, {});
    cache->drop_mask.assign(nl, {});
    cache->pool_arg.assign(nl, {});
    cache->acts[0] = x;
  }

  TensorT<T> cur_local;
  if (!cache) cur_local = x;
  for (std::size_t li = 0; li < nl; ++li) {
    LayerT<T>& l = net.layers[li];
    const LayerDims& d = net.dims[li];
    const TensorT<T>& cur = cache ? cache->acts[li] : cur_local;
    TensorT<T> out({n, d.out_c, d.out_h, d.out_w});
    switch (l.spec.kind) {
      case LayerKind::Conv3x3:
        detail::conv_forward(l, d, cur, out, n, opt.threads);
        break;
      case LayerKind::BatchNorm: {
        std::vector<T>* mp = cache ? &cache->bn_mean[li] : nullptr;
        std::vector<T>* ip = cache ? &cache->bn_invstd[li] : nullptr;
        bool used_batch = false;
        detail::bn_forward(l, d, cur, out, n, opt, mp, ip, &used_batch);
        if (cache) cache->bn_used_batch_stats = used_batch;
        break;
      }
      case LayerKind::Relu: {
        const T* p = cur.ptr();
        T* q = out.ptr();
        std::int64_t total = cur.numel();
        for (std::int64_t i = 0; i < total; ++i) q[i] = p[i] > T(0) ? p[i] : T(0);
        break;
      }
      case LayerKind::MaxPool2:
        detail::pool_forward(d, cur, out, cache ? &cache->pool_arg[li] : nullptr, n, opt.threads);
        break;
      case LayerKind::Fc:
        detail::fc_forward(l, cur, out, n, opt.threads);
        break;
      case LayerKind::Dropout: {
        bool active = opt.mode == Mode::Train && l.spec.rate > 0;
        if (!active) {
          out.data = cur.data;
        } else {
          if (!opt.dropout_rng)
            throw ConfigError("forward: dropout active in train mode but no rng provided");
          double keep = 1.0 - l.spec.rate;
          T scale = static_cast<T>(1.0 / keep);
          std::vector<std::uint8_t> mask(cur.data.size());
          for (std::size_t i = 0; i < mask.size(); ++i)
            mask[i] = opt.dropout_rng->next_unit() < keep ? 1 : 0;
          for (std::size_t i = 0; i < mask.size(); ++i)
            out.data[i] = mask[i] ? cur.data[i] * scale : T(0);
          if (cache) cache->drop_mask[li] = std::move(mask);
        }
        break;
      }
      case LayerKind::Softmax:
        softmax_rows(cur.ptr(), n, d.out_c, out.ptr());
        break;
    }
    if (cache)
      cache->acts[li + 1] = std::move(out);
    else
      cur_local = std::move(out);
  }
  return cache ? cache->acts[nl] : cur_local;
}

namespace detail {

// Cross-entropy pieces shared by loss_and_grad and the fd checker.
template <typename T>
double ce_loss_from_logits(const TensorT<T>& logits, const std::vector<int>& labels, int d,
                           TensorT<T>* dlogits, std::vector<int>* predictions) {
  const int n = logits.shape[0];
  double total = 0;
  if (dlogits) *dlogits = TensorT<T>({n, d, 1, 1});
  for (int ni = 0; ni < n; ++ni) {
    const T* row = logits.ptr() + static_cast<std::int64_t>(ni) * d;
    double mx = static_cast<double>(row[0]);
    int arg = 0;
    for (int i = 1; i < d; ++i)
      if (static_cast<double>(row[i]) > mx) {
        mx = static_cast<double>(row[i]);
        arg = i;
      }
    double sum = 0;
    for (int i = 0; i < d; ++i) sum += std::exp(static_cast<double>(row[i]) - mx);
    double lse = mx + std::log(sum);
    total += lse - static_cast<double>(row[labels[ni]]);
    if (predictions) predictions->push_back(arg);
    if (dlogits) {
      T* g = dlogits->ptr() + static_cast<std::int64_t>(ni) * d;
      for (int i = 0; i < d; ++i) {
        double p = std::exp(static_cast<double>(row[i]) - lse);
        g[i] = static_cast<T>((p - (i == labels[ni] ? 1.0 : 0.0)) / n);
      }
    }
  }
  return total / n;
}

}  // namespace detail

template <typename T>
LossGrad<T> loss_and_grad(NetT<T>& net, const TensorT<T>& x, const std::vector<int>& labels,
                          const FwdOpt& opt, bool want_input_grad) {
  if (x.shape.empty() || x.shape[0] < 1) throw ConfigError("loss: empty batch");
  const int n = x.shape[0];
  if (static_cast<int>(labels.size()) != n)
    throw ConfigError("loss: labels size does not match batch");
  const int d = net.out_dim();
  for (int l : labels)
    if (l < 0 || l >= d) throw ConfigError("loss: label out of range: " + std::to_string(l));

  ForwardCacheT<T> cache;
  forward(net, x, opt, &cache);

  std::size_t nl = net.layers.size();
  bool has_softmax = net.layers.back().spec.kind == LayerKind::Softmax;
  std::size_t logits_idx = has_softmax ? nl - 1 : nl;  // index into cache.acts
  const TensorT<T>& logits = cache.acts[logits_idx];

  LossGrad<T> result;
  TensorT<T> g;
  result.loss = detail::ce_loss_from_logits(logits, labels, d, &g, &result.predictions);
  result.grads = make_grad_slots(net);

  // Map layer index -> first grad slot.
  std::vector<int> slot_of(nl, -1);
  {
    int s = 0;
    for (std::size_t li = 0; li < nl; ++li) {
      LayerKind k = net.layers[li].spec.kind;
      if (k == LayerKind::Conv3x3 || k == LayerKind::Fc || k == LayerKind::BatchNorm) {
        slot_of[li] = s;
        s += 2;
      }
    }
  }

  int last_bwd = static_cast<int>(has_softmax ? nl - 2 : nl - 1);
  for (int li = last_bwd; li >= 0; --li) {
    LayerT<T>& l = net.layers[li];
    const LayerDims& dm = net.dims[li];
    const TensorT<T>& in_act = cache.acts[li];
    TensorT<T> gin({n, dm.in_c, dm.in_h, dm.in_w});
    switch (l.spec.kind) {
      case LayerKind::Conv3x3:
        detail::conv_backward(l, dm, in_act, g, gin, result.grads[slot_of[li]],
                              result.grads[slot_of[li] + 1], n, opt.threads);
        break;
      case LayerKind::BatchNorm:
        detail::bn_backward(l, dm, in_act, cache.bn_mean[li], cache.bn_invstd[li],
                            cache.bn_used_batch_stats, g, gin, result.grads[slot_of[li]],
                            result.grads[slot_of[li] + 1], n, opt.threads);
        break;
      case LayerKind::Relu: {
        const T* ip = in_act.ptr();
        const T* gp = g.ptr();
        T* qp = gin.ptr();
        std::int64_t total = in_act.numel();
        for (std::int64_t i = 0; i < total; ++i) qp[i] = ip[i] > T(0) ? gp[i] : T(0);
        break;
      }
      case LayerKind::MaxPool2:
        detail::pool_backward(dm, cache.pool_arg[li], g, gin, n, opt.threads);
        break;
      case LayerKind::Fc:
        detail::fc_backward(l, in_act, g, gin, result.grads[slot_of[li]],
                            result.grads[slot_of[li] + 1], n, opt.threads);
        break;
      case LayerKind::Dropout: {
        if (cache.drop_mask[li].empty()) {
          gin.data = g.data;
        } else {
          T scale = static_cast<T>(1.0 / (1.0 - l.spec.rate));
          const auto& mask = cache.drop_mask[li];
          for (std::size_t i = 0; i < mask.size(); ++i)
            gin.data[i] = mask[i] ? g.data[i] * scale : T(0);
        }
        break;
      }
      case LayerKind::Softmax:
        throw ConfigError("internal: softmax reached in backward");
    }
    g = std::move(gin);
  }
  if (want_input_grad) result.input_grad = std::move(g);
  return result;
}

template <typename T>
void sgd_momentum_step(NetT<T>& net, std::vector<TensorT<T>>& velocity,
                       const std::vector<TensorT<T>>& grads, double lr, double momentum) {
  auto refs = param_refs(net);
  std::size_t s = 0;
  for (auto& r : refs) {
    if (!r.trainable) continue;
    if (s >= grads.size() || !grads[s].same_shape(*r.tensor) || !velocity[s].same_shape(*r.tensor))
      throw ConfigError("sgd: gradient/velocity shapes do not align with params");
    T* p = r.tensor->ptr();
    T* v = velocity[s].ptr();
    const T* gp = grads[s].ptr();
    std::int64_t total = r.tensor->numel();
    for (std::int64_t i = 0; i < total; ++i) {
      v[i] = static_cast<T>(momentum) * v[i] + gp[i];
      p[i] -= static_cast<T>(lr) * v[i];
    }
    ++s;
  }
}

}  // namespace lpcr
