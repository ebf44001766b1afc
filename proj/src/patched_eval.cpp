#include "lpcr/patched_eval.hpp"

#include <cmath>
#include <cstring>

#include "lpcr/errors.hpp"
#include "lpcr/model.hpp"

namespace lpcr {

namespace {

Rect clamp_rect(Rect r, int h, int w) {
  r.y0 = std::max(0, r.y0);
  r.x0 = std::max(0, r.x0);
  r.y1 = std::min(h, r.y1);
  r.x1 = std::min(w, r.x1);
  return r;
}

Rect dilate1(const Rect& r, int h, int w) {
  return clamp_rect({r.y0 - 1, r.y1 + 1, r.x0 - 1, r.x1 + 1}, h, w);
}

Rect pool_rect(const Rect& r, int oh, int ow) {
  Rect o;
  o.y0 = r.y0 / 2;
  o.y1 = (r.y1 - 1) / 2 + 1;
  o.x0 = r.x0 / 2;
  o.x1 = (r.x1 - 1) / 2 + 1;
  return clamp_rect(o, oh, ow);
}

// Rect-restricted conv; shares detail::conv_row_update / detail::im2col_at +
// dot_span with the full pass so recomputed cells are bit-identical to a full
// forward.
void conv3x3_rect(const float* in, int c_in, int h, int w, const float* weights,
                  const float* bias, int c_out, float* out, const Rect& r) {
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  if (w < lpcr::detail::kNarrowPlaneWidth) {
    const int kdim = c_in * 9;
    float col[16 * 9 * 16];  // up to 144 in channels on narrow planes
    std::vector<float> col_heap;
    float* colp = col;
    if (kdim > static_cast<int>(sizeof(col) / sizeof(float))) {
      col_heap.resize(static_cast<std::size_t>(kdim));
      colp = col_heap.data();
    }
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x) {
        detail::im2col_at(in, c_in, h, w, y, x, colp);
        std::int64_t m = static_cast<std::int64_t>(y) * w + x;
        for (int oc = 0; oc < c_out; ++oc)
          out[oc * plane + m] =
              bias[oc] + detail::dot_span(weights + static_cast<std::int64_t>(oc) * kdim, colp, kdim);
      }
    return;
  }
  for (int oc = 0; oc < c_out; ++oc) {
    float* op = out + oc * plane;
    for (int y = r.y0; y < r.y1; ++y) {
      float* orow = op + static_cast<std::int64_t>(y) * w;
      for (int x = r.x0; x < r.x1; ++x) orow[x] = bias[oc];
    }
    const float* w_oc = weights + static_cast<std::int64_t>(oc) * c_in * 9;
    for (int ic = 0; ic < c_in; ++ic) {
      const float* wk = w_oc + ic * 9;
      const float* inp = in + ic * plane;
      for (int ky = -1; ky <= 1; ++ky) {
        int y0 = std::max(r.y0, -ky), y1 = std::min(r.y1, h - std::max(0, ky));
        float w0 = wk[(ky + 1) * 3 + 0], w1 = wk[(ky + 1) * 3 + 1], w2 = wk[(ky + 1) * 3 + 2];
        for (int y = y0; y < y1; ++y)
          detail::conv_row_update(inp + static_cast<std::int64_t>(y + ky) * w, w0, w1, w2,
                                  op + static_cast<std::int64_t>(y) * w, r.x0, r.x1, w);
      }
    }
  }
}

}  // namespace

PatchedEval::PatchedEval(Net& net, const Image& image) : net_(net), image_(image) {
  // Find where the flat stack begins and check the layout is the one we know
  // how to patch incrementally.
  std::size_t nl = net.layers.size();
  first_flat_ = static_cast<int>(nl);
  for (std::size_t i = 0; i < nl; ++i) {
    LayerKind k = net.layers[i].spec.kind;
    if (k == LayerKind::Fc) {
      first_flat_ = static_cast<int>(i);
      break;
    }
    if (k != LayerKind::Conv3x3 && k != LayerKind::BatchNorm && k != LayerKind::Relu &&
        k != LayerKind::MaxPool2) {
      fallback_full_ = true;
      break;
    }
  }
  if (!fallback_full_)
    for (std::size_t i = first_flat_; i < nl; ++i) {
      LayerKind k = net.layers[i].spec.kind;
      bool flat_ok = k == LayerKind::Fc || k == LayerKind::Relu || k == LayerKind::Dropout ||
                     (k == LayerKind::Softmax && i + 1 == nl);
      if (!flat_ok) {
        fallback_full_ = true;
        break;
      }
    }

  FwdOpt opt;
  opt.mode = Mode::Eval;
  opt.threads = 1;
  ForwardCache cache;
  Tensor x = image_to_tensor(image);
  forward(net_, x, opt, &cache);

  bool has_softmax = net.layers.back().spec.kind == LayerKind::Softmax;
  const Tensor& logits = cache.acts[has_softmax ? nl - 1 : nl];
  clean_logits_.assign(logits.data.begin(), logits.data.end());
  logits_ = clean_logits_;

  if (fallback_full_) return;

  clean_.assign(first_flat_ + 1, Tensor());
  clean_[0] = std::move(cache.acts[0]);
  for (int i = 0; i < first_flat_; ++i) clean_[i + 1] = std::move(cache.acts[i + 1]);
  scratch_ = clean_;
}

void PatchedEval::run_flat(const float* flat_in) {
  std::size_t nl = net_.layers.size();
  const float* cur = flat_in;
  std::size_t cur_n = static_cast<std::size_t>(net_.dims[first_flat_].in_c) *
                      net_.dims[first_flat_].in_h * net_.dims[first_flat_].in_w;
  for (std::size_t li = first_flat_; li < nl; ++li) {
    const auto& l = net_.layers[li];
    switch (l.spec.kind) {
      case LayerKind::Fc: {
        int dout = l.w.shape[0], din = l.w.shape[1];
        if (static_cast<std::size_t>(din) != cur_n)
          throw ConfigError("patched eval: fc input width mismatch");
        flat_tmp_b_.resize(static_cast<std::size_t>(dout));
        for (int j = 0; j < dout; ++j) {
          const float* wr = l.w.ptr() + static_cast<std::int64_t>(j) * din;
          flat_tmp_b_[j] = l.b.data[j] + detail::dot_span(wr, cur, din);
        }
        flat_tmp_a_.swap(flat_tmp_b_);
        cur = flat_tmp_a_.data();
        cur_n = static_cast<std::size_t>(dout);
        break;
      }
      case LayerKind::Relu:
        flat_tmp_b_.resize(cur_n);
        for (std::size_t i = 0; i < cur_n; ++i) flat_tmp_b_[i] = cur[i] > 0 ? cur[i] : 0.0f;
        flat_tmp_a_.swap(flat_tmp_b_);
        cur = flat_tmp_a_.data();
        break;
      case LayerKind::Dropout:
        break;  // identity in eval mode
      case LayerKind::Softmax:
        // Logits are the values entering softmax.
        logits_.assign(cur, cur + cur_n);
        return;
      default:
        throw ConfigError("patched eval: unexpected layer in flat stack");
    }
  }
  logits_.assign(cur, cur + cur_n);
}

void PatchedEval::restore(const std::vector<Rect>& rects) {
  for (std::size_t bi = 0; bi < rects.size(); ++bi) {
    const Rect& r = rects[bi];
    if (r.empty()) continue;
    Tensor& s = scratch_[bi];
    const Tensor& c = clean_[bi];
    int ch = s.shape[1], h = s.shape[2], w = s.shape[3];
    std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::size_t span = static_cast<std::size_t>(r.x1 - r.x0) * sizeof(float);
    for (int cc = 0; cc < ch; ++cc)
      for (int y = r.y0; y < r.y1; ++y) {
        std::int64_t off = cc * plane + static_cast<std::int64_t>(y) * w + r.x0;
        std::memcpy(s.ptr() + off, c.ptr() + off, span);
      }
  }
}

const std::vector<float>& PatchedEval::score_rect(const Image& patched, const Rect& edit) {
  if (fallback_full_) {
    FwdOpt opt;
    opt.mode = Mode::Eval;
    opt.threads = 1;
    ForwardCache cache;
    Tensor x = image_to_tensor(patched);
    forward(net_, x, opt, &cache);
    std::size_t nl = net_.layers.size();
    bool has_softmax = net_.layers.back().spec.kind == LayerKind::Softmax;
    const Tensor& logits = cache.acts[has_softmax ? nl - 1 : nl];
    logits_.assign(logits.data.begin(), logits.data.end());
    return logits_;
  }

  Rect r = clamp_rect(edit, image_.h, image_.w);
  if (r.empty()) {
    logits_ = clean_logits_;
    return logits_;
  }

  std::vector<Rect> touched(static_cast<std::size_t>(first_flat_) + 1);
  touched[0] = r;

  // Write the edited pixels into the scratch input, channel planes.
  {
    Tensor& in = scratch_[0];
    std::int64_t plane = static_cast<std::int64_t>(image_.h) * image_.w;
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x) {
        std::int64_t p = static_cast<std::int64_t>(y) * image_.w + x;
        in.data[p] = patched.at(y, x, 0) / 255.0f;
        in.data[plane + p] = patched.at(y, x, 1) / 255.0f;
        in.data[2 * plane + p] = patched.at(y, x, 2) / 255.0f;
      }
  }

  Rect cur = r;
  for (int li = 0; li < first_flat_; ++li) {
    const auto& l = net_.layers[li];
    const LayerDims& d = net_.dims[li];
    const Tensor& in = scratch_[li];
    Tensor& out = scratch_[li + 1];
    switch (l.spec.kind) {
      case LayerKind::Conv3x3: {
        Rect o = dilate1(cur, d.out_h, d.out_w);
        conv3x3_rect(in.ptr(), d.in_c, d.in_h, d.in_w, l.w.ptr(), l.b.ptr(), d.out_c, out.ptr(), o);
        cur = o;
        break;
      }
      case LayerKind::BatchNorm: {
        std::int64_t plane = static_cast<std::int64_t>(d.in_h) * d.in_w;
        for (int ch = 0; ch < d.in_c; ++ch) {
          float mu = l.run_mean.data[ch];
          float iv = static_cast<float>(
              1.0 / std::sqrt(static_cast<double>(l.run_var.data[ch]) + kBnEps));
          float g = l.gamma.data[ch], b = l.beta.data[ch];
          const float* p = in.ptr() + ch * plane;
          float* q = out.ptr() + ch * plane;
          for (int y = cur.y0; y < cur.y1; ++y) {
            std::int64_t row = static_cast<std::int64_t>(y) * d.in_w;
            for (int x = cur.x0; x < cur.x1; ++x) q[row + x] = (p[row + x] - mu) * iv * g + b;
          }
        }
        break;
      }
      case LayerKind::Relu: {
        std::int64_t plane = static_cast<std::int64_t>(d.in_h) * d.in_w;
        for (int ch = 0; ch < d.in_c; ++ch) {
          const float* p = in.ptr() + ch * plane;
          float* q = out.ptr() + ch * plane;
          for (int y = cur.y0; y < cur.y1; ++y) {
            std::int64_t row = static_cast<std::int64_t>(y) * d.in_w;
            for (int x = cur.x0; x < cur.x1; ++x) q[row + x] = p[row + x] > 0 ? p[row + x] : 0.0f;
          }
        }
        break;
      }
      case LayerKind::MaxPool2: {
        Rect o = pool_rect(cur, d.out_h, d.out_w);
        std::int64_t in_plane = static_cast<std::int64_t>(d.in_h) * d.in_w;
        std::int64_t out_plane = static_cast<std::int64_t>(d.out_h) * d.out_w;
        for (int ch = 0; ch < d.in_c; ++ch) {
          const float* p = in.ptr() + ch * in_plane;
          float* q = out.ptr() + ch * out_plane;
          for (int y = o.y0; y < o.y1; ++y)
            for (int x = o.x0; x < o.x1; ++x) {
              const float* base = p + static_cast<std::int64_t>(2 * y) * d.in_w + 2 * x;
              float best = base[0];
              if (base[1] > best) best = base[1];
              if (base[d.in_w] > best) best = base[d.in_w];
              if (base[d.in_w + 1] > best) best = base[d.in_w + 1];
              q[static_cast<std::int64_t>(y) * d.out_w + x] = best;
            }
        }
        cur = o;
        break;
      }
      default:
        throw ConfigError("patched eval: unexpected spatial layer");
    }
    touched[li + 1] = cur;
  }

  run_flat(scratch_[first_flat_].ptr());
  restore(touched);
  return logits_;
}

}  // namespace lpcr
