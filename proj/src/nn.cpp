#include "lpcr/nn.hpp"

#include "lpcr/errors.hpp"

namespace lpcr {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv3x3: return "conv3x3";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool2: return "maxpool2";
    case LayerKind::Fc: return "fc";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

int argmax_row(const float* row, int d) {
  int arg = 0;
  for (int i = 1; i < d; ++i)
    if (row[i] > row[arg]) arg = i;
  return arg;
}

int argmax_row(const double* row, int d) {
  int arg = 0;
  for (int i = 1; i < d; ++i)
    if (row[i] > row[arg]) arg = i;
  return arg;
}

namespace {

double loss_only(NetT<double>& net, const TensorT<double>& x, const std::vector<int>& labels,
                 const FwdOpt& opt) {
  ForwardCacheT<double> cache;
  forward(net, x, opt, &cache);
  std::size_t nl = net.layers.size();
  bool has_softmax = net.layers.back().spec.kind == LayerKind::Softmax;
  const TensorT<double>& logits = cache.acts[has_softmax ? nl - 1 : nl];
  return detail::ce_loss_from_logits<double>(logits, labels, net.out_dim(), nullptr, nullptr);
}

}  // namespace

GradCheckReport gradient_check(NetT<double>& net, const TensorT<double>& x,
                               const std::vector<int>& labels, double eps, bool freeze_bn,
                               double inject_grad_error) {
  for (const auto& l : net.layers)
    if (l.spec.kind == LayerKind::Dropout && l.spec.rate > 0)
      throw ConfigError("gradient_check: dropout must be disabled (non-deterministic forward)");

  FwdOpt opt;
  opt.mode = Mode::Train;
  opt.freeze_bn = freeze_bn;
  opt.update_running = false;
  opt.threads = 1;

  LossGrad<double> analytic = loss_and_grad(net, x, labels, opt);
  if (inject_grad_error != 0.0 && !analytic.grads.empty() && analytic.grads[0].numel() > 0)
    analytic.grads[0].data[0] += inject_grad_error;

  GradCheckReport report;
  auto refs = param_refs(net);
  std::size_t slot = 0;
  for (auto& r : refs) {
    if (!r.trainable) continue;
    GradCheckEntry entry;
    entry.name = "layer" + std::to_string(r.layer) + "." + r.name;
    for (std::int64_t i = 0; i < r.tensor->numel(); ++i) {
      double orig = r.tensor->data[i];
      r.tensor->data[i] = orig + eps;
      double lp = loss_only(net, x, labels, opt);
      r.tensor->data[i] = orig - eps;
      double lm = loss_only(net, x, labels, opt);
      r.tensor->data[i] = orig;
      double numeric = (lp - lm) / (2 * eps);
      double a = analytic.grads[slot].data[i];
      double abs_err = std::abs(a - numeric);
      double rel = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      if (abs_err >= 1e-7) entry.max_effective_err = std::max(entry.max_effective_err, rel);
    }
    report.worst = std::max(report.worst, entry.max_rel_err);
    report.worst_effective = std::max(report.worst_effective, entry.max_effective_err);
    report.entries.push_back(std::move(entry));
    ++slot;
  }
  return report;
}

}  // namespace lpcr
