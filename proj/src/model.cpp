#include "lpcr/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "lpcr/errors.hpp"

using json = nlohmann::ordered_json;

namespace lpcr {

LpcrModel build_lpcr(int in_h, int in_w, int num_classes, int fc1_width, int fc2_width,
                     double width_multiplier, double dropout_rate) {
  if (in_h <= 0 || in_w <= 0 || in_h % 16 != 0 || in_w % 16 != 0)
    throw ConfigError("build_lpcr: input dims must be divisible by 16, got " +
                      std::to_string(in_h) + "x" + std::to_string(in_w));
  if (num_classes < 2) throw ConfigError("build_lpcr: need at least 2 classes");
  if (fc1_width < 1 || fc2_width < 1) throw ConfigError("build_lpcr: bad fc widths");
  if (width_multiplier <= 0) throw ConfigError("build_lpcr: bad width multiplier");

  auto width = [&](int base) { return std::max(1, static_cast<int>(std::lround(base * width_multiplier))); };

  std::vector<LayerSpec> specs;
  auto conv_block = [&](int filters) {
    specs.push_back({LayerKind::Conv3x3, filters});
    specs.push_back({LayerKind::BatchNorm});
    specs.push_back({LayerKind::Relu});
  };
  conv_block(width(16));
  conv_block(width(16));
  specs.push_back({LayerKind::MaxPool2});
  conv_block(width(32));
  conv_block(width(32));
  specs.push_back({LayerKind::MaxPool2});
  conv_block(width(64));
  conv_block(width(64));
  specs.push_back({LayerKind::MaxPool2});
  conv_block(width(128));
  conv_block(width(128));
  conv_block(width(128));
  specs.push_back({LayerKind::MaxPool2});
  specs.push_back({LayerKind::Fc, fc1_width});
  specs.push_back({LayerKind::Relu});
  specs.push_back({LayerKind::Dropout, 0, dropout_rate});
  specs.push_back({LayerKind::Fc, fc2_width});
  specs.push_back({LayerKind::Relu});
  specs.push_back({LayerKind::Fc, num_classes});
  specs.push_back({LayerKind::Softmax});

  LpcrModel m;
  m.net = make_net<float>(3, in_h, in_w, specs);
  m.classes.assign(kClassAlphabet, kClassAlphabet + std::min(num_classes, kNumClasses));
  while (static_cast<int>(m.classes.size()) < num_classes) m.classes.push_back('?');
  return m;
}

Tensor batch_to_tensor(const std::vector<GlyphImage>& images, const std::vector<int>& idx) {
  if (idx.empty()) throw ConfigError("batch_to_tensor: empty batch");
  const Image& first = images[idx[0]].image;
  Tensor t({static_cast<int>(idx.size()), 3, first.h, first.w});
  std::int64_t plane = static_cast<std::int64_t>(first.h) * first.w;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Image& img = images[idx[b]].image;
    if (img.h != first.h || img.w != first.w)
      throw ConfigError("batch_to_tensor: mixed image dims in batch");
    float* base = t.ptr() + static_cast<std::int64_t>(b) * 3 * plane;
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        std::int64_t p = static_cast<std::int64_t>(y) * img.w + x;
        base[p] = img.at(y, x, 0) / 255.0f;
        base[plane + p] = img.at(y, x, 1) / 255.0f;
        base[2 * plane + p] = img.at(y, x, 2) / 255.0f;
      }
  }
  return t;
}

Tensor image_to_tensor(const Image& img) {
  Tensor t({1, 3, img.h, img.w});
  std::int64_t plane = static_cast<std::int64_t>(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      std::int64_t p = static_cast<std::int64_t>(y) * img.w + x;
      t.data[p] = img.at(y, x, 0) / 255.0f;
      t.data[plane + p] = img.at(y, x, 1) / 255.0f;
      t.data[2 * plane + p] = img.at(y, x, 2) / 255.0f;
    }
  return t;
}

std::string train_config_hash(const TrainConfig& c) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "lr=%.17g;mom=%.17g;batch=%d;epochs=%d;seed=%llu;dropout=%d",
                c.learning_rate, c.momentum, c.batch_size, c.epochs,
                static_cast<unsigned long long>(c.seed), c.dropout ? 1 : 0);
  return to_hex(fnv1a64(reinterpret_cast<const std::uint8_t*>(buf), std::strlen(buf)));
}

std::string dataset_fingerprint(const std::vector<GlyphImage>& images) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mixin = [&](const std::uint8_t* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& g : images) {
    mixin(reinterpret_cast<const std::uint8_t*>(g.id.data()), g.id.size());
    std::uint64_t px = fnv1a64(g.image.px.data(), g.image.px.size());
    mixin(reinterpret_cast<const std::uint8_t*>(&px), sizeof(px));
    auto lab = static_cast<std::uint8_t>(g.label);
    mixin(&lab, 1);
  }
  return to_hex(h);
}

int pick_best_epoch(const std::vector<EpochStats>& history) {
  int best = -1;
  double best_acc = -1;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (history[i].val_accuracy > best_acc) {
      best_acc = history[i].val_accuracy;
      best = static_cast<int>(i);
    }
  }
  return best;
}

namespace {

Metrics evaluate_net(Net& net, const std::vector<GlyphImage>& dataset, int num_classes,
                     int threads) {
  if (dataset.empty()) throw ConfigError("evaluate: empty dataset");
  Metrics m;
  std::vector<std::int64_t> per_class_total(num_classes, 0), per_class_correct(num_classes, 0);
  double loss_sum = 0;
  std::int64_t correct = 0;

  FwdOpt opt;
  opt.mode = Mode::Eval;
  opt.threads = threads;

  const int batch = 64;
  std::vector<int> idx;
  for (std::size_t start = 0; start < dataset.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(dataset.size(), start + batch); ++i)
      idx.push_back(static_cast<int>(i));
    Tensor x = batch_to_tensor(dataset, idx);
    ForwardCache cache;
    forward(net, x, opt, &cache);
    bool has_softmax = net.layers.back().spec.kind == LayerKind::Softmax;
    const Tensor& logits = cache.acts[has_softmax ? net.layers.size() - 1 : net.layers.size()];
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* row = logits.ptr() + static_cast<std::int64_t>(b) * num_classes;
      int label = dataset[idx[b]].label;
      if (label < 0 || label >= num_classes)
        throw ConfigError("evaluate: label out of range: " + std::to_string(label));
      int pred = argmax_row(row, num_classes);
      per_class_total[label]++;
      if (pred == label) {
        per_class_correct[label]++;
        correct++;
      }
      double mx = row[0];
      for (int i = 1; i < num_classes; ++i) mx = std::max(mx, static_cast<double>(row[i]));
      double sum = 0;
      for (int i = 0; i < num_classes; ++i) sum += std::exp(row[i] - mx);
      loss_sum += mx + std::log(sum) - row[label];
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  m.mean_loss = loss_sum / static_cast<double>(dataset.size());
  m.per_class_accuracy.resize(num_classes, 0);
  for (int c = 0; c < num_classes; ++c)
    m.per_class_accuracy[c] = per_class_total[c]
                                  ? static_cast<double>(per_class_correct[c]) / per_class_total[c]
                                  : 0.0;
  return m;
}

}  // namespace

Metrics evaluate(LpcrModel& model, const std::vector<GlyphImage>& dataset, int threads) {
  return evaluate_net(model.net, dataset, model.net.out_dim(), threads);
}

std::vector<EpochStats> train_with_provider(
    LpcrModel& model, const std::function<const std::vector<GlyphImage>&(int)>& epoch_data,
    const std::vector<GlyphImage>& val_set, const TrainConfig& config) {
  if (val_set.empty()) throw ConfigError("train: empty val set");
  if (config.learning_rate <= 0) throw ConfigError("train: learning_rate must be positive");
  if (config.momentum < 0 || config.momentum >= 1) throw ConfigError("train: momentum must be in [0,1)");
  if (config.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (config.epochs < 0) throw ConfigError("train: negative epochs");

  if (!config.dropout)
    for (auto& l : model.net.layers)
      if (l.spec.kind == LayerKind::Dropout) l.spec.rate = 0.0;

  Rng root(config.seed);
  init_params(model.net, root.split(0x1417));

  std::vector<Tensor> velocity = make_grad_slots(model.net);

  std::vector<EpochStats> history;
  Net best_net = model.net;
  double best_acc = -1;
  int best_epoch = -1;
  std::string data_fingerprint;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<GlyphImage>& train_set = epoch_data(epoch);
    if (train_set.empty()) throw ConfigError("train: empty train set");
    if (epoch == 0) data_fingerprint = dataset_fingerprint(train_set);

    const int n = static_cast<int>(train_set.size());
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng = root.split2(0x5875F, static_cast<std::uint64_t>(epoch));
    shuffle_indices(order, shuffle_rng);
    Rng dropout_rng = root.split2(0xD409, static_cast<std::uint64_t>(epoch));

    FwdOpt opt;
    opt.mode = Mode::Train;
    opt.dropout_rng = &dropout_rng;
    opt.threads = config.threads;

    double loss_sum = 0;
    std::int64_t seen = 0;
    for (int start = 0; start < n; start += config.batch_size) {
      int stop = std::min(n, start + config.batch_size);
      std::vector<int> idx(order.begin() + start, order.begin() + stop);
      Tensor x = batch_to_tensor(train_set, idx);
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (int i : idx) labels.push_back(train_set[i].label);

      LossGrad<float> lg = loss_and_grad(model.net, x, labels, opt);
      if (std::isnan(lg.loss) || std::isinf(lg.loss))
        throw NumericError("train: loss diverged at epoch " + std::to_string(epoch));
      sgd_momentum_step(model.net, velocity, lg.grads, config.learning_rate, config.momentum);
      loss_sum += lg.loss * static_cast<double>(idx.size());
      seen += static_cast<std::int64_t>(idx.size());
    }

    Metrics vm = evaluate_net(model.net, val_set, model.net.out_dim(), config.threads);
    EpochStats es;
    es.epoch = epoch;
    es.train_loss = loss_sum / static_cast<double>(seen);
    es.val_accuracy = vm.accuracy;
    history.push_back(es);
    if (vm.accuracy > best_acc) {
      best_acc = vm.accuracy;
      best_epoch = epoch;
      best_net = model.net;
    }
  }

  if (best_epoch >= 0) model.net = best_net;
  model.prov.config_hash = train_config_hash(config);
  model.prov.dataset_hash = data_fingerprint;
  model.prov.epochs_trained = config.epochs;
  model.prov.best_epoch = best_epoch;
  model.prov.best_val_accuracy = best_acc < 0 ? 0 : best_acc;
  model.prov.seed = config.seed;
  return history;
}

std::vector<EpochStats> train(LpcrModel& model, const std::vector<GlyphImage>& train_set,
                              const std::vector<GlyphImage>& val_set, const TrainConfig& config) {
  if (train_set.empty()) throw ConfigError("train: empty train set");
  std::function<const std::vector<GlyphImage>&(int)> provider =
      [&train_set](int) -> const std::vector<GlyphImage>& { return train_set; };
  return train_with_provider(model, provider, val_set, config);
}

KfoldResult kfold_cv(const std::vector<GlyphImage>& dataset, int k, const TrainConfig& config,
                     int in_h, int in_w, int num_classes, int fc1_width, int fc2_width,
                     double width_multiplier) {
  std::vector<int> fold = kfold_assignments(dataset, k, config.seed);
  KfoldResult result;
  double sum = 0, sum2 = 0;
  for (int f = 0; f < k; ++f) {
    std::vector<GlyphImage> tr, va;
    for (std::size_t i = 0; i < dataset.size(); ++i)
      (fold[i] == f ? va : tr).push_back(dataset[i]);
    LpcrModel m = build_lpcr(in_h, in_w, num_classes, fc1_width, fc2_width, width_multiplier);
    TrainConfig fc = config;
    fc.seed = Rng(config.seed).split(static_cast<std::uint64_t>(f)).next_u64();
    train(m, tr, va, fc);
    Metrics metrics = evaluate(m, va, config.threads);
    sum += metrics.accuracy;
    sum2 += metrics.accuracy * metrics.accuracy;
    result.fold_metrics.push_back(std::move(metrics));
  }
  result.mean_accuracy = sum / k;
  double var = std::max(0.0, sum2 / k - result.mean_accuracy * result.mean_accuracy);
  result.stddev_accuracy = std::sqrt(var);
  return result;
}

namespace {

const char kModelMagic[8] = {'L', 'P', 'C', 'R', 'M', 'D', 'L', '1'};

json spec_to_json(const LayerSpec& s) {
  json j;
  j["kind"] = layer_kind_name(s.kind);
  if (s.units) j["units"] = s.units;
  if (s.rate > 0) j["rate"] = s.rate;
  return j;
}

LayerSpec spec_from_json(const json& j) {
  LayerSpec s{LayerKind::Relu, 0, 0.0};
  std::string kind = j.at("kind").get<std::string>();
  bool found = false;
  for (LayerKind k : {LayerKind::Conv3x3, LayerKind::BatchNorm, LayerKind::Relu,
                      LayerKind::MaxPool2, LayerKind::Fc, LayerKind::Dropout, LayerKind::Softmax})
    if (kind == layer_kind_name(k)) {
      s.kind = k;
      found = true;
    }
  if (!found) throw DataError("model file: unknown layer kind " + kind);
  if (j.contains("units")) s.units = j.at("units").get<int>();
  if (j.contains("rate")) s.rate = j.at("rate").get<double>();
  return s;
}

}  // namespace

void save_model(const LpcrModel& model, const std::string& path) {
  auto& net = const_cast<Net&>(model.net);
  auto refs = param_refs(net);

  json header;
  header["version"] = 1;
  header["classes"] = model.classes;
  header["input"] = {net.in_c, net.in_h, net.in_w};
  json specs = json::array();
  for (const auto& l : net.layers) specs.push_back(spec_to_json(l.spec));
  header["layers"] = specs;
  json tensors = json::array();
  for (const auto& r : refs) {
    json t;
    t["layer"] = r.layer;
    t["name"] = r.name;
    t["shape"] = r.tensor->shape;
    t["checksum"] = to_hex(fnv1a64(reinterpret_cast<const std::uint8_t*>(r.tensor->ptr()),
                                   r.tensor->data.size() * sizeof(float)));
    tensors.push_back(t);
  }
  header["tensors"] = tensors;
  json prov;
  prov["config_hash"] = model.prov.config_hash;
  prov["dataset_hash"] = model.prov.dataset_hash;
  prov["epochs_trained"] = model.prov.epochs_trained;
  prov["best_epoch"] = model.prov.best_epoch;
  prov["best_val_accuracy"] = model.prov.best_val_accuracy;
  prov["attack_aware"] = model.prov.attack_aware;
  prov["seed"] = model.prov.seed;
  header["provenance"] = prov;

  std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write model file: " + path);
  out.write(kModelMagic, 8);
  std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& r : refs)
    out.write(reinterpret_cast<const char*>(r.tensor->ptr()),
              static_cast<std::streamsize>(r.tensor->data.size() * sizeof(float)));
  if (!out) throw DataError("model write failed: " + path);
}

LpcrModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file: " + path);
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kModelMagic, 8) != 0)
    throw DataError("not a model file: " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (in.gcount() != 8 || hlen == 0 || hlen > (1u << 20)) throw DataError("bad model header: " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (in.gcount() != static_cast<std::streamsize>(hlen)) throw DataError("truncated model header: " + path);

  json header;
  try {
    header = json::parse(hs);
  } catch (const std::exception& e) {
    throw DataError(std::string("model header parse error: ") + e.what());
  }

  LpcrModel model;
  try {
    if (header.at("version").get<int>() != 1) throw DataError("unsupported model version");
    model.classes = header.at("classes").get<std::string>();
    int in_c = header.at("input").at(0).get<int>();
    int in_h = header.at("input").at(1).get<int>();
    int in_w = header.at("input").at(2).get<int>();
    std::vector<LayerSpec> specs;
    for (const auto& j : header.at("layers")) specs.push_back(spec_from_json(j));
    model.net = make_net<float>(in_c, in_h, in_w, specs);
    const auto& prov = header.at("provenance");
    model.prov.config_hash = prov.at("config_hash").get<std::string>();
    model.prov.dataset_hash = prov.at("dataset_hash").get<std::string>();
    model.prov.epochs_trained = prov.at("epochs_trained").get<int>();
    model.prov.best_epoch = prov.at("best_epoch").get<int>();
    model.prov.best_val_accuracy = prov.at("best_val_accuracy").get<double>();
    model.prov.attack_aware = prov.at("attack_aware").get<bool>();
    model.prov.seed = prov.at("seed").get<std::uint64_t>();

    if (static_cast<int>(model.classes.size()) != model.net.out_dim())
      throw DataError("model file: class count disagrees with final layer width");

    auto refs = param_refs(model.net);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != refs.size()) throw DataError("model file: tensor list mismatch");
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto& tj = tensors[static_cast<int>(i)];
      std::vector<int> shape = tj.at("shape").get<std::vector<int>>();
      if (shape != refs[i].tensor->shape)
        throw DataError("model file: tensor shape mismatch at " + std::string(refs[i].name));
      in.read(reinterpret_cast<char*>(refs[i].tensor->ptr()),
              static_cast<std::streamsize>(refs[i].tensor->data.size() * sizeof(float)));
      if (in.gcount() != static_cast<std::streamsize>(refs[i].tensor->data.size() * sizeof(float)))
        throw DataError("model file: truncated tensor data: " + path);
      std::string want = tj.at("checksum").get<std::string>();
      std::string got = to_hex(fnv1a64(reinterpret_cast<const std::uint8_t*>(refs[i].tensor->ptr()),
                                       refs[i].tensor->data.size() * sizeof(float)));
      if (want != got)
        throw DataError("model file: checksum mismatch in layer" +
                        std::to_string(refs[i].layer) + "." + refs[i].name + ": " + path);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("model header field error: ") + e.what());
  }
  return model;
}

void write_history_csv(const std::vector<EpochStats>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write history csv: " + path);
  out << "epoch,train_loss,val_acc\n";
  char buf[96];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", h.epoch, h.train_loss, h.val_accuracy);
    out << buf;
  }
}

}  // namespace lpcr
