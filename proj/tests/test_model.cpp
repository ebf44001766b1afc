#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lpcr/errors.hpp"
#include "lpcr/model.hpp"

using namespace lpcr;
namespace fs = std::filesystem;

namespace {

// Small synthetic dataset for fast training paths: 32x32, few images.
std::vector<GlyphImage> tiny_dataset(int per_class, std::uint64_t seed) {
  DatasetConfig c;
  c.per_class_count = per_class;
  c.height = 32;
  c.width = 32;
  c.seed = seed;
  c.augment = false;
  return generate_dataset(c).images;
}

LpcrModel tiny_model() { return build_lpcr(32, 32, 13, 32, 16, 0.25); }

TrainConfig tiny_train_config(int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 16;
  tc.threads = 2;
  tc.seed = 99;
  return tc;
}

}  // namespace

TEST_CASE("the 80x48 stack flattens to 1920 features entering the first fc layer") {
  LpcrModel m = build_lpcr(80, 48);
  // four pools: 80 -> 5, 48 -> 3; flatten = 128*5*3
  const Net& net = m.net;
  int fc_index = -1;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].spec.kind == LayerKind::Fc) {
      fc_index = static_cast<int>(i);
      break;
    }
  REQUIRE(fc_index >= 0);
  CHECK(net.layers[fc_index].w.shape == std::vector<int>{2304, 1920});
  CHECK(net.dims[fc_index].in_c * net.dims[fc_index].in_h * net.dims[fc_index].in_w == 1920);
}

TEST_CASE("a 16x16 input with small fc widths builds a gradient-check-sized net") {
  LpcrModel m = build_lpcr(16, 16, 13, 8, 8, 0.25);
  CHECK(m.net.out_dim() == 13);
  CHECK(m.net.in_h == 16);
}

TEST_CASE("softmax width equals the class count") {
  LpcrModel m = build_lpcr(32, 32, 13, 16, 8);
  CHECK(m.net.out_dim() == 13);
  CHECK(m.net.layers.back().spec.kind == LayerKind::Softmax);
  CHECK(m.classes.size() == 13);
}

TEST_CASE("input dims not divisible by 16 are rejected") {
  CHECK_THROWS_AS(build_lpcr(80, 50), ConfigError);
  CHECK_THROWS_AS(build_lpcr(20, 48), ConfigError);
}

TEST_CASE("zero epochs returns an untrained model near chance accuracy") {
  auto data = tiny_dataset(6, 3);
  auto [tr, va] = split_dataset(data, 0.5, 3);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    LpcrModel m = tiny_model();
    TrainConfig tc = tiny_train_config(0);
    tc.seed = seed;
    auto history = train(m, tr, va, tc);
    CHECK(history.empty());
    Metrics metrics = evaluate(m, va, 2);
    CHECK(metrics.accuracy >= 1.0 / 13 - 0.1);
    CHECK(metrics.accuracy <= 1.0 / 13 + 0.1);
  }
}

TEST_CASE("training twice with the same seed is bit-identical") {
  auto data = tiny_dataset(4, 5);
  auto [tr, va] = split_dataset(data, 0.75, 5);
  LpcrModel a = tiny_model(), b = tiny_model();
  TrainConfig tc = tiny_train_config(2);
  auto ha = train(a, tr, va, tc);
  auto hb = train(b, tr, va, tc);
  REQUIRE(ha.size() == hb.size());
  for (std::size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].train_loss == hb[i].train_loss);
    CHECK(ha[i].val_accuracy == hb[i].val_accuracy);
  }
  auto ra = param_refs(a.net), rb = param_refs(b.net);
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].tensor->data == rb[i].tensor->data);
}

TEST_CASE("a forced constant predictor scores 1/13 on balanced data") {
  LpcrModel m = tiny_model();
  // all zero except a positive bias on class 0 in the last fc layer
  for (auto& l : m.net.layers)
    if (l.spec.kind == LayerKind::Fc && l.w.shape[0] == 13) l.b.data[0] = 5.0f;
  auto data = tiny_dataset(3, 7);
  Metrics metrics = evaluate(m, data, 2);
  CHECK(metrics.accuracy == doctest::Approx(1.0 / 13));
  CHECK(metrics.per_class_accuracy[0] == doctest::Approx(1.0));
  CHECK(metrics.per_class_accuracy[5] == doctest::Approx(0.0));
}

TEST_CASE("evaluate rejects an empty dataset and scores a single image") {
  LpcrModel m = tiny_model();
  init_params(m.net, Rng(1));
  std::vector<GlyphImage> empty;
  CHECK_THROWS_AS(evaluate(m, empty, 1), ConfigError);

  auto data = tiny_dataset(2, 9);
  std::vector<GlyphImage> one = {data[0]};
  Metrics metrics = evaluate(m, one, 1);
  CHECK((metrics.accuracy == 0.0 || metrics.accuracy == 1.0));
}

TEST_CASE("pick_best_epoch takes the earliest maximum") {
  std::vector<EpochStats> h = {{0, 1.0, 0.5}, {1, 0.8, 0.9}, {2, 0.6, 0.9}, {3, 0.5, 0.7}};
  CHECK(pick_best_epoch(h) == 1);
  CHECK(pick_best_epoch({}) == -1);
}

TEST_CASE("checkpoint keeps the best validation epoch") {
  auto data = tiny_dataset(6, 11);
  auto [tr, va] = split_dataset(data, 0.7, 11);
  LpcrModel m = tiny_model();
  TrainConfig tc = tiny_train_config(3);
  auto history = train(m, tr, va, tc);
  int best = pick_best_epoch(history);
  CHECK(m.prov.best_epoch == best);
  Metrics metrics = evaluate(m, va, 2);
  CHECK(metrics.accuracy == doctest::Approx(history[best].val_accuracy));
}

TEST_CASE("kfold folds are disjoint and averaged") {
  auto data = tiny_dataset(4, 13);
  TrainConfig tc = tiny_train_config(1);
  KfoldResult kf = kfold_cv(data, 2, tc, 32, 32, 13, 16, 8, 0.25);
  CHECK(kf.fold_metrics.size() == 2);
  double mean = (kf.fold_metrics[0].accuracy + kf.fold_metrics[1].accuracy) / 2;
  CHECK(kf.mean_accuracy == doctest::Approx(mean));
}

TEST_CASE("model save and load round-trips every parameter bit") {
  auto data = tiny_dataset(3, 15);
  auto [tr, va] = split_dataset(data, 0.67, 15);
  LpcrModel m = tiny_model();
  TrainConfig tc = tiny_train_config(1);
  train(m, tr, va, tc);
  fs::path path = fs::temp_directory_path() / "lpcr_model_test.bin";
  save_model(m, path.string());
  LpcrModel back = load_model(path.string());
  auto ra = param_refs(m.net), rb = param_refs(back.net);
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].tensor->data == rb[i].tensor->data);
  CHECK(back.prov.config_hash == m.prov.config_hash);
  CHECK(back.prov.dataset_hash == m.prov.dataset_hash);
  CHECK(back.prov.best_epoch == m.prov.best_epoch);
  Metrics ma = evaluate(m, va, 1), mb = evaluate(back, va, 1);
  CHECK(ma.accuracy == mb.accuracy);
  CHECK(ma.mean_loss == mb.mean_loss);
}

TEST_CASE("a corrupted model file fails its checksum") {
  LpcrModel m = tiny_model();
  init_params(m.net, Rng(2));
  fs::path path = fs::temp_directory_path() / "lpcr_model_corrupt.bin";
  save_model(m, path.string());
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(-5, std::ios::end);
  char b;
  f.seekg(-5, std::ios::end);
  f.get(b);
  f.seekp(-5, std::ios::end);
  b = static_cast<char>(b ^ 0x11);
  f.put(b);
  f.close();
  CHECK_THROWS_AS(load_model(path.string()), DataError);
}

TEST_CASE("a class count disagreeing with the head width is rejected") {
  LpcrModel m = tiny_model();
  init_params(m.net, Rng(3));
  m.classes = "0123";  // wrong on purpose
  fs::path path = fs::temp_directory_path() / "lpcr_model_classes.bin";
  save_model(m, path.string());
  CHECK_THROWS_AS(load_model(path.string()), DataError);
}

TEST_CASE("training rejects invalid configs") {
  auto data = tiny_dataset(2, 17);
  auto [tr, va] = split_dataset(data, 0.5, 17);
  LpcrModel m = tiny_model();
  TrainConfig tc = tiny_train_config(1);
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(train(m, tr, va, tc), ConfigError);
  tc = tiny_train_config(1);
  tc.momentum = 1.0;
  CHECK_THROWS_AS(train(m, tr, va, tc), ConfigError);
  tc = tiny_train_config(1);
  tc.batch_size = 0;
  CHECK_THROWS_AS(train(m, tr, va, tc), ConfigError);
  std::vector<GlyphImage> empty;
  tc = tiny_train_config(1);
  CHECK_THROWS_AS(train(m, empty, va, tc), ConfigError);
  CHECK_THROWS_AS(train(m, tr, empty, tc), ConfigError);
}

TEST_CASE("history csv lists one line per epoch") {
  auto data = tiny_dataset(3, 19);
  auto [tr, va] = split_dataset(data, 0.67, 19);
  LpcrModel m = tiny_model();
  auto history = train(m, tr, va, tiny_train_config(2));
  fs::path path = fs::temp_directory_path() / "lpcr_history_test.csv";
  write_history_csv(history, path.string());
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 3);  // header + 2 epochs
}
