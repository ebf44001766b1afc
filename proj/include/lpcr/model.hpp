#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lpcr/dataset.hpp"
#include "lpcr/nn.hpp"

namespace lpcr {

struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  int batch_size = 64;
  int epochs = 80;
  std::uint64_t seed = 1;
  bool dropout = true;  // disable to train without the dropout layer active
  int threads = 1;
};

struct Provenance {
  std::string config_hash;
  std::string dataset_hash;
  int epochs_trained = 0;
  int best_epoch = -1;
  double best_val_accuracy = 0;
  bool attack_aware = false;
  std::uint64_t seed = 0;
};

struct LpcrModel {
  Net net;
  std::string classes;  // class symbols in label order
  Provenance prov;
};

struct Metrics {
  double accuracy = 0;
  std::vector<double> per_class_accuracy;
  double mean_loss = 0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_accuracy = 0;
};

// Layer stack: (conv bn relu) x2 pool | x2 pool | x2 pool | x3 pool,
// fc + relu, dropout 0.5, fc + relu, fc num_classes, softmax.
// width_multiplier scales the conv widths 16/32/64/128 (transfer models).
LpcrModel build_lpcr(int in_h, int in_w, int num_classes = kNumClasses,
                     int fc1_width = 2304, int fc2_width = 500,
                     double width_multiplier = 1.0, double dropout_rate = 0.5);

Tensor batch_to_tensor(const std::vector<GlyphImage>& images, const std::vector<int>& idx);
Tensor image_to_tensor(const Image& img);

std::string train_config_hash(const TrainConfig& c);
std::string dataset_fingerprint(const std::vector<GlyphImage>& images);

// SGD with momentum over shuffled mini-batches; per-epoch validation; keeps
// the checkpoint with the highest validation accuracy (ties -> earliest
// epoch). Deterministic under (config.seed, data order). Aborts with
// NumericError if the loss turns NaN.
std::vector<EpochStats> train(LpcrModel& model, const std::vector<GlyphImage>& train_set,
                              const std::vector<GlyphImage>& val_set, const TrainConfig& config);

// Same loop with a per-epoch data source (adversarial training resamples its
// mix every epoch). The returned reference must stay valid for the epoch.
std::vector<EpochStats> train_with_provider(
    LpcrModel& model, const std::function<const std::vector<GlyphImage>&(int)>& epoch_data,
    const std::vector<GlyphImage>& val_set, const TrainConfig& config);

Metrics evaluate(LpcrModel& model, const std::vector<GlyphImage>& dataset, int threads = 1);

// Index of the epoch a training run reports: max val accuracy, ties earliest.
int pick_best_epoch(const std::vector<EpochStats>& history);

struct KfoldResult {
  std::vector<Metrics> fold_metrics;
  double mean_accuracy = 0;
  double stddev_accuracy = 0;
};

KfoldResult kfold_cv(const std::vector<GlyphImage>& dataset, int k, const TrainConfig& config,
                     int in_h, int in_w, int num_classes,
                     int fc1_width = 2304, int fc2_width = 500, double width_multiplier = 1.0);

// Single-file model format: magic, JSON header (specs, shapes, per-tensor
// checksums, provenance), then raw little-endian float32 tensor data.
void save_model(const LpcrModel& model, const std::string& path);
LpcrModel load_model(const std::string& path);

void write_history_csv(const std::vector<EpochStats>& history, const std::string& path);

}  // namespace lpcr
