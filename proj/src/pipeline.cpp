#include "lpcr/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lpcr/errors.hpp"
#include "lpcr/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace lpcr {

namespace {

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig parse_run_config_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: parse error: ") + e.what());
  }

  check_keys(j, {"seed", "threads", "dataset", "train", "attack", "advtrain", "analysis", "paths"},
             "top level");
  RunConfig cfg;
  get_if(j, "seed", cfg.seed);
  get_if(j, "threads", cfg.threads);

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d,
               {"classes", "per_class_count", "height", "width", "stroke_min", "stroke_max",
                "fg_gray_min", "fg_gray_max", "bg_gray_min", "bg_gray_max", "channel_tint",
                "jitter", "min_contrast", "paper_skew", "augment", "max_rotation_degrees",
                "max_blur_sigma"},
               "dataset");
    if (d.contains("classes")) {
      std::string cls = d.at("classes").get<std::string>();
      cfg.dataset.classes.assign(cls.begin(), cls.end());
    }
    get_if(d, "per_class_count", cfg.dataset.per_class_count);
    get_if(d, "height", cfg.dataset.height);
    get_if(d, "width", cfg.dataset.width);
    get_if(d, "stroke_min", cfg.dataset.stroke_min);
    get_if(d, "stroke_max", cfg.dataset.stroke_max);
    get_if(d, "fg_gray_min", cfg.dataset.fg_gray_min);
    get_if(d, "fg_gray_max", cfg.dataset.fg_gray_max);
    get_if(d, "bg_gray_min", cfg.dataset.bg_gray_min);
    get_if(d, "bg_gray_max", cfg.dataset.bg_gray_max);
    get_if(d, "channel_tint", cfg.dataset.channel_tint);
    get_if(d, "jitter", cfg.dataset.jitter);
    get_if(d, "min_contrast", cfg.dataset.min_contrast);
    get_if(d, "paper_skew", cfg.dataset.paper_skew);
    get_if(d, "augment", cfg.dataset.augment);
    get_if(d, "max_rotation_degrees", cfg.dataset.augment_limits.max_rotation_degrees);
    get_if(d, "max_blur_sigma", cfg.dataset.augment_limits.max_blur_sigma);
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t,
               {"learning_rate", "momentum", "batch_size", "epochs", "dropout", "val_ratio",
                "kfold", "fc1_width", "fc2_width", "width_multiplier"},
               "train");
    get_if(t, "learning_rate", cfg.train.learning_rate);
    get_if(t, "momentum", cfg.train.momentum);
    get_if(t, "batch_size", cfg.train.batch_size);
    get_if(t, "epochs", cfg.train.epochs);
    get_if(t, "dropout", cfg.train.dropout);
    get_if(t, "val_ratio", cfg.val_ratio);
    get_if(t, "kfold", cfg.kfold);
    get_if(t, "fc1_width", cfg.fc1_width);
    get_if(t, "fc2_width", cfg.fc2_width);
    get_if(t, "width_multiplier", cfg.width_multiplier);
  }

  if (j.contains("attack")) {
    const json& a = j.at("attack");
    check_keys(a,
               {"shapes", "horizontal_max", "vertical_max", "circular_max",
                "require_misclassification", "circular_stride", "subset", "per_class_cap"},
               "attack");
    if (a.contains("shapes")) {
      cfg.attack_shapes.clear();
      for (const auto& s : a.at("shapes"))
        cfg.attack_shapes.push_back(shape_from_name(s.get<std::string>()));
      if (cfg.attack_shapes.empty()) throw ConfigError("config: attack.shapes is empty");
    }
    get_if(a, "horizontal_max", cfg.attack.horizontal_max);
    get_if(a, "vertical_max", cfg.attack.vertical_max);
    get_if(a, "circular_max", cfg.attack.circular_max);
    get_if(a, "require_misclassification", cfg.attack.require_misclassification);
    get_if(a, "circular_stride", cfg.attack.circular_stride);
    get_if(a, "subset", cfg.attack_subset);
    get_if(a, "per_class_cap", cfg.attack_per_class_cap);
    if (cfg.attack_subset != "val" && cfg.attack_subset != "train" && cfg.attack_subset != "all")
      throw ConfigError("config: attack.subset must be val, train, or all");
    if (cfg.attack.circular_stride < 1) throw ConfigError("config: circular_stride must be >= 1");
  }

  bool adv_has_thresholds = false;
  AttackConfig adv_thresholds;
  if (j.contains("advtrain")) {
    const json& v = j.at("advtrain");
    check_keys(v,
               {"clean_fraction", "shape_probs", "online", "exact_split", "epochs",
                "horizontal_max", "vertical_max", "circular_max"},
               "advtrain");
    get_if(v, "clean_fraction", cfg.advmix.clean_fraction);
    if (v.contains("shape_probs")) {
      const auto& p = v.at("shape_probs");
      if (p.size() != 3) throw ConfigError("config: advtrain.shape_probs needs 3 entries");
      for (int i = 0; i < 3; ++i) cfg.advmix.shape_probs[i] = p.at(i).get<double>();
    }
    get_if(v, "online", cfg.advmix.online);
    get_if(v, "exact_split", cfg.advmix.exact_split);
    get_if(v, "epochs", cfg.advtrain_epochs);
    // Optional training-time size thresholds; the attack sweep keeps its own.
    if (v.contains("horizontal_max") || v.contains("vertical_max") || v.contains("circular_max")) {
      adv_has_thresholds = true;
      get_if(v, "horizontal_max", adv_thresholds.horizontal_max);
      get_if(v, "vertical_max", adv_thresholds.vertical_max);
      get_if(v, "circular_max", adv_thresholds.circular_max);
    }
  }

  if (j.contains("analysis")) {
    const json& an = j.at("analysis");
    check_keys(an, {"transfer_width_multiplier", "transfer_seed_offset"}, "analysis");
    get_if(an, "transfer_width_multiplier", cfg.transfer_width_multiplier);
    get_if(an, "transfer_seed_offset", cfg.transfer_seed_offset);
  }

  // Derived seeds: one root seed drives everything.
  cfg.dataset.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  cfg.advmix.seed = Rng(cfg.seed).split(0xADF0).next_u64();
  cfg.advmix.attack = cfg.attack;
  if (adv_has_thresholds) {
    cfg.advmix.attack.horizontal_max = adv_thresholds.horizontal_max;
    cfg.advmix.attack.vertical_max = adv_thresholds.vertical_max;
    cfg.advmix.attack.circular_max = adv_thresholds.circular_max;
  }
  validate_config(cfg.dataset);
  validate_mix_config(cfg.advmix);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config_json(text);
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  json d;
  d["classes"] = std::string(cfg.dataset.classes.begin(), cfg.dataset.classes.end());
  d["per_class_count"] = cfg.dataset.per_class_count;
  d["height"] = cfg.dataset.height;
  d["width"] = cfg.dataset.width;
  d["stroke_min"] = cfg.dataset.stroke_min;
  d["stroke_max"] = cfg.dataset.stroke_max;
  d["fg_gray_min"] = cfg.dataset.fg_gray_min;
  d["fg_gray_max"] = cfg.dataset.fg_gray_max;
  d["bg_gray_min"] = cfg.dataset.bg_gray_min;
  d["bg_gray_max"] = cfg.dataset.bg_gray_max;
  d["channel_tint"] = cfg.dataset.channel_tint;
  d["jitter"] = cfg.dataset.jitter;
  d["min_contrast"] = cfg.dataset.min_contrast;
  d["paper_skew"] = cfg.dataset.paper_skew;
  d["augment"] = cfg.dataset.augment;
  d["max_rotation_degrees"] = cfg.dataset.augment_limits.max_rotation_degrees;
  d["max_blur_sigma"] = cfg.dataset.augment_limits.max_blur_sigma;
  j["dataset"] = d;
  json t;
  t["learning_rate"] = cfg.train.learning_rate;
  t["momentum"] = cfg.train.momentum;
  t["batch_size"] = cfg.train.batch_size;
  t["epochs"] = cfg.train.epochs;
  t["dropout"] = cfg.train.dropout;
  t["val_ratio"] = cfg.val_ratio;
  t["kfold"] = cfg.kfold;
  t["fc1_width"] = cfg.fc1_width;
  t["fc2_width"] = cfg.fc2_width;
  t["width_multiplier"] = cfg.width_multiplier;
  j["train"] = t;
  json a;
  json shapes = json::array();
  for (PatchShape s : cfg.attack_shapes) shapes.push_back(shape_name(s));
  a["shapes"] = shapes;
  a["horizontal_max"] = cfg.attack.horizontal_max;
  a["vertical_max"] = cfg.attack.vertical_max;
  a["circular_max"] = cfg.attack.circular_max;
  a["require_misclassification"] = cfg.attack.require_misclassification;
  a["circular_stride"] = cfg.attack.circular_stride;
  a["subset"] = cfg.attack_subset;
  a["per_class_cap"] = cfg.attack_per_class_cap;
  j["attack"] = a;
  json v;
  v["clean_fraction"] = cfg.advmix.clean_fraction;
  v["shape_probs"] = {cfg.advmix.shape_probs[0], cfg.advmix.shape_probs[1],
                      cfg.advmix.shape_probs[2]};
  v["online"] = cfg.advmix.online;
  v["exact_split"] = cfg.advmix.exact_split;
  v["epochs"] = cfg.advtrain_epochs;
  v["horizontal_max"] = cfg.advmix.attack.horizontal_max;
  v["vertical_max"] = cfg.advmix.attack.vertical_max;
  v["circular_max"] = cfg.advmix.attack.circular_max;
  j["advtrain"] = v;
  json an;
  an["transfer_width_multiplier"] = cfg.transfer_width_multiplier;
  an["transfer_seed_offset"] = cfg.transfer_seed_offset;
  j["analysis"] = an;
  return j.dump(2) + "\n";
}

RunConfig desk_profile() {
  // 13 classes x 100 images at 80x48, Table-1 training settings, and a
  // physical-tampering threat model: bands up to 20% of the height / 25% of
  // the width, disks up to radius 8, circular centers on a stride-3 grid.
  return parse_run_config_json(R"({
    "train": {"epochs": 10},
    "attack": {"horizontal_max": 16, "vertical_max": 12, "circular_max": 8,
               "circular_stride": 3},
    "advtrain": {"epochs": 14, "shape_probs": [0.3, 0.4, 0.3]}
  })");
}

RunConfig tiny_profile() {
  return parse_run_config_json(R"({
    "dataset": {"per_class_count": 8, "height": 48, "width": 32},
    "train": {"epochs": 4, "fc1_width": 64, "fc2_width": 32},
    "attack": {"per_class_cap": 1, "circular_stride": 2},
    "advtrain": {"epochs": 3}
  })");
}

int effective_threads(const RunConfig& cfg) {
  return cfg.threads > 0 ? cfg.threads : default_threads();
}

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write: " + path);
  out << text;
}

// The only output that may differ between reruns.
void write_run_meta(const std::string& out_dir, const std::string& command, double wall_seconds) {
  json j;
  j["command"] = command;
  auto now = std::chrono::system_clock::now().time_since_epoch();
  j["unix_time"] = std::chrono::duration_cast<std::chrono::seconds>(now).count();
  j["wall_seconds"] = wall_seconds;
  write_text((fs::path(out_dir) / "run_meta.json").string(), j.dump(2) + "\n");
}

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void prepare_out_dir(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_text((fs::path(out_dir) / "resolved_config.json").string(), run_config_to_json(cfg));
}

}  // namespace

void run_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  Stopwatch sw;
  prepare_out_dir(cfg, out_dir);
  Dataset ds = generate_dataset(cfg.dataset);
  save_dataset(ds, out_dir);
  write_run_meta(out_dir, "gen-data", sw.seconds());
}

namespace {

TrainOutputs train_impl(const RunConfig& cfg, const std::string& dataset_dir,
                        const std::string& out_dir, bool attack_aware) {
  Stopwatch sw;
  prepare_out_dir(cfg, out_dir);
  Dataset ds = load_dataset(dataset_dir);
  auto [train_set, val_set] = split_dataset(ds.images, cfg.val_ratio, cfg.seed);

  LpcrModel model = build_lpcr(ds.manifest.height, ds.manifest.width,
                               static_cast<int>(ds.manifest.classes.size()), cfg.fc1_width,
                               cfg.fc2_width, cfg.width_multiplier);
  model.classes = ds.manifest.classes;

  TrainConfig tc = cfg.train;
  tc.threads = effective_threads(cfg);

  std::vector<EpochStats> history;
  if (attack_aware) {
    if (cfg.advtrain_epochs > 0) tc.epochs = cfg.advtrain_epochs;
    AdvMixConfig mix = cfg.advmix;
    // Checkpoint selection scores clean and perturbed validation together,
    // otherwise the first epoch that saturates clean accuracy wins and the
    // later, more robust epochs are thrown away.
    std::vector<GlyphImage> val_mix = val_set;
    {
      Rng vrng(Rng(mix.seed).split(0x7A1).next_u64());
      for (const auto& g : val_set) {
        Rng r = vrng.split(fnv1a64(reinterpret_cast<const std::uint8_t*>(g.id.data()), g.id.size()));
        auto [img, patch] = random_patch(g, r, mix);
        (void)patch;
        img.id += "__val_patched";
        val_mix.push_back(std::move(img));
      }
    }
    history = train_aa_lpcr(model, train_set, val_mix, tc, mix);
    std::vector<MixEntry> entries;
    build_adversarial_train_set(train_set, mix, &entries);
    write_mix_manifest_json(entries, (fs::path(out_dir) / "mix_manifest.json").string());
  } else {
    history = train(model, train_set, val_set, tc);
  }

  std::string model_file =
      (fs::path(out_dir) / (attack_aware ? "aa_model.bin" : "model.bin")).string();
  save_model(model, model_file);
  write_history_csv(history, (fs::path(out_dir) / "history.csv").string());

  Metrics vm = evaluate(model, val_set, tc.threads);
  json metrics;
  metrics["val_accuracy"] = vm.accuracy;
  metrics["mean_loss"] = vm.mean_loss;
  metrics["best_epoch"] = model.prov.best_epoch;
  metrics["train_size"] = train_set.size();
  metrics["val_size"] = val_set.size();
  metrics["attack_aware"] = attack_aware;
  write_text((fs::path(out_dir) / "metrics.json").string(), metrics.dump(2) + "\n");

  if (!attack_aware && cfg.kfold >= 2) {
    KfoldResult kf = kfold_cv(ds.images, cfg.kfold, tc, ds.manifest.height, ds.manifest.width,
                              static_cast<int>(ds.manifest.classes.size()), cfg.fc1_width,
                              cfg.fc2_width, cfg.width_multiplier);
    std::ofstream out(fs::path(out_dir) / "kfold.csv");
    out << "fold,accuracy,mean_loss\n";
    char buf[64];
    for (std::size_t f = 0; f < kf.fold_metrics.size(); ++f) {
      std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f\n", f, kf.fold_metrics[f].accuracy,
                    kf.fold_metrics[f].mean_loss);
      out << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,%.6f,\nstddev,%.6f,\n", kf.mean_accuracy,
                  kf.stddev_accuracy);
    out << buf;
  }

  write_run_meta(out_dir, attack_aware ? "adv-train" : "train", sw.seconds());
  TrainOutputs outputs;
  outputs.model_file = model_file;
  outputs.val_accuracy = vm.accuracy;
  return outputs;
}

}  // namespace

TrainOutputs run_train(const RunConfig& cfg, const std::string& dataset_dir,
                       const std::string& out_dir) {
  return train_impl(cfg, dataset_dir, out_dir, false);
}

TrainOutputs run_adv_train(const RunConfig& cfg, const std::string& dataset_dir,
                           const std::string& out_dir) {
  return train_impl(cfg, dataset_dir, out_dir, true);
}

std::vector<GlyphImage> select_attack_subset(const RunConfig& cfg,
                                             const std::vector<GlyphImage>& all) {
  std::vector<GlyphImage> subset;
  if (cfg.attack_subset == "all") {
    subset = all;
  } else {
    auto [train_set, val_set] = split_dataset(all, cfg.val_ratio, cfg.seed);
    subset = cfg.attack_subset == "train" ? std::move(train_set) : std::move(val_set);
  }
  if (cfg.attack_per_class_cap > 0) {
    std::vector<int> taken(kNumClasses + 32, 0);
    std::vector<GlyphImage> capped;
    for (auto& g : subset) {
      if (g.label >= static_cast<int>(taken.size())) taken.resize(g.label + 1, 0);
      if (taken[g.label] < cfg.attack_per_class_cap) {
        taken[g.label]++;
        capped.push_back(std::move(g));
      }
    }
    subset = std::move(capped);
  }
  return subset;
}

AttackOutputs run_attack(const RunConfig& cfg, const std::string& model_file,
                         const std::string& dataset_dir, const std::string& out_dir) {
  Stopwatch sw;
  prepare_out_dir(cfg, out_dir);
  LpcrModel model = load_model(model_file);
  Dataset ds = load_dataset(dataset_dir);
  std::vector<GlyphImage> subset = select_attack_subset(cfg, ds.images);
  if (subset.empty()) throw ConfigError("attack: selected subset is empty");

  CnnClassifier clf(model, 1);
  AttackRunResult result =
      attack_dataset(clf, subset, cfg.attack_shapes, cfg.attack, effective_threads(cfg));

  AttackOutputs outputs;
  outputs.records_file = (fs::path(out_dir) / "records.jsonl").string();
  outputs.hard_set_dir = (fs::path(out_dir) / "hard_set").string();
  write_records_jsonl(result.records, outputs.records_file);
  write_summary_csv(result.summaries, (fs::path(out_dir) / "summary.csv").string());
  save_hard_set(result, model.classes, ds.manifest.height, ds.manifest.width,
                outputs.hard_set_dir);
  outputs.summaries = result.summaries;
  write_run_meta(out_dir, "attack", sw.seconds());
  return outputs;
}

Metrics run_eval(const RunConfig& cfg, const std::string& model_file, const std::string& data_dir,
                 const std::string& out_file) {
  LpcrModel model = load_model(model_file);
  std::vector<GlyphImage> images;
  if (fs::exists(fs::path(data_dir) / "hard_manifest.json")) {
    images = load_hard_set(data_dir).images;
  } else {
    images = load_dataset(data_dir).images;
  }
  Metrics m = evaluate(model, images, effective_threads(cfg));
  json j;
  j["accuracy"] = m.accuracy;
  j["mean_loss"] = m.mean_loss;
  j["per_class_accuracy"] = m.per_class_accuracy;
  j["count"] = images.size();
  if (!out_file.empty()) {
    fs::create_directories(fs::path(out_file).parent_path().empty()
                               ? "."
                               : fs::path(out_file).parent_path().string());
    write_text(out_file, j.dump(2) + "\n");
  }
  return m;
}

void run_report(const RunConfig& cfg, const ReportInputs& inputs, const std::string& out_dir) {
  Stopwatch sw;
  prepare_out_dir(cfg, out_dir);
  std::string classes(cfg.dataset.classes.begin(), cfg.dataset.classes.end());
  int num_classes = static_cast<int>(classes.size());
  json index;
  index["files"] = json::array();
  auto note = [&](const std::string& f) { index["files"].push_back(f); };

  std::vector<AttackRecord> baseline = read_records_jsonl(inputs.baseline_records);
  if (!baseline.empty()) {
    // Per-shape confusion over attack outcomes.
    std::vector<PatchShape> shapes;
    for (const auto& r : baseline)
      if (std::find(shapes.begin(), shapes.end(), r.shape) == shapes.end())
        shapes.push_back(r.shape);
    for (PatchShape s : shapes) {
      std::vector<AttackRecord> of_shape;
      for (const auto& r : baseline)
        if (r.shape == s) of_shape.push_back(r);
      ConfusionMatrix cm = confusion_matrix(of_shape, num_classes);
      std::string base = std::string("confusion_baseline_") + shape_name(s);
      write_confusion_csv(cm, classes, (fs::path(out_dir) / (base + ".csv")).string());
      write_confusion_json(cm, classes, (fs::path(out_dir) / (base + ".json")).string());
      write_confusion_pgm(cm, (fs::path(out_dir) / (base + ".pgm")).string());
      note(base + ".csv");
      note(base + ".json");
      note(base + ".pgm");
    }

    MisclassificationDistribution dist = misclassification_distribution(baseline, num_classes);
    write_distribution_csv(dist, classes, (fs::path(out_dir) / "distribution_baseline.csv").string());
    note("distribution_baseline.csv");

    ConfMseTable table = confidence_mse_table(baseline, num_classes);
    write_conf_mse_csv(table, classes, (fs::path(out_dir) / "confidence_mse_baseline.csv").string());
    note("confidence_mse_baseline.csv");

    std::vector<RegionMap> regions =
        attack_prone_regions(baseline, cfg.dataset.height, PatchShape::Horizontal);
    write_region_maps(regions, classes, cfg.dataset.width,
                      (fs::path(out_dir) / "regions").string(), "baseline");
    note("regions/regions_baseline.json");
  }

  if (!inputs.aa_records.empty()) {
    std::vector<AttackRecord> aa = read_records_jsonl(inputs.aa_records);
    if (!aa.empty() && !baseline.empty()) {
      std::vector<RateComparison> cmp = success_rate_comparison(baseline, aa);
      write_comparison_csv(cmp, (fs::path(out_dir) / "success_comparison.csv").string());
      note("success_comparison.csv");
      ConfMseTable table = confidence_mse_table(aa, num_classes);
      write_conf_mse_csv(table, classes, (fs::path(out_dir) / "confidence_mse_aa.csv").string());
      note("confidence_mse_aa.csv");
    }
  }

  if (!inputs.hard_set_dir.empty() && !inputs.transfer_model_file.empty()) {
    HardSet hs = load_hard_set(inputs.hard_set_dir);
    if (!hs.images.empty()) {
      LpcrModel external = load_model(inputs.transfer_model_file);
      TransferResult tr = transfer_eval(hs.images, external, effective_threads(cfg));
      write_transfer_csv(tr, classes, (fs::path(out_dir) / "transfer.csv").string());
      note("transfer.csv");
    }
  }

  write_text((fs::path(out_dir) / "bundle_index.json").string(), index.dump(2) + "\n");
  write_run_meta(out_dir, "report", sw.seconds());
}

GradCheckReport run_gradcheck(const std::string& out_dir, bool sabotage_gradient) {
  GradCheckReport combined;
  auto merge = [&](const GradCheckReport& r, const std::string& tag, double threshold,
                   std::string& text) {
    char buf[200];
    for (const auto& e : r.entries) {
      std::snprintf(buf, sizeof(buf),
                    "%-11s %-18s max_rel_err=%.3e max_abs_err=%.3e  (limit %.0e)\n", tag.c_str(),
                    e.name.c_str(), e.max_rel_err, e.max_abs_err, threshold);
      text += buf;
      combined.entries.push_back(
          {tag + ":" + e.name, e.max_rel_err, e.max_abs_err, e.max_effective_err});
    }
    combined.worst = std::max(combined.worst, r.worst);
    combined.worst_effective = std::max(combined.worst_effective, r.worst_effective);
    if (r.worst_effective >= threshold)
      throw NumericError("gradient check failed for " + tag + ": worst " +
                         std::to_string(r.worst_effective) + " >= " + std::to_string(threshold));
  };

  std::string text;
  Rng rng(20240811);

  // fc-only stack.
  {
    std::vector<LayerSpec> specs = {{LayerKind::Fc, 24}, {LayerKind::Relu},
                                    {LayerKind::Fc, 13},  {LayerKind::Softmax}};
    NetT<double> net = make_net<double>(2, 4, 4, specs);
    init_params(net, rng.split(1));
    TensorT<double> x({4, 2, 4, 4});
    Rng xr = rng.split(2);
    for (auto& v : x.data) v = xr.next_unit();
    std::vector<int> labels = {1, 7, 12, 0};
    GradCheckReport r = gradient_check(net, x, labels, 1e-5, true,
                                       sabotage_gradient ? 0.25 : 0.0);
    merge(r, "fc_only", 1e-5, text);
  }

  // Full conv/bn/pool stack at 16x16, under 5k parameters.
  {
    std::vector<LayerSpec> specs;
    auto block = [&](int f) {
      specs.push_back({LayerKind::Conv3x3, f});
      specs.push_back({LayerKind::BatchNorm});
      specs.push_back({LayerKind::Relu});
    };
    block(4);
    block(4);
    specs.push_back({LayerKind::MaxPool2});
    block(6);
    block(6);
    specs.push_back({LayerKind::MaxPool2});
    block(8);
    block(8);
    specs.push_back({LayerKind::MaxPool2});
    block(10);
    block(10);
    block(10);
    specs.push_back({LayerKind::MaxPool2});
    specs.push_back({LayerKind::Fc, 12});
    specs.push_back({LayerKind::Relu});
    specs.push_back({LayerKind::Dropout, 0, 0.0});  // present but inactive
    specs.push_back({LayerKind::Fc, 8});
    specs.push_back({LayerKind::Relu});
    specs.push_back({LayerKind::Fc, 13});
    specs.push_back({LayerKind::Softmax});
    NetT<double> net = make_net<double>(3, 16, 16, specs);
    init_params(net, rng.split(3));
    TensorT<double> x({2, 3, 16, 16});
    Rng xr = rng.split(4);
    for (auto& v : x.data) v = xr.next_unit();
    std::vector<int> labels = {3, 9};
    GradCheckReport r = gradient_check(net, x, labels, 1e-5, true);
    merge(r, "full_stack", 1e-3, text);

    // Unfrozen batch statistics exercise the train-mode backward.
    GradCheckReport r2 = gradient_check(net, x, labels, 1e-5, false);
    merge(r2, "batch_stats", 1e-3, text);
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "gradcheck.txt").string(), text);
  }
  return combined;
}

void run_full_pipeline(const RunConfig& cfg, const std::string& root_dir) {
  fs::create_directories(root_dir);
  fs::path root(root_dir);
  run_gen_data(cfg, (root / "dataset").string());
  TrainOutputs base = run_train(cfg, (root / "dataset").string(), (root / "train").string());
  AttackOutputs atk =
      run_attack(cfg, base.model_file, (root / "dataset").string(), (root / "attack").string());
  TrainOutputs aa = run_adv_train(cfg, (root / "dataset").string(), (root / "advtrain").string());
  AttackOutputs re_atk =
      run_attack(cfg, aa.model_file, (root / "dataset").string(), (root / "attack_aa").string());

  RunConfig transfer_cfg = cfg;
  transfer_cfg.seed = cfg.seed + cfg.transfer_seed_offset;
  transfer_cfg.train.seed = transfer_cfg.seed;
  transfer_cfg.width_multiplier = cfg.transfer_width_multiplier;
  transfer_cfg.fc1_width = std::max(1, static_cast<int>(cfg.fc1_width * cfg.transfer_width_multiplier));
  transfer_cfg.fc2_width = std::max(1, static_cast<int>(cfg.fc2_width * cfg.transfer_width_multiplier));
  TrainOutputs transfer =
      run_train(transfer_cfg, (root / "dataset").string(), (root / "transfer_model").string());

  run_eval(cfg, base.model_file, atk.hard_set_dir, (root / "eval_hard_baseline.json").string());
  run_eval(cfg, aa.model_file, atk.hard_set_dir, (root / "eval_hard_aa.json").string());

  ReportInputs ri;
  ri.baseline_records = atk.records_file;
  ri.aa_records = re_atk.records_file;
  ri.hard_set_dir = atk.hard_set_dir;
  ri.transfer_model_file = transfer.model_file;
  run_report(cfg, ri, (root / "report").string());
}

}  // namespace lpcr
