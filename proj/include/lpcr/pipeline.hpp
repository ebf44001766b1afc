#pragma once

#include <string>
#include <vector>

#include "lpcr/advtrain.hpp"
#include "lpcr/analysis.hpp"
#include "lpcr/attack.hpp"
#include "lpcr/dataset.hpp"
#include "lpcr/model.hpp"

namespace lpcr {

// One JSON document drives every command. Unknown keys are rejected; the
// resolved config (every knob, defaults filled in) is written next to each
// command's outputs. Wall-clock data goes only to run_meta.json.
struct RunConfig {
  std::uint64_t seed = 1;
  int threads = 0;  // 0 -> hardware concurrency

  DatasetConfig dataset;

  TrainConfig train;  // seed is derived from the top-level seed
  double val_ratio = 0.8;
  int kfold = 0;
  int fc1_width = 2304;
  int fc2_width = 500;
  double width_multiplier = 1.0;

  AttackConfig attack;
  std::vector<PatchShape> attack_shapes = {PatchShape::Horizontal, PatchShape::Vertical,
                                           PatchShape::Circular};
  std::string attack_subset = "val";  // val | train | all
  int attack_per_class_cap = 0;       // 0 -> no cap

  AdvMixConfig advmix;
  int advtrain_epochs = 0;  // 0 -> train.epochs

  double transfer_width_multiplier = 0.5;
  std::uint64_t transfer_seed_offset = 1;
};

RunConfig parse_run_config_json(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

// The default desk-scale profile: 13 classes x 100 images at 80x48.
RunConfig desk_profile();
// A miniature profile for end-to-end determinism checks.
RunConfig tiny_profile();

int effective_threads(const RunConfig& cfg);

// Commands. Each writes resolved_config.json and run_meta.json in out_dir and
// is rerunnable; rerunning with identical inputs reproduces every output byte
// except run_meta.json.
void run_gen_data(const RunConfig& cfg, const std::string& out_dir);

struct TrainOutputs {
  std::string model_file;
  double val_accuracy = 0;
};
TrainOutputs run_train(const RunConfig& cfg, const std::string& dataset_dir,
                       const std::string& out_dir);
TrainOutputs run_adv_train(const RunConfig& cfg, const std::string& dataset_dir,
                           const std::string& out_dir);

struct AttackOutputs {
  std::string records_file;
  std::string hard_set_dir;
  std::vector<ShapeSummary> summaries;
};
AttackOutputs run_attack(const RunConfig& cfg, const std::string& model_file,
                         const std::string& dataset_dir, const std::string& out_dir);

// data_dir may hold a dataset (manifest.json) or a hard set
// (hard_manifest.json).
Metrics run_eval(const RunConfig& cfg, const std::string& model_file, const std::string& data_dir,
                 const std::string& out_file);

struct ReportInputs {
  std::string baseline_records;            // required (may contain zero records)
  std::string aa_records;                  // optional
  std::string hard_set_dir;                // optional, enables transfer table
  std::string transfer_model_file;         // optional, enables transfer table
};
void run_report(const RunConfig& cfg, const ReportInputs& inputs, const std::string& out_dir);

// Finite-difference check of the layer kernels (double precision):
// an fc-only net at 1e-5 and a full conv/bn/pool stack at 1e-3.
// sabotage_gradient corrupts one analytic gradient to prove the check trips.
GradCheckReport run_gradcheck(const std::string& out_dir, bool sabotage_gradient = false);

// gen-data, train, attack, adv-train, re-attack, transfer model, report --
// used by the end-to-end determinism check.
void run_full_pipeline(const RunConfig& cfg, const std::string& root_dir);

// Subset selection used by run_attack (exposed for tests).
std::vector<GlyphImage> select_attack_subset(const RunConfig& cfg,
                                             const std::vector<GlyphImage>& all);

}  // namespace lpcr
