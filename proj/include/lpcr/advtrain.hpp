#pragma once

#include <vector>

#include "lpcr/attack.hpp"
#include "lpcr/model.hpp"

namespace lpcr {

struct AdvMixConfig {
  double clean_fraction = 0.5;
  // Probability of each shape for a perturbed image (mutually exclusive).
  double shape_probs[3] = {1.0 / 3, 1.0 / 3, 1.0 / 3};  // horizontal, vertical, circular
  AttackConfig attack;  // supplies the per-shape size thresholds
  std::uint64_t seed = 1;
  bool online = true;        // resample perturbations every epoch
  bool exact_split = false;  // exactly round((1-clean_fraction)*N) perturbed
};

void validate_mix_config(const AdvMixConfig& config);

// One shape by the configured probabilities, size uniform in [1, threshold],
// position uniform over in-bounds placements, color = darkest pixel. Label is
// never touched.
std::pair<GlyphImage, PatchSpec> random_patch(const GlyphImage& img, Rng& rng,
                                              const AdvMixConfig& config);

struct MixEntry {
  std::string id;
  bool perturbed = false;
  PatchSpec patch;  // meaningful only when perturbed
};

// Same size as the input; each image kept clean with probability
// clean_fraction, otherwise perturbed by one random patch.
std::vector<GlyphImage> build_adversarial_train_set(const std::vector<GlyphImage>& clean,
                                                    const AdvMixConfig& config,
                                                    std::vector<MixEntry>* manifest = nullptr);

// Retrains the architecture on the clean/perturbed mix. With online mixing
// the perturbations are redrawn every epoch from a per-epoch child stream of
// config.seed. The result is tagged attack-aware in its provenance.
std::vector<EpochStats> train_aa_lpcr(LpcrModel& model, const std::vector<GlyphImage>& clean_train,
                                      const std::vector<GlyphImage>& val_set,
                                      const TrainConfig& train_config, const AdvMixConfig& mix_config);

void write_mix_manifest_json(const std::vector<MixEntry>& entries, const std::string& path);

}  // namespace lpcr
