#include "lpcr/advtrain.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "lpcr/errors.hpp"

using json = nlohmann::ordered_json;

namespace lpcr {

void validate_mix_config(const AdvMixConfig& config) {
  if (!(config.clean_fraction > 0.0 && config.clean_fraction < 1.0))
    throw ConfigError("advtrain: clean_fraction must be in (0,1)");
  double sum = config.shape_probs[0] + config.shape_probs[1] + config.shape_probs[2];
  if (std::abs(sum - 1.0) > 1e-9 || config.shape_probs[0] < 0 || config.shape_probs[1] < 0 ||
      config.shape_probs[2] < 0)
    throw ConfigError("advtrain: shape probabilities must be nonnegative and sum to 1");
}

std::pair<GlyphImage, PatchSpec> random_patch(const GlyphImage& img, Rng& rng,
                                              const AdvMixConfig& config) {
  const int h = img.image.h, w = img.image.w;

  double u = rng.next_unit();
  PatchShape shape;
  if (u < config.shape_probs[0]) shape = PatchShape::Horizontal;
  else if (u < config.shape_probs[0] + config.shape_probs[1]) shape = PatchShape::Vertical;
  else shape = PatchShape::Circular;

  int threshold = shape_threshold(shape, h, w, config.attack);
  PatchSpec p;
  p.shape = shape;
  p.size = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(threshold)));
  switch (shape) {
    case PatchShape::Horizontal:
      p.pos_row = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(h - p.size + 1)));
      break;
    case PatchShape::Vertical:
      p.pos_col = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(w - p.size + 1)));
      break;
    case PatchShape::Circular:
      p.pos_row = p.size + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(h - 2 * p.size)));
      p.pos_col = p.size + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(w - 2 * p.size)));
      break;
  }
  p.color = darkest_pixel(img.image);

  GlyphImage out = img;
  apply_patch_in_place(out.image, p);
  return {std::move(out), p};
}

std::vector<GlyphImage> build_adversarial_train_set(const std::vector<GlyphImage>& clean,
                                                    const AdvMixConfig& config,
                                                    std::vector<MixEntry>* manifest) {
  validate_mix_config(config);
  if (clean.empty()) throw ConfigError("advtrain: empty clean set");

  Rng root(config.seed);
  const std::size_t n = clean.size();

  std::vector<bool> perturb(n, false);
  if (config.exact_split) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng pick = root.split(0xE5);
    shuffle_indices(idx, pick);
    auto k = static_cast<std::size_t>(
        std::lround((1.0 - config.clean_fraction) * static_cast<double>(n)));
    for (std::size_t i = 0; i < k; ++i) perturb[idx[i]] = true;
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      Rng coin = root.split2(0xC0, i);
      perturb[i] = coin.next_unit() >= config.clean_fraction;
    }
  }

  std::vector<GlyphImage> mixed;
  mixed.reserve(n);
  if (manifest) manifest->clear();
  for (std::size_t i = 0; i < n; ++i) {
    MixEntry entry;
    entry.id = clean[i].id;
    if (perturb[i]) {
      Rng prng = root.split2(0x9A, i);
      auto [img, patch] = random_patch(clean[i], prng, config);
      entry.perturbed = true;
      entry.patch = patch;
      mixed.push_back(std::move(img));
    } else {
      mixed.push_back(clean[i]);
    }
    if (manifest) manifest->push_back(std::move(entry));
  }
  return mixed;
}

std::vector<EpochStats> train_aa_lpcr(LpcrModel& model, const std::vector<GlyphImage>& clean_train,
                                      const std::vector<GlyphImage>& val_set,
                                      const TrainConfig& train_config,
                                      const AdvMixConfig& mix_config) {
  validate_mix_config(mix_config);
  if (clean_train.empty()) throw ConfigError("advtrain: empty clean set");

  std::vector<GlyphImage> epoch_buffer;
  std::vector<GlyphImage> frozen;
  if (!mix_config.online) {
    AdvMixConfig frozen_cfg = mix_config;
    frozen_cfg.seed = Rng(mix_config.seed).split(0).next_u64();
    frozen = build_adversarial_train_set(clean_train, frozen_cfg);
  }

  std::function<const std::vector<GlyphImage>&(int)> provider =
      [&](int epoch) -> const std::vector<GlyphImage>& {
    if (!mix_config.online) return frozen;
    AdvMixConfig ec = mix_config;
    ec.seed = Rng(mix_config.seed).split(static_cast<std::uint64_t>(epoch)).next_u64();
    epoch_buffer = build_adversarial_train_set(clean_train, ec);
    return epoch_buffer;
  };

  std::vector<EpochStats> history = train_with_provider(model, provider, val_set, train_config);
  model.prov.attack_aware = true;
  model.prov.dataset_hash = dataset_fingerprint(clean_train);
  return history;
}

void write_mix_manifest_json(const std::vector<MixEntry>& entries, const std::string& path) {
  json root;
  root["version"] = 1;
  json arr = json::array();
  for (const auto& e : entries) {
    json je;
    je["id"] = e.id;
    je["perturbed"] = e.perturbed;
    if (e.perturbed) {
      json jp;
      jp["shape"] = shape_name(e.patch.shape);
      jp["row"] = e.patch.pos_row;
      jp["col"] = e.patch.pos_col;
      jp["size"] = e.patch.size;
      jp["color"] = {e.patch.color.r, e.patch.color.g, e.patch.color.b};
      je["patch"] = jp;
    } else {
      je["patch"] = nullptr;
    }
    arr.push_back(je);
  }
  root["entries"] = arr;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write mix manifest: " + path);
  out << root.dump(2) << "\n";
}

}  // namespace lpcr
