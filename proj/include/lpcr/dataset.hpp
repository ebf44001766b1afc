#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lpcr/glyphs.hpp"
#include "lpcr/image.hpp"
#include "lpcr/rng.hpp"

namespace lpcr {

// Rotation + blur applied to one image. Limits are checked by augment().
struct AugmentParams {
  double rotation_degrees = 0.0;
  double blur_sigma = 0.0;
};

struct AugmentLimits {
  double max_rotation_degrees = 10.0;
  double max_blur_sigma = 1.5;
};

struct DatasetConfig {
  std::vector<char> classes = {'0', '1', '2', '3', '4', '5', '6', '7', '8', '9', 'A', 'B', 'F'};
  int per_class_count = 100;
  int height = 80;   // divisible by 16
  int width = 48;    // divisible by 16
  std::uint64_t seed = 1;
  // Style ranges sampled per image.
  double stroke_min = 2.5, stroke_max = 4.5;
  int fg_gray_min = 15, fg_gray_max = 70;
  int bg_gray_min = 185, bg_gray_max = 240;
  int channel_tint = 10;       // per-channel offset from the sampled gray
  double jitter = 1.0;
  int min_contrast = 80;       // bg_gray_min - fg_gray_max - tints must reach this
  // Class-count skew mirroring the reference per-class distribution.
  bool paper_skew = false;
  // Augmentation applied at generation time (rotation/blur sampled per image).
  bool augment = true;
  AugmentLimits augment_limits;
};

struct ManifestEntry {
  std::string id;
  int label = -1;
  std::string filename;
  std::string checksum;  // fnv1a64 of pixel bytes, hex
};

struct DatasetManifest {
  int version = 1;
  int height = 0, width = 0;
  std::string classes;  // symbols in label order
  std::vector<ManifestEntry> entries;
};

struct Dataset {
  std::vector<GlyphImage> images;
  DatasetManifest manifest;
};

// The per-class image counts of the reference 1057-image set, label order
// {0..9, A, B, F}. Used by the paper_skew profile and its tests.
extern const int kReferenceClassCounts[kNumClasses];

void validate_config(const DatasetConfig& config);

// Deterministic: identical config yields bit-identical images and manifest.
Dataset generate_dataset(const DatasetConfig& config);

// Separable Gaussian, truncated at 3 sigma, normalized. sigma 0 -> {1}.
std::vector<double> gaussian_kernel(double sigma);

// Rotation (bilinear, corners filled with the image's lightest color) then
// blur. Output dims equal input dims.
Image augment(const Image& img, const AugmentParams& params, const AugmentLimits& limits = {});

Rgb lightest_pixel(const Image& img);

// Stratified split; deterministic under seed. Throws on classes with < 2
// images or a ratio outside (0,1).
std::pair<std::vector<GlyphImage>, std::vector<GlyphImage>>
split_dataset(const std::vector<GlyphImage>& all, double ratio, std::uint64_t seed);

// Stratified k-fold partition: returns for each image its fold index in [0,k).
std::vector<int> kfold_assignments(const std::vector<GlyphImage>& all, int k, std::uint64_t seed);

// PPM files plus manifest.json under dir. Load verifies checksums and labels.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace lpcr
