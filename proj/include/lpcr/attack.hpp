#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lpcr/image.hpp"
#include "lpcr/model.hpp"
#include "lpcr/patched_eval.hpp"

namespace lpcr {

enum class PatchShape { Horizontal, Vertical, Circular };

const char* shape_name(PatchShape s);
PatchShape shape_from_name(const std::string& name);

// A solid-color geometric mask. Horizontal: rows [pos_row, pos_row+size) over
// the full width. Vertical: cols [pos_col, pos_col+size) over the full
// height. Circular: filled disk of radius `size` centered at
// (pos_row, pos_col), pixel (y,x) covered iff dy^2+dx^2 <= size^2.
struct PatchSpec {
  PatchShape shape = PatchShape::Horizontal;
  int pos_row = 0;
  int pos_col = 0;
  int size = 1;
  Rgb color;
};

struct AttackConfig {
  // Size thresholds; 0 means the shape default (h/2, w/2, min(h,w)/4).
  int horizontal_max = 0;
  int vertical_max = 0;
  int circular_max = 0;
  // Hits require an actual misclassification (the documented behavior);
  // false reproduces the bare loss-improvement counter.
  bool require_misclassification = true;
  // Center-grid stride for the circular sweep (bands always sweep stride 1).
  int circular_stride = 1;
};

struct AttackRecord {
  std::string image_id;
  PatchShape shape = PatchShape::Horizontal;
  int true_label = -1;
  bool success = false;
  std::optional<PatchSpec> patch;
  int predicted = -1;
  double confidence = 0;  // softmax probability of the predicted class
  double loss = 0;        // cross-entropy against the true label
  double mse = 0;
};

// ---------------------------------------------------------------------------
// Geometry

void validate_patch(const PatchSpec& p, int h, int w);
bool pixel_in_patch(const PatchSpec& p, int y, int x);
Rect patch_bbox(const PatchSpec& p);

// Copy of `img` with exactly the masked pixels set to p.color.
Image perturb_image(const Image& img, const PatchSpec& p);
void apply_patch_in_place(Image& img, const PatchSpec& p);
bool patch_changes_image(const Image& img, const PatchSpec& p);

// Pixel minimizing r+g+b; ties resolved to the first in row-major order.
Rgb darkest_pixel(const Image& img);

int shape_threshold(PatchShape s, int h, int w, const AttackConfig& c);

// All in-bounds (row, col) placements for the given shape and size, in sweep
// order.
std::vector<std::pair<int, int>> patch_positions(PatchShape s, int size, int h, int w,
                                                 int circular_stride = 1);

// Mean squared difference over all h*w*3 channel values, 0-255 scale.
double mse(const Image& a, const Image& b);

// ---------------------------------------------------------------------------
// Model interface used by the attack

struct ScoreResult {
  int predicted = -1;
  double confidence = 0;
  double loss = 0;
};

ScoreResult score_from_logits(const float* logits, int n, int true_label);
ScoreResult score_from_logits(const double* logits, int n, int true_label);

// Per-image scoring session; the attack probes many patches per image.
class AttackContext {
 public:
  virtual ~AttackContext() = default;
  virtual ScoreResult score_patch(const PatchSpec& patch) = 0;
  virtual ScoreResult score_clean() = 0;
};

class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual int num_classes() const = 0;
  virtual ScoreResult score(const Image& img, int true_label) = 0;
  virtual std::unique_ptr<AttackContext> make_context(const Image& img, int true_label) = 0;
};

// Eval-mode CNN classifier; contexts reuse cached activations so a sweep
// recomputes only patch-dependent regions.
class CnnClassifier : public Classifier {
 public:
  explicit CnnClassifier(LpcrModel& model, int threads = 1)
      : model_(model), threads_(threads) {}
  int num_classes() const override { return model_.net.out_dim(); }
  ScoreResult score(const Image& img, int true_label) override;
  std::unique_ptr<AttackContext> make_context(const Image& img, int true_label) override;

 private:
  LpcrModel& model_;
  int threads_;
};

// ---------------------------------------------------------------------------
// Attacks

struct AttackOutcome {
  AttackRecord record;
  Image adversarial;  // equals the input image when success is false
};

// Sweeps sizes from 1 upward; per size, scores every placement, keeps the
// max-loss hit; stops at the smallest size with at least one hit. Failure is
// a value: success=false and the original image.
AttackOutcome exhaustive_mask_attack(Classifier& model, const GlyphImage& img, PatchShape shape,
                                     const AttackConfig& config);
AttackOutcome exhaustive_mask_attack(AttackContext& ctx, const GlyphImage& img, PatchShape shape,
                                     const AttackConfig& config);

// One-step sign-of-gradient perturbation on the [0,1] pixel scale.
Image fgsm_attack(LpcrModel& model, const Image& img, int true_label, double epsilon);

struct HardExample {
  GlyphImage adversarial;  // id = "<original_id>__<shape>", label = true label
  std::string original_id;
  PatchShape shape = PatchShape::Horizontal;
  PatchSpec patch;
  int predicted = -1;
  double confidence = 0;
  double loss = 0;
  double mse = 0;
};

struct ShapeSummary {
  PatchShape shape = PatchShape::Horizontal;
  int attempts = 0;
  int successes = 0;
  double rate = 0;
  double mean_confidence = 0;  // over successes
  double mean_mse = 0;         // over successes
};

struct AttackRunResult {
  std::vector<AttackRecord> records;  // |dataset| * |shapes|, image-major
  std::vector<HardExample> hard_set;
  std::vector<ShapeSummary> summaries;
};

AttackRunResult attack_dataset(Classifier& model, const std::vector<GlyphImage>& dataset,
                               const std::vector<PatchShape>& shapes, const AttackConfig& config,
                               int threads = 1);

// ---------------------------------------------------------------------------
// Persistence

void write_records_jsonl(const std::vector<AttackRecord>& records, const std::string& path);
std::vector<AttackRecord> read_records_jsonl(const std::string& path);
void write_summary_csv(const std::vector<ShapeSummary>& summaries, const std::string& path);

struct HardSet {
  std::string classes;
  int height = 0, width = 0;
  std::vector<GlyphImage> images;     // labels are the original true labels
  std::vector<HardExample> examples;  // aligned with images
};

void save_hard_set(const AttackRunResult& result, const std::string& classes, int h, int w,
                   const std::string& dir);
HardSet load_hard_set(const std::string& dir);

}  // namespace lpcr
