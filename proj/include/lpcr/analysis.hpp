#pragma once

#include <string>
#include <vector>

#include "lpcr/attack.hpp"
#include "lpcr/model.hpp"

namespace lpcr {

// Rows = true class, cols = predicted. Percentages are row-normalized to 100
// for rows with at least one sample.
struct ConfusionMatrix {
  int n = 0;
  std::vector<std::int64_t> counts;  // n*n row-major
  std::vector<double> percent;       // n*n

  std::int64_t count(int t, int p) const { return counts[static_cast<std::size_t>(t) * n + p]; }
  double pct(int t, int p) const { return percent[static_cast<std::size_t>(t) * n + p]; }
};

ConfusionMatrix confusion_matrix(const std::vector<AttackRecord>& records, int num_classes);
ConfusionMatrix confusion_matrix(LpcrModel& model, const std::vector<GlyphImage>& dataset,
                                 int threads = 1);

struct ClassShapeStat {
  int label = 0;
  PatchShape shape = PatchShape::Horizontal;
  std::int64_t misclassified = 0;
  std::int64_t total = 0;
};

struct MisclassificationDistribution {
  std::vector<PatchShape> shapes;
  std::vector<ClassShapeStat> rows;  // class-major, shape-minor; empty classes kept
  double overall_rate = 0;           // sum misclassified / sum total
};

MisclassificationDistribution misclassification_distribution(
    const std::vector<AttackRecord>& records, int num_classes);

struct ConfMseCell {
  bool present = false;  // false when the class has no successful attack
  double mean_confidence_pct = 0;
  double mean_mse = 0;
  std::int64_t successes = 0;
};

struct ConfMseTable {
  std::vector<PatchShape> shapes;
  int num_classes = 0;
  std::vector<ConfMseCell> cells;  // class-major, shape-minor
  std::vector<ConfMseCell> grand;  // one per shape, pooled over successes

  const ConfMseCell& cell(int label, int shape_idx) const {
    return cells[static_cast<std::size_t>(label) * shapes.size() + shape_idx];
  }
};

ConfMseTable confidence_mse_table(const std::vector<AttackRecord>& records, int num_classes);

// Per-row vulnerability of one (true, predicted) pair under horizontal bands:
// score[y] = fraction of that pair's successful attacks whose band covers y.
struct RegionMap {
  int true_label = 0;
  int predicted_label = 0;
  int height = 0;
  std::vector<std::int64_t> row_hits;  // per row
  std::int64_t total = 0;              // successes in the pair

  double score(int y) const {
    return total ? static_cast<double>(row_hits[y]) / static_cast<double>(total) : 0.0;
  }
};

std::vector<RegionMap> attack_prone_regions(const std::vector<AttackRecord>& records, int height,
                                            PatchShape shape = PatchShape::Horizontal);

struct TransferClassStat {
  int label = 0;
  std::int64_t misclassified = 0;
  std::int64_t total = 0;
};

struct TransferResult {
  double misclassification_rate = 0;
  std::vector<TransferClassStat> per_class;
};

// Misclassification rate of an independently trained model on a hard set.
// Rejects an empty hard set.
TransferResult transfer_eval(const std::vector<GlyphImage>& hard_set, LpcrModel& external_model,
                             int threads = 1);

struct RateComparison {
  PatchShape shape = PatchShape::Horizontal;
  double baseline_rate = 0;
  double aa_rate = 0;
  double delta = 0;  // baseline - aa
};

// Requires both record sets to cover the same shape set.
std::vector<RateComparison> success_rate_comparison(const std::vector<AttackRecord>& baseline,
                                                    const std::vector<AttackRecord>& aa);

// ---------------------------------------------------------------------------
// Writers. All outputs are pure functions of their inputs.

void write_confusion_csv(const ConfusionMatrix& cm, const std::string& classes,
                         const std::string& path);
void write_confusion_json(const ConfusionMatrix& cm, const std::string& classes,
                          const std::string& path);
// Grayscale heatmap, row-normalized percentages scaled to [0,255], cell_px
// square pixels per cell.
void write_confusion_pgm(const ConfusionMatrix& cm, const std::string& path, int cell_px = 12);
void write_distribution_csv(const MisclassificationDistribution& dist, const std::string& classes,
                            const std::string& path);
void write_conf_mse_csv(const ConfMseTable& table, const std::string& classes,
                        const std::string& path);
void write_region_maps(const std::vector<RegionMap>& maps, const std::string& classes, int width,
                       const std::string& dir, const std::string& tag);
void write_transfer_csv(const TransferResult& tr, const std::string& classes,
                        const std::string& path);
void write_comparison_csv(const std::vector<RateComparison>& rows, const std::string& path);

}  // namespace lpcr
