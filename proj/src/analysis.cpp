#include "lpcr/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "lpcr/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace lpcr {

namespace {

std::vector<PatchShape> shapes_in(const std::vector<AttackRecord>& records) {
  std::vector<PatchShape> shapes;
  for (const auto& r : records)
    if (std::find(shapes.begin(), shapes.end(), r.shape) == shapes.end())
      shapes.push_back(r.shape);
  return shapes;
}

int shape_index(const std::vector<PatchShape>& shapes, PatchShape s) {
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (shapes[i] == s) return static_cast<int>(i);
  return -1;
}

void finalize_percent(ConfusionMatrix& cm) {
  cm.percent.assign(cm.counts.size(), 0.0);
  for (int t = 0; t < cm.n; ++t) {
    std::int64_t row = 0;
    for (int p = 0; p < cm.n; ++p) row += cm.count(t, p);
    if (!row) continue;
    for (int p = 0; p < cm.n; ++p)
      cm.percent[static_cast<std::size_t>(t) * cm.n + p] =
          100.0 * static_cast<double>(cm.count(t, p)) / static_cast<double>(row);
  }
}

}  // namespace

ConfusionMatrix confusion_matrix(const std::vector<AttackRecord>& records, int num_classes) {
  if (records.empty()) throw ConfigError("confusion_matrix: no records");
  ConfusionMatrix cm;
  cm.n = num_classes;
  cm.counts.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
  for (const auto& r : records) {
    if (r.true_label < 0 || r.true_label >= num_classes || r.predicted < 0 ||
        r.predicted >= num_classes)
      throw ConfigError("confusion_matrix: label out of range in record " + r.image_id);
    cm.counts[static_cast<std::size_t>(r.true_label) * num_classes + r.predicted]++;
  }
  finalize_percent(cm);
  return cm;
}

ConfusionMatrix confusion_matrix(LpcrModel& model, const std::vector<GlyphImage>& dataset,
                                 int threads) {
  if (dataset.empty()) throw ConfigError("confusion_matrix: empty dataset");
  const int n = model.net.out_dim();
  ConfusionMatrix cm;
  cm.n = n;
  cm.counts.assign(static_cast<std::size_t>(n) * n, 0);
  CnnClassifier clf(model, threads);
  for (const auto& g : dataset) {
    if (g.label < 0 || g.label >= n) throw ConfigError("confusion_matrix: label out of range");
    ScoreResult s = clf.score(g.image, g.label);
    cm.counts[static_cast<std::size_t>(g.label) * n + s.predicted]++;
  }
  finalize_percent(cm);
  return cm;
}

MisclassificationDistribution misclassification_distribution(
    const std::vector<AttackRecord>& records, int num_classes) {
  MisclassificationDistribution dist;
  dist.shapes = shapes_in(records);
  std::int64_t mis_total = 0, total = 0;
  dist.rows.resize(static_cast<std::size_t>(num_classes) * std::max<std::size_t>(1, dist.shapes.size()));
  for (int c = 0; c < num_classes; ++c)
    for (std::size_t s = 0; s < dist.shapes.size(); ++s) {
      auto& row = dist.rows[static_cast<std::size_t>(c) * dist.shapes.size() + s];
      row.label = c;
      row.shape = dist.shapes[s];
    }
  for (const auto& r : records) {
    int si = shape_index(dist.shapes, r.shape);
    auto& row = dist.rows[static_cast<std::size_t>(r.true_label) * dist.shapes.size() + si];
    row.total++;
    total++;
    if (r.predicted != r.true_label) {
      row.misclassified++;
      mis_total++;
    }
  }
  dist.overall_rate = total ? static_cast<double>(mis_total) / static_cast<double>(total) : 0.0;
  return dist;
}

ConfMseTable confidence_mse_table(const std::vector<AttackRecord>& records, int num_classes) {
  ConfMseTable table;
  table.shapes = shapes_in(records);
  table.num_classes = num_classes;
  std::size_t ns = std::max<std::size_t>(1, table.shapes.size());
  table.cells.assign(static_cast<std::size_t>(num_classes) * ns, ConfMseCell{});
  std::vector<double> conf_sum(static_cast<std::size_t>(num_classes) * ns, 0.0);
  std::vector<double> mse_sum(static_cast<std::size_t>(num_classes) * ns, 0.0);
  std::vector<double> gconf(ns, 0.0), gmse(ns, 0.0);
  std::vector<std::int64_t> gcount(ns, 0);

  for (const auto& r : records) {
    if (!r.success) continue;  // aggregates cover successful attacks only
    int si = shape_index(table.shapes, r.shape);
    std::size_t idx = static_cast<std::size_t>(r.true_label) * ns + si;
    table.cells[idx].successes++;
    conf_sum[idx] += r.confidence;
    mse_sum[idx] += r.mse;
    gconf[si] += r.confidence;
    gmse[si] += r.mse;
    gcount[si]++;
  }
  for (std::size_t i = 0; i < table.cells.size(); ++i) {
    auto& cell = table.cells[i];
    if (cell.successes) {
      cell.present = true;
      cell.mean_confidence_pct = 100.0 * conf_sum[i] / static_cast<double>(cell.successes);
      cell.mean_mse = mse_sum[i] / static_cast<double>(cell.successes);
    }
  }
  table.grand.assign(ns, ConfMseCell{});
  for (std::size_t s = 0; s < ns; ++s) {
    if (gcount[s]) {
      table.grand[s].present = true;
      table.grand[s].successes = gcount[s];
      table.grand[s].mean_confidence_pct = 100.0 * gconf[s] / static_cast<double>(gcount[s]);
      table.grand[s].mean_mse = gmse[s] / static_cast<double>(gcount[s]);
    }
  }
  return table;
}

std::vector<RegionMap> attack_prone_regions(const std::vector<AttackRecord>& records, int height,
                                            PatchShape shape) {
  if (height <= 0) throw ConfigError("attack_prone_regions: bad height");
  std::map<std::pair<int, int>, RegionMap> maps;
  for (const auto& r : records) {
    if (!r.success || r.shape != shape || !r.patch) continue;
    auto key = std::make_pair(r.true_label, r.predicted);
    auto it = maps.find(key);
    if (it == maps.end()) {
      RegionMap m;
      m.true_label = r.true_label;
      m.predicted_label = r.predicted;
      m.height = height;
      m.row_hits.assign(height, 0);
      it = maps.emplace(key, std::move(m)).first;
    }
    RegionMap& m = it->second;
    m.total++;
    int lo, hi;
    if (shape == PatchShape::Horizontal) {
      lo = r.patch->pos_row;
      hi = r.patch->pos_row + r.patch->size;
    } else if (shape == PatchShape::Vertical) {
      lo = r.patch->pos_col;
      hi = r.patch->pos_col + r.patch->size;
    } else {
      lo = r.patch->pos_row - r.patch->size;
      hi = r.patch->pos_row + r.patch->size + 1;
    }
    for (int y = std::max(0, lo); y < std::min(height, hi); ++y) m.row_hits[y]++;
  }
  std::vector<RegionMap> out;
  for (auto& [key, m] : maps) out.push_back(std::move(m));
  return out;
}

TransferResult transfer_eval(const std::vector<GlyphImage>& hard_set, LpcrModel& external_model,
                             int threads) {
  if (hard_set.empty()) throw ConfigError("transfer_eval: empty hard set");
  const int n = external_model.net.out_dim();
  TransferResult tr;
  tr.per_class.resize(n);
  for (int c = 0; c < n; ++c) tr.per_class[c].label = c;

  CnnClassifier clf(external_model, threads);
  std::int64_t mis = 0;
  for (const auto& g : hard_set) {
    if (g.label < 0 || g.label >= n) throw ConfigError("transfer_eval: label out of range");
    ScoreResult s = clf.score(g.image, g.label);
    tr.per_class[g.label].total++;
    if (s.predicted != g.label) {
      tr.per_class[g.label].misclassified++;
      mis++;
    }
  }
  tr.misclassification_rate = static_cast<double>(mis) / static_cast<double>(hard_set.size());
  return tr;
}

std::vector<RateComparison> success_rate_comparison(const std::vector<AttackRecord>& baseline,
                                                    const std::vector<AttackRecord>& aa) {
  std::vector<PatchShape> bs = shapes_in(baseline), as = shapes_in(aa);
  if (bs.empty() || bs.size() != as.size())
    throw ConfigError("success_rate_comparison: shape sets differ");
  for (PatchShape s : bs)
    if (shape_index(as, s) < 0) throw ConfigError("success_rate_comparison: shape sets differ");

  auto rate_of = [](const std::vector<AttackRecord>& records, PatchShape s) {
    std::int64_t attempts = 0, successes = 0;
    for (const auto& r : records)
      if (r.shape == s) {
        attempts++;
        if (r.success) successes++;
      }
    return attempts ? static_cast<double>(successes) / static_cast<double>(attempts) : 0.0;
  };

  std::vector<RateComparison> rows;
  for (PatchShape s : bs) {
    RateComparison rc;
    rc.shape = s;
    rc.baseline_rate = rate_of(baseline, s);
    rc.aa_rate = rate_of(aa, s);
    rc.delta = rc.baseline_rate - rc.aa_rate;
    rows.push_back(rc);
  }
  return rows;
}

// ---------------------------------------------------------------------------

void write_confusion_csv(const ConfusionMatrix& cm, const std::string& classes,
                         const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write: " + path);
  out << "true\\pred";
  for (int p = 0; p < cm.n; ++p) out << "," << (p < static_cast<int>(classes.size()) ? classes[p] : '?');
  out << "\n";
  char buf[32];
  for (int t = 0; t < cm.n; ++t) {
    out << (t < static_cast<int>(classes.size()) ? classes[t] : '?');
    for (int p = 0; p < cm.n; ++p) {
      std::snprintf(buf, sizeof(buf), ",%.2f", cm.pct(t, p));
      out << buf;
    }
    out << "\n";
  }
}

void write_confusion_json(const ConfusionMatrix& cm, const std::string& classes,
                          const std::string& path) {
  json j;
  j["classes"] = classes;
  j["counts"] = json::array();
  j["percent"] = json::array();
  for (int t = 0; t < cm.n; ++t) {
    json rc = json::array(), rp = json::array();
    for (int p = 0; p < cm.n; ++p) {
      rc.push_back(cm.count(t, p));
      rp.push_back(cm.pct(t, p));
    }
    j["counts"].push_back(rc);
    j["percent"].push_back(rp);
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write: " + path);
  out << j.dump(2) << "\n";
}

void write_confusion_pgm(const ConfusionMatrix& cm, const std::string& path, int cell_px) {
  int dim = cm.n * cell_px;
  std::vector<std::uint8_t> gray(static_cast<std::size_t>(dim) * dim, 0);
  for (int t = 0; t < cm.n; ++t)
    for (int p = 0; p < cm.n; ++p) {
      auto v = static_cast<std::uint8_t>(std::lround(cm.pct(t, p) * 255.0 / 100.0));
      for (int y = 0; y < cell_px; ++y)
        for (int x = 0; x < cell_px; ++x)
          gray[(static_cast<std::size_t>(t * cell_px + y)) * dim + p * cell_px + x] = v;
    }
  write_pgm(path, dim, dim, gray);
}

void write_distribution_csv(const MisclassificationDistribution& dist, const std::string& classes,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write: " + path);
  out << "class,total";
  for (PatchShape s : dist.shapes) out << ",misclassified_" << shape_name(s);
  out << "\n";
  std::size_t ns = dist.shapes.size();
  int num_classes = ns ? static_cast<int>(dist.rows.size() / ns) : 0;
  for (int c = 0; c < num_classes; ++c) {
    std::int64_t total = ns ? dist.rows[static_cast<std::size_t>(c) * ns].total : 0;
    out << (c < static_cast<int>(classes.size()) ? classes[c] : '?') << "," << total;
    for (std::size_t s = 0; s < ns; ++s)
      out << "," << dist.rows[static_cast<std::size_t>(c) * ns + s].misclassified;
    out << "\n";
  }
  char buf[48];
  std::snprintf(buf, sizeof(buf), "overall_rate,%.6f\n", dist.overall_rate);
  out << buf;
}

void write_conf_mse_csv(const ConfMseTable& table, const std::string& classes,
                        const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write: " + path);
  out << "class";
  for (PatchShape s : table.shapes)
    out << ",avg_confidence_" << shape_name(s) << ",avg_mse_" << shape_name(s);
  out << "\n";
  char buf[64];
  auto cell_out = [&](const ConfMseCell& cell) {
    if (!cell.present) {
      out << ",,";  // class had no successful attack for this shape
      return;
    }
    std::snprintf(buf, sizeof(buf), ",%.1f,%.1f", cell.mean_confidence_pct, cell.mean_mse);
    out << buf;
  };
  for (int c = 0; c < table.num_classes; ++c) {
    out << (c < static_cast<int>(classes.size()) ? classes[c] : '?');
    for (std::size_t s = 0; s < table.shapes.size(); ++s) cell_out(table.cell(c, s));
    out << "\n";
  }
  out << "average";
  for (const auto& g : table.grand) cell_out(g);
  out << "\n";
}

void write_region_maps(const std::vector<RegionMap>& maps, const std::string& classes, int width,
                       const std::string& dir, const std::string& tag) {
  fs::create_directories(dir);
  json index;
  index["tag"] = tag;
  index["maps"] = json::array();
  for (const auto& m : maps) {
    char tsym = m.true_label < static_cast<int>(classes.size()) ? classes[m.true_label] : '?';
    char psym = m.predicted_label < static_cast<int>(classes.size()) ? classes[m.predicted_label] : '?';
    std::string name = std::string("region_") + tag + "_" + tsym + "_to_" + psym + ".pgm";

    std::vector<std::uint8_t> gray(static_cast<std::size_t>(m.height) * width);
    for (int y = 0; y < m.height; ++y) {
      auto v = static_cast<std::uint8_t>(std::lround(m.score(y) * 255.0));
      std::fill_n(gray.begin() + static_cast<std::size_t>(y) * width, width, v);
    }
    write_pgm((fs::path(dir) / name).string(), m.height, width, gray);

    json jm;
    jm["true"] = std::string(1, tsym);
    jm["predicted"] = std::string(1, psym);
    jm["file"] = name;
    jm["total"] = m.total;
    jm["row_hits"] = m.row_hits;
    index["maps"].push_back(jm);
  }
  std::ofstream out(fs::path(dir) / (std::string("regions_") + tag + ".json"));
  if (!out) throw DataError("cannot write region index under " + dir);
  out << index.dump(2) << "\n";
}

void write_transfer_csv(const TransferResult& tr, const std::string& classes,
                        const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write: " + path);
  out << "class,misclassified,total\n";
  for (const auto& row : tr.per_class)
    out << (row.label < static_cast<int>(classes.size()) ? classes[row.label] : '?') << ","
        << row.misclassified << "," << row.total << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "overall_rate,%.6f,\n", tr.misclassification_rate);
  out << buf;
}

void write_comparison_csv(const std::vector<RateComparison>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write: " + path);
  out << "shape,baseline_rate,aa_rate,delta\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f\n", shape_name(r.shape), r.baseline_rate,
                  r.aa_rate, r.delta);
    out << buf;
  }
}

}  // namespace lpcr
