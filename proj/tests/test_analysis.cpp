#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lpcr/analysis.hpp"
#include "lpcr/errors.hpp"

using namespace lpcr;
namespace fs = std::filesystem;

namespace {

AttackRecord make_record(const std::string& id, PatchShape shape, int true_label, int predicted,
                         bool success, double conf = 0.5, double mse_v = 100,
                         int pos = 0, int size = 1) {
  AttackRecord r;
  r.image_id = id;
  r.shape = shape;
  r.true_label = true_label;
  r.predicted = predicted;
  r.success = success;
  r.confidence = conf;
  r.mse = mse_v;
  if (success) {
    PatchSpec p;
    p.shape = shape;
    p.size = size;
    if (shape == PatchShape::Vertical) p.pos_col = pos;
    else p.pos_row = pos;
    r.patch = p;
  }
  return r;
}

}  // namespace

TEST_CASE("a perfect classifier yields a pure diagonal") {
  std::vector<AttackRecord> records;
  for (int c = 0; c < 13; ++c)
    records.push_back(make_record("i" + std::to_string(c), PatchShape::Horizontal, c, c, false));
  ConfusionMatrix cm = confusion_matrix(records, 13);
  for (int t = 0; t < 13; ++t)
    for (int p = 0; p < 13; ++p) CHECK(cm.pct(t, p) == (t == p ? 100.0 : 0.0));
}

TEST_CASE("a constant-B classifier fills the B column") {
  int b = class_index('B');
  std::vector<AttackRecord> records;
  for (int c = 0; c < 13; ++c)
    for (int k = 0; k < 3; ++k)
      records.push_back(make_record("i", PatchShape::Horizontal, c, b, c != b));
  ConfusionMatrix cm = confusion_matrix(records, 13);
  for (int t = 0; t < 13; ++t) {
    CHECK(cm.pct(t, b) == 100.0);
    CHECK(cm.count(t, b) == 3);
  }
}

TEST_CASE("confusion rows with samples sum to one hundred percent") {
  std::vector<AttackRecord> records;
  Rng r(3);
  for (int i = 0; i < 200; ++i) {
    int t = static_cast<int>(r.next_below(13));
    int p = static_cast<int>(r.next_below(13));
    records.push_back(make_record("x", PatchShape::Vertical, t, p, t != p));
  }
  ConfusionMatrix cm = confusion_matrix(records, 13);
  for (int t = 0; t < 13; ++t) {
    double row_total = 0;
    std::int64_t count_total = 0;
    for (int p = 0; p < 13; ++p) {
      row_total += cm.pct(t, p);
      count_total += cm.count(t, p);
    }
    if (count_total > 0) CHECK(row_total == doctest::Approx(100.0).epsilon(1e-3));
  }
}

TEST_CASE("misclassification distribution counts per class and shape") {
  std::vector<AttackRecord> records;
  records.push_back(make_record("a", PatchShape::Horizontal, 0, 1, true));
  records.push_back(make_record("b", PatchShape::Horizontal, 0, 0, false));
  records.push_back(make_record("c", PatchShape::Vertical, 0, 2, true));
  records.push_back(make_record("d", PatchShape::Vertical, 1, 1, false));
  MisclassificationDistribution dist = misclassification_distribution(records, 13);
  REQUIRE(dist.shapes.size() == 2);
  const auto& h0 = dist.rows[0 * 2 + 0];
  CHECK(h0.total == 2);
  CHECK(h0.misclassified == 1);
  const auto& v1 = dist.rows[1 * 2 + 1];
  CHECK(v1.total == 1);
  CHECK(v1.misclassified == 0);
  // empty classes keep a (0, 0) row
  const auto& c5 = dist.rows[5 * 2 + 0];
  CHECK(c5.total == 0);
  CHECK(c5.misclassified == 0);
  CHECK(dist.overall_rate == doctest::Approx(0.5));
}

TEST_CASE("all-success records give every class a full count") {
  std::vector<AttackRecord> records;
  for (int c = 0; c < 13; ++c)
    for (int k = 0; k < 2; ++k)
      records.push_back(make_record("s", PatchShape::Circular, c, (c + 1) % 13, true));
  MisclassificationDistribution dist = misclassification_distribution(records, 13);
  for (int c = 0; c < 13; ++c) {
    CHECK(dist.rows[c].total == 2);
    CHECK(dist.rows[c].misclassified == 2);
  }
  CHECK(dist.overall_rate == doctest::Approx(1.0));
}

TEST_CASE("a single success becomes a (70, 100) table row") {
  std::vector<AttackRecord> records = {
      make_record("one", PatchShape::Horizontal, 3, 5, true, 0.7, 100.0)};
  ConfMseTable table = confidence_mse_table(records, 13);
  const ConfMseCell& cell = table.cell(3, 0);
  CHECK(cell.present);
  CHECK(cell.mean_confidence_pct == doctest::Approx(70.0));
  CHECK(cell.mean_mse == doctest::Approx(100.0));
}

TEST_CASE("classes without successes are marked absent, not zero") {
  std::vector<AttackRecord> records = {
      make_record("one", PatchShape::Horizontal, 3, 5, true, 0.7, 100.0),
      make_record("two", PatchShape::Horizontal, 4, 4, false, 0.9, 0.0)};
  ConfMseTable table = confidence_mse_table(records, 13);
  CHECK_FALSE(table.cell(4, 0).present);
  CHECK_FALSE(table.cell(7, 0).present);
  CHECK(table.grand[0].present);
  CHECK(table.grand[0].successes == 1);
}

TEST_CASE("the grand average pools every success of a shape") {
  std::vector<AttackRecord> records = {
      make_record("a", PatchShape::Circular, 0, 1, true, 0.6, 200.0),
      make_record("b", PatchShape::Circular, 5, 2, true, 0.8, 400.0)};
  ConfMseTable table = confidence_mse_table(records, 13);
  CHECK(table.grand[0].mean_confidence_pct == doctest::Approx(70.0));
  CHECK(table.grand[0].mean_mse == doctest::Approx(300.0));
}

TEST_CASE("one success paints its band rows with score one") {
  std::vector<AttackRecord> records = {
      make_record("a", PatchShape::Horizontal, 0, 11, true, 0.5, 10, 3, 2)};
  auto maps = attack_prone_regions(records, 8, PatchShape::Horizontal);
  REQUIRE(maps.size() == 1);
  const RegionMap& m = maps[0];
  CHECK(m.true_label == 0);
  CHECK(m.predicted_label == 11);
  for (int y = 0; y < 8; ++y) CHECK(m.score(y) == ((y == 3 || y == 4) ? 1.0 : 0.0));
}

TEST_CASE("overlapping bands average their row coverage") {
  std::vector<AttackRecord> records = {
      make_record("a", PatchShape::Horizontal, 0, 1, true, 0.5, 10, 0, 2),
      make_record("b", PatchShape::Horizontal, 0, 1, true, 0.5, 10, 1, 2)};
  auto maps = attack_prone_regions(records, 6, PatchShape::Horizontal);
  REQUIRE(maps.size() == 1);
  const RegionMap& m = maps[0];
  CHECK(m.score(0) == doctest::Approx(0.5));
  CHECK(m.score(1) == doctest::Approx(1.0));
  CHECK(m.score(2) == doctest::Approx(0.5));
  CHECK(m.score(3) == doctest::Approx(0.0));
  // exact ratios of integer counts
  CHECK(m.row_hits[1] == 2);
  CHECK(m.total == 2);
}

TEST_CASE("region maps render as pgm overlays") {
  std::vector<AttackRecord> records = {
      make_record("a", PatchShape::Horizontal, 2, 9, true, 0.5, 10, 1, 3)};
  auto maps = attack_prone_regions(records, 8, PatchShape::Horizontal);
  fs::path dir = fs::temp_directory_path() / "lpcr_regions_test";
  fs::remove_all(dir);
  write_region_maps(maps, "0123456789ABF", 6, dir.string(), "t");
  fs::path pgm = dir / "region_t_2_to_9.pgm";
  REQUIRE(fs::exists(pgm));
  std::ifstream in(pgm, std::ios::binary);
  std::string magic, dims1, dims2, maxval;
  in >> magic >> dims1 >> dims2 >> maxval;
  CHECK(magic == "P5");
  CHECK(dims1 == "6");
  CHECK(dims2 == "8");
  in.get();
  std::vector<std::uint8_t> gray(6 * 8);
  in.read(reinterpret_cast<char*>(gray.data()), 48);
  CHECK(gray[0 * 6 + 0] == 0);
  CHECK(gray[1 * 6 + 0] == 255);
  CHECK(gray[3 * 6 + 5] == 255);
  CHECK(gray[4 * 6 + 0] == 0);
}

TEST_CASE("transfer_eval scores a hard set and rejects an empty one") {
  LpcrModel m = build_lpcr(32, 32, 13, 16, 8, 0.25);
  init_params(m.net, Rng(7));
  m.classes = "0123456789ABF";
  std::vector<GlyphImage> empty;
  CHECK_THROWS_AS(transfer_eval(empty, m, 1), ConfigError);

  DatasetConfig c;
  c.per_class_count = 2;
  c.height = 32;
  c.width = 32;
  c.seed = 5;
  c.augment = false;
  auto images = generate_dataset(c).images;
  TransferResult tr = transfer_eval(images, m, 2);
  CHECK(tr.misclassification_rate >= 0.0);
  CHECK(tr.misclassification_rate <= 1.0);
  std::int64_t total = 0;
  for (const auto& row : tr.per_class) total += row.total;
  CHECK(total == static_cast<std::int64_t>(images.size()));
}

TEST_CASE("identical record sets compare with zero delta") {
  std::vector<AttackRecord> records = {
      make_record("a", PatchShape::Horizontal, 0, 1, true),
      make_record("b", PatchShape::Horizontal, 1, 1, false),
      make_record("a", PatchShape::Vertical, 0, 2, true)};
  auto rows = success_rate_comparison(records, records);
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.delta == doctest::Approx(0.0));
    CHECK(r.baseline_rate == doctest::Approx(r.aa_rate));
  }
}

TEST_CASE("rate comparison rejects mismatched shape sets") {
  std::vector<AttackRecord> a = {make_record("x", PatchShape::Horizontal, 0, 1, true)};
  std::vector<AttackRecord> b = {make_record("x", PatchShape::Vertical, 0, 1, true)};
  CHECK_THROWS_AS(success_rate_comparison(a, b), ConfigError);
}

TEST_CASE("rate comparison measures the drop") {
  std::vector<AttackRecord> base, aa;
  for (int i = 0; i < 10; ++i)
    base.push_back(make_record("i", PatchShape::Circular, 0, 1, i < 8));  // 80%
  for (int i = 0; i < 10; ++i)
    aa.push_back(make_record("i", PatchShape::Circular, 0, 1, i < 3));  // 30%
  auto rows = success_rate_comparison(base, aa);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].baseline_rate == doctest::Approx(0.8));
  CHECK(rows[0].aa_rate == doctest::Approx(0.3));
  CHECK(rows[0].delta == doctest::Approx(0.5));
}

TEST_CASE("analysis writers are pure functions of their inputs") {
  std::vector<AttackRecord> records = {
      make_record("a", PatchShape::Horizontal, 0, 1, true, 0.61, 123.0, 2, 3),
      make_record("b", PatchShape::Horizontal, 4, 4, false, 0.99, 0.0)};
  ConfusionMatrix cm = confusion_matrix(records, 13);
  fs::path dir = fs::temp_directory_path() / "lpcr_analysis_pure";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto read = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  write_confusion_csv(cm, "0123456789ABF", (dir / "a.csv").string());
  write_confusion_csv(cm, "0123456789ABF", (dir / "b.csv").string());
  CHECK(read(dir / "a.csv") == read(dir / "b.csv"));
  write_confusion_json(cm, "0123456789ABF", (dir / "a.json").string());
  write_confusion_json(cm, "0123456789ABF", (dir / "b.json").string());
  CHECK(read(dir / "a.json") == read(dir / "b.json"));
}
