#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "lpcr/dataset.hpp"
#include "lpcr/errors.hpp"

using namespace lpcr;
namespace fs = std::filesystem;

namespace {

DatasetConfig small_config() {
  DatasetConfig c;
  c.per_class_count = 4;
  c.height = 48;
  c.width = 32;
  c.seed = 7;
  return c;
}

fs::path temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "lpcr_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("render_glyph is deterministic in its inputs") {
  GlyphStyle style;
  Rng a(7), b(7);
  Image first = render_glyph('0', style, 80, 48, a);
  Image second = render_glyph('0', style, 80, 48, b);
  CHECK(first == second);
}

TEST_CASE("render_glyph depends on the rng state") {
  GlyphStyle style;
  Rng a(7), b(8);
  Image first = render_glyph('A', style, 80, 48, a);
  Image second = render_glyph('A', style, 80, 48, b);
  CHECK_FALSE(first == second);
}

TEST_CASE("rendered F has a plausible foreground fraction") {
  GlyphStyle style;
  style.stroke_px = 3;
  Rng r(1);
  Image img = render_glyph('F', style, 80, 48, r);
  int dark = 0;
  for (std::size_t i = 0; i < img.px.size(); i += 3) {
    int gray = (img.px[i] + img.px[i + 1] + img.px[i + 2]) / 3;
    if (gray < 128) ++dark;
  }
  double fraction = static_cast<double>(dark) / (80.0 * 48.0);
  CHECK(fraction > 0.02);
  CHECK(fraction < 0.6);
}

TEST_CASE("glyph strokes are the darkest pixels and background the lightest") {
  GlyphStyle style;
  Rng r(5);
  Image img = render_glyph('8', style, 48, 32, r);
  int mn = 999, mx = -1;
  for (std::size_t i = 0; i < img.px.size(); i += 3) {
    int s = img.px[i] + img.px[i + 1] + img.px[i + 2];
    mn = std::min(mn, s);
    mx = std::max(mx, s);
  }
  CHECK(mn == style.fg.r + style.fg.g + style.fg.b);
  CHECK(mx == style.bg.r + style.bg.g + style.bg.b);
}

TEST_CASE("unknown class symbol is rejected") {
  GlyphStyle style;
  Rng r(1);
  CHECK_THROWS_AS(render_glyph('Z', style, 48, 32, r), ConfigError);
}

TEST_CASE("generate_dataset produces per_class_count images per class") {
  DatasetConfig c = small_config();
  Dataset ds = generate_dataset(c);
  CHECK(ds.images.size() == 13 * 4);
  CHECK(ds.manifest.entries.size() == 13 * 4);
  std::vector<int> counts(13, 0);
  for (const auto& g : ds.images) counts[g.label]++;
  for (int n : counts) CHECK(n == 4);
}

TEST_CASE("identical config regenerates the identical dataset") {
  DatasetConfig c = small_config();
  Dataset a = generate_dataset(c);
  Dataset b = generate_dataset(c);
  REQUIRE(a.images.size() == b.images.size());
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images[i].image == b.images[i].image);
    CHECK(a.manifest.entries[i].checksum == b.manifest.entries[i].checksum);
  }
}

TEST_CASE("paper-skew profile mirrors the reference class proportions") {
  DatasetConfig c = small_config();
  c.per_class_count = 10;
  c.paper_skew = true;
  Dataset ds = generate_dataset(c);
  std::vector<int> counts(13, 0);
  for (const auto& g : ds.images) counts[g.label]++;
  double total_ref = 1057.0;
  for (int i = 0; i < 13; ++i) {
    int expect = std::max(1, (int)std::lround(kReferenceClassCounts[i] * 130.0 / total_ref));
    CHECK(counts[i] == expect);
  }
  int a_idx = class_index('A');
  for (int i = 0; i < 13; ++i)
    if (i != a_idx) CHECK(counts[a_idx] > counts[i]);
}

TEST_CASE("augment with zero rotation and zero blur is the identity") {
  Rng r(3);
  Image img = render_glyph('5', GlyphStyle{}, 48, 32, r);
  Image out = augment(img, {0.0, 0.0});
  CHECK(out == img);
}

TEST_CASE("rotating by 180 degrees twice restores the image") {
  Rng r(4);
  Image img = render_glyph('7', GlyphStyle{}, 48, 32, r);
  AugmentLimits wide;
  wide.max_rotation_degrees = 180.0;
  Image once = augment(img, {180.0, 0.0}, wide);
  Image twice = augment(once, {180.0, 0.0}, wide);
  int max_diff = 0;
  for (std::size_t i = 0; i < img.px.size(); ++i)
    max_diff = std::max(max_diff, std::abs(int(img.px[i]) - int(twice.px[i])));
  CHECK(max_diff <= 2);
}

TEST_CASE("gaussian kernel matches the closed form") {
  double sigma = 1.0;
  std::vector<double> k = gaussian_kernel(sigma);
  CHECK(k.size() == 7);  // radius ceil(3*sigma) = 3
  double norm = 0;
  for (int i = -3; i <= 3; ++i) norm += std::exp(-i * i / (2.0 * sigma * sigma));
  for (int i = -3; i <= 3; ++i) {
    double expect = std::exp(-i * i / (2.0 * sigma * sigma)) / norm;
    CHECK(std::abs(k[i + 3] - expect) / expect < 1e-6);
  }
  double sum = 0;
  for (double v : k) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("augment rejects out-of-range parameters") {
  Rng r(5);
  Image img = render_glyph('2', GlyphStyle{}, 48, 32, r);
  CHECK_THROWS_AS(augment(img, {11.0, 0.0}), ConfigError);
  CHECK_THROWS_AS(augment(img, {0.0, 2.0}), ConfigError);
  CHECK_THROWS_AS(augment(img, {0.0, -0.5}), ConfigError);
}

TEST_CASE("augment preserves dims") {
  Rng r(6);
  Image img = render_glyph('3', GlyphStyle{}, 48, 32, r);
  Image out = augment(img, {8.5, 1.2});
  CHECK(out.h == img.h);
  CHECK(out.w == img.w);
}

TEST_CASE("split is stratified, disjoint, and seed-deterministic") {
  DatasetConfig c = small_config();
  c.per_class_count = 10;
  Dataset ds = generate_dataset(c);
  auto [train, val] = split_dataset(ds.images, 0.8, 11);
  CHECK(train.size() == 104);
  CHECK(val.size() == 26);
  std::vector<int> tc(13, 0), vc(13, 0);
  for (const auto& g : train) tc[g.label]++;
  for (const auto& g : val) vc[g.label]++;
  for (int i = 0; i < 13; ++i) {
    CHECK(tc[i] == 8);
    CHECK(vc[i] == 2);
  }
  std::set<std::string> train_ids, val_ids;
  for (const auto& g : train) train_ids.insert(g.id);
  for (const auto& g : val) val_ids.insert(g.id);
  CHECK(train_ids.size() + val_ids.size() == 130);
  for (const auto& id : val_ids) CHECK(train_ids.count(id) == 0);

  auto [train2, val2] = split_dataset(ds.images, 0.8, 11);
  for (std::size_t i = 0; i < train.size(); ++i) CHECK(train[i].id == train2[i].id);
}

TEST_CASE("half split of ten per class gives five and five") {
  DatasetConfig c = small_config();
  c.per_class_count = 10;
  Dataset ds = generate_dataset(c);
  auto [train, val] = split_dataset(ds.images, 0.5, 2);
  std::vector<int> tc(13, 0);
  for (const auto& g : train) tc[g.label]++;
  for (int n : tc) CHECK(n == 5);
}

TEST_CASE("split counts stay within one of the rounded ratio") {
  DatasetConfig c = small_config();
  c.per_class_count = 7;
  Dataset ds = generate_dataset(c);
  Rng r(9);
  for (int trial = 0; trial < 10; ++trial) {
    double ratio = r.next_range(0.15, 0.85);
    auto [train, val] = split_dataset(ds.images, ratio, r.next_u64());
    std::vector<int> tc(13, 0);
    for (const auto& g : train) tc[g.label]++;
    for (int n : tc) CHECK(std::abs(n - std::lround(ratio * 7)) <= 1);
    CHECK(train.size() + val.size() == ds.images.size());
  }
}

TEST_CASE("split rejects classes with fewer than two images") {
  DatasetConfig c = small_config();
  c.per_class_count = 1;
  Dataset ds = generate_dataset(c);
  CHECK_THROWS_AS(split_dataset(ds.images, 0.8, 1), ConfigError);
}

TEST_CASE("split rejects ratios outside (0,1)") {
  DatasetConfig c = small_config();
  Dataset ds = generate_dataset(c);
  CHECK_THROWS_AS(split_dataset(ds.images, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(split_dataset(ds.images, 1.0, 1), ConfigError);
}

TEST_CASE("kfold assignments are stratified and cover everything") {
  DatasetConfig c = small_config();
  c.per_class_count = 10;
  Dataset ds = generate_dataset(c);
  std::vector<int> fold = kfold_assignments(ds.images, 2, 3);
  std::vector<std::vector<int>> per_class(13, std::vector<int>(2, 0));
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    REQUIRE(fold[i] >= 0);
    REQUIRE(fold[i] < 2);
    per_class[ds.images[i].label][fold[i]]++;
  }
  for (int cidx = 0; cidx < 13; ++cidx) {
    CHECK(per_class[cidx][0] == 5);
    CHECK(per_class[cidx][1] == 5);
  }
  CHECK_THROWS_AS(kfold_assignments(ds.images, 11, 3), ConfigError);
  CHECK_THROWS_AS(kfold_assignments(ds.images, 1, 3), ConfigError);
}

TEST_CASE("dataset save and load round-trips pixel bytes exactly") {
  fs::path dir = temp_dir("roundtrip");
  DatasetConfig c = small_config();
  Dataset ds = generate_dataset(c);
  save_dataset(ds, dir.string());
  Dataset back = load_dataset(dir.string());
  REQUIRE(back.images.size() == ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    CHECK(back.images[i].image == ds.images[i].image);
    CHECK(back.images[i].label == ds.images[i].label);
    CHECK(back.images[i].id == ds.images[i].id);
  }
}

TEST_CASE("a truncated ppm is reported with its filename") {
  fs::path dir = temp_dir("truncated");
  DatasetConfig c = small_config();
  c.per_class_count = 1;
  c.classes = {'0', '1'};
  Dataset ds = generate_dataset(c);
  save_dataset(ds, dir.string());
  fs::path victim = dir / ds.manifest.entries[0].filename;
  fs::resize_file(victim, 32);
  CHECK_THROWS_WITH_AS(load_dataset(dir.string()),
                       doctest::Contains(ds.manifest.entries[0].filename.c_str()), DataError);
}

TEST_CASE("a manifest label outside the class range is rejected") {
  fs::path dir = temp_dir("badlabel");
  DatasetConfig c = small_config();
  c.per_class_count = 1;
  c.classes = {'0', '1'};
  Dataset ds = generate_dataset(c);
  save_dataset(ds, dir.string());
  std::ifstream in(dir / "manifest.json");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  auto pos = text.find("\"label\": 1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 10, "\"label\": 9");
  std::ofstream out(dir / "manifest.json");
  out << text;
  out.close();
  CHECK_THROWS_AS(load_dataset(dir.string()), DataError);
}

TEST_CASE("a corrupted pixel fails the checksum on load") {
  fs::path dir = temp_dir("checksum");
  DatasetConfig c = small_config();
  c.per_class_count = 1;
  c.classes = {'0'};
  Dataset ds = generate_dataset(c);
  save_dataset(ds, dir.string());
  fs::path victim = dir / ds.manifest.entries[0].filename;
  std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
  char b;
  f.seekg(-1, std::ios::end);
  f.get(b);
  f.seekp(-1, std::ios::end);
  b = static_cast<char>(b ^ 0x40);
  f.put(b);
  f.close();
  CHECK_THROWS_WITH_AS(load_dataset(dir.string()), doctest::Contains("checksum"), DataError);
}

TEST_CASE("config validation rejects inconsistent settings") {
  DatasetConfig c = small_config();
  c.height = 50;  // not divisible by 16
  CHECK_THROWS_AS(validate_config(c), ConfigError);
  c = small_config();
  c.classes = {'0', '0'};
  CHECK_THROWS_AS(validate_config(c), ConfigError);
  c = small_config();
  c.fg_gray_max = 200;  // kills the contrast guarantee
  CHECK_THROWS_AS(validate_config(c), ConfigError);
  c = small_config();
  c.paper_skew = true;
  c.classes = {'0', '1'};
  CHECK_THROWS_AS(validate_config(c), ConfigError);
}
