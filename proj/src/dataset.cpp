#include "lpcr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "lpcr/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace lpcr {

const int kReferenceClassCounts[kNumClasses] = {89, 134, 61,  39, 45, 61, 62,
                                                41, 52,  20, 271, 108, 74};

void validate_config(const DatasetConfig& config) {
  if (config.classes.empty()) throw ConfigError("dataset: empty class list");
  for (char c : config.classes)
    if (class_index(c) < 0) throw ConfigError(std::string("dataset: unknown class symbol '") + c + "'");
  for (std::size_t i = 0; i < config.classes.size(); ++i)
    for (std::size_t j = i + 1; j < config.classes.size(); ++j)
      if (config.classes[i] == config.classes[j])
        throw ConfigError("dataset: duplicate class symbol");
  if (config.per_class_count <= 0) throw ConfigError("dataset: per_class_count must be positive");
  if (config.height <= 0 || config.width <= 0 || config.height % 16 != 0 || config.width % 16 != 0)
    throw ConfigError("dataset: dims must be positive and divisible by 16");
  if (config.stroke_min < 1.0 || config.stroke_max < config.stroke_min)
    throw ConfigError("dataset: bad stroke range");
  if (config.fg_gray_min < 0 || config.fg_gray_max < config.fg_gray_min ||
      config.bg_gray_min < config.fg_gray_max || config.bg_gray_max > 255 ||
      config.bg_gray_max < config.bg_gray_min)
    throw ConfigError("dataset: bad color ranges");
  int worst_contrast = config.bg_gray_min - config.channel_tint -
                       (config.fg_gray_max + config.channel_tint);
  if (worst_contrast < config.min_contrast)
    throw ConfigError("dataset: fg/bg ranges violate min_contrast " +
                      std::to_string(config.min_contrast));
  if (config.paper_skew && config.classes.size() != kNumClasses)
    throw ConfigError("dataset: paper_skew requires the full 13-class alphabet");
}

namespace {

std::vector<int> class_counts(const DatasetConfig& config) {
  std::vector<int> counts(config.classes.size(), config.per_class_count);
  if (config.paper_skew) {
    double total_ref = 0;
    for (int c : kReferenceClassCounts) total_ref += c;
    double target_total = static_cast<double>(config.classes.size()) * config.per_class_count;
    for (std::size_t i = 0; i < config.classes.size(); ++i) {
      int ref = kReferenceClassCounts[class_index(config.classes[i])];
      counts[i] = std::max(1, static_cast<int>(std::lround(ref * target_total / total_ref)));
    }
  }
  return counts;
}

Rgb sample_color(Rng& rng, int gray_min, int gray_max, int tint) {
  int g = gray_min + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(gray_max - gray_min + 1)));
  auto ch = [&](void) {
    int t = tint > 0 ? static_cast<int>(rng.next_below(2 * tint + 1)) - tint : 0;
    return static_cast<std::uint8_t>(std::clamp(g + t, 0, 255));
  };
  Rgb c;
  c.r = ch();
  c.g = ch();
  c.b = ch();
  return c;
}

}  // namespace

Dataset generate_dataset(const DatasetConfig& config) {
  validate_config(config);
  Rng root(config.seed);
  std::vector<int> counts = class_counts(config);

  Dataset ds;
  ds.manifest.version = 1;
  ds.manifest.height = config.height;
  ds.manifest.width = config.width;
  for (char c : config.classes) ds.manifest.classes.push_back(c);

  for (std::size_t ci = 0; ci < config.classes.size(); ++ci) {
    char symbol = config.classes[ci];
    for (int i = 0; i < counts[ci]; ++i) {
      Rng img_rng = root.split2(ci, static_cast<std::uint64_t>(i));
      Rng style_rng = img_rng.split(0);
      Rng render_rng = img_rng.split(1);
      Rng aug_rng = img_rng.split(2);

      GlyphStyle style;
      style.stroke_px = style_rng.next_range(config.stroke_min, config.stroke_max);
      style.fg = sample_color(style_rng, config.fg_gray_min, config.fg_gray_max, config.channel_tint);
      style.bg = sample_color(style_rng, config.bg_gray_min, config.bg_gray_max, config.channel_tint);
      style.jitter = config.jitter;

      GlyphImage gi;
      gi.image = render_glyph(symbol, style, config.height, config.width, render_rng);
      if (config.augment) {
        AugmentParams p;
        p.rotation_degrees = aug_rng.next_range(-config.augment_limits.max_rotation_degrees,
                                                config.augment_limits.max_rotation_degrees);
        p.blur_sigma = aug_rng.next_range(0.0, config.augment_limits.max_blur_sigma);
        gi.image = augment(gi.image, p, config.augment_limits);
      }
      gi.label = static_cast<int>(ci);
      char idbuf[16];
      std::snprintf(idbuf, sizeof(idbuf), "%c_%04d", symbol, i);
      gi.id = idbuf;

      ManifestEntry e;
      e.id = gi.id;
      e.label = gi.label;
      e.filename = gi.id + ".ppm";
      e.checksum = to_hex(fnv1a64(gi.image.px.data(), gi.image.px.size()));
      ds.manifest.entries.push_back(e);
      ds.images.push_back(std::move(gi));
    }
  }
  return ds;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma < 0) throw ConfigError("gaussian_kernel: negative sigma");
  if (sigma == 0.0) return {1.0};
  int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

Rgb lightest_pixel(const Image& img) {
  if (img.px.empty()) throw ConfigError("lightest_pixel: empty image");
  int best = -1;
  std::size_t best_i = 0;
  for (std::size_t i = 0; i < img.px.size(); i += 3) {
    int s = img.px[i] + img.px[i + 1] + img.px[i + 2];
    if (s > best) {
      best = s;
      best_i = i;
    }
  }
  return Rgb{img.px[best_i], img.px[best_i + 1], img.px[best_i + 2]};
}

namespace {

Image rotate_bilinear(const Image& img, double degrees) {
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cy = (img.h - 1) / 2.0, cx = (img.w - 1) / 2.0;
  const Rgb bg = lightest_pixel(img);
  const double bgv[3] = {static_cast<double>(bg.r), static_cast<double>(bg.g),
                         static_cast<double>(bg.b)};

  auto tap = [&](int y, int x, int ch) -> double {
    if (y < 0 || y >= img.h || x < 0 || x >= img.w) return bgv[ch];
    return img.at(y, x, ch);
  };

  Image out(img.h, img.w);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      // Inverse map: source position that lands on (y, x).
      double dx = x - cx, dy = y - cy;
      double sx = cx + c * dx - s * dy;
      double sy = cy + s * dx + c * dy;
      int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      double fx = sx - x0, fy = sy - y0;
      for (int ch = 0; ch < 3; ++ch) {
        double v = (1 - fy) * ((1 - fx) * tap(y0, x0, ch) + fx * tap(y0, x0 + 1, ch)) +
                   fy * ((1 - fx) * tap(y0 + 1, x0, ch) + fx * tap(y0 + 1, x0 + 1, ch));
        out.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

Image blur_separable(const Image& img, double sigma) {
  std::vector<double> k = gaussian_kernel(sigma);
  int radius = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(img.px.size());
  // Horizontal pass, clamp-to-edge.
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          int xx = std::clamp(x + i, 0, img.w - 1);
          acc += k[i + radius] * img.at(y, xx, ch);
        }
        tmp[(static_cast<std::size_t>(y) * img.w + x) * 3 + ch] = acc;
      }
  // Vertical pass.
  Image out(img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          int yy = std::clamp(y + i, 0, img.h - 1);
          acc += k[i + radius] * tmp[(static_cast<std::size_t>(yy) * img.w + x) * 3 + ch];
        }
        out.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(acc, 0.0, 255.0)));
      }
  return out;
}

}  // namespace

Image augment(const Image& img, const AugmentParams& params, const AugmentLimits& limits) {
  if (std::abs(params.rotation_degrees) > limits.max_rotation_degrees + 1e-9)
    throw ConfigError("augment: rotation out of range");
  if (params.blur_sigma < 0 || params.blur_sigma > limits.max_blur_sigma + 1e-9)
    throw ConfigError("augment: blur sigma out of range");

  Image out = img;
  if (params.rotation_degrees != 0.0) out = rotate_bilinear(out, params.rotation_degrees);
  if (params.blur_sigma > 0.0) out = blur_separable(out, params.blur_sigma);
  return out;
}

std::pair<std::vector<GlyphImage>, std::vector<GlyphImage>>
split_dataset(const std::vector<GlyphImage>& all, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split: ratio must be in (0,1)");
  int max_label = -1;
  for (const auto& g : all) max_label = std::max(max_label, g.label);
  if (max_label < 0) throw ConfigError("split: empty dataset");

  std::vector<std::vector<std::size_t>> by_class(max_label + 1);
  for (std::size_t i = 0; i < all.size(); ++i) by_class[all[i].label].push_back(i);

  Rng root(seed);
  std::vector<GlyphImage> train, val;
  for (int c = 0; c <= max_label; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < 2)
      throw ConfigError("split: class " + std::to_string(c) + " has fewer than 2 images");
    Rng rng = root.split(static_cast<std::uint64_t>(c));
    shuffle_indices(idx, rng);
    auto n_train = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(idx.size())));
    n_train = std::clamp(n_train, std::size_t{1}, idx.size() - 1);
    for (std::size_t i = 0; i < idx.size(); ++i)
      (i < n_train ? train : val).push_back(all[idx[i]]);
  }
  return {std::move(train), std::move(val)};
}

std::vector<int> kfold_assignments(const std::vector<GlyphImage>& all, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold: k must be >= 2");
  int max_label = -1;
  for (const auto& g : all) max_label = std::max(max_label, g.label);
  std::vector<std::vector<std::size_t>> by_class(max_label + 1);
  for (std::size_t i = 0; i < all.size(); ++i) by_class[all[i].label].push_back(i);

  std::vector<int> fold(all.size(), -1);
  Rng root(seed);
  for (int c = 0; c <= max_label; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < static_cast<std::size_t>(k))
      throw ConfigError("kfold: class " + std::to_string(c) + " has fewer than k images");
    Rng rng = root.split(static_cast<std::uint64_t>(c));
    shuffle_indices(idx, rng);
    for (std::size_t i = 0; i < idx.size(); ++i)
      fold[idx[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  }
  return fold;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < ds.images.size(); ++i)
    write_ppm((fs::path(dir) / ds.manifest.entries[i].filename).string(), ds.images[i].image);

  json m;
  m["version"] = ds.manifest.version;
  m["dims"] = {ds.manifest.height, ds.manifest.width};
  m["classes"] = ds.manifest.classes;
  json entries = json::array();
  for (const auto& e : ds.manifest.entries) {
    json je;
    je["id"] = e.id;
    je["label"] = e.label;
    je["filename"] = e.filename;
    je["checksum"] = e.checksum;
    entries.push_back(je);
  }
  m["entries"] = entries;
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw DataError("cannot write manifest under " + dir);
  out << m.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw DataError("missing manifest.json under " + dir);
  json m;
  try {
    in >> m;
  } catch (const std::exception& e) {
    throw DataError(std::string("malformed manifest.json: ") + e.what());
  }

  Dataset ds;
  try {
    ds.manifest.version = m.at("version").get<int>();
    ds.manifest.height = m.at("dims").at(0).get<int>();
    ds.manifest.width = m.at("dims").at(1).get<int>();
    ds.manifest.classes = m.at("classes").get<std::string>();
    for (const auto& je : m.at("entries")) {
      ManifestEntry e;
      e.id = je.at("id").get<std::string>();
      e.label = je.at("label").get<int>();
      e.filename = je.at("filename").get<std::string>();
      e.checksum = je.at("checksum").get<std::string>();
      ds.manifest.entries.push_back(e);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest.json field error: ") + e.what());
  }
  if (ds.manifest.version != 1) throw DataError("unsupported manifest version");

  int n_classes = static_cast<int>(ds.manifest.classes.size());
  for (const auto& e : ds.manifest.entries) {
    if (e.label < 0 || e.label >= n_classes)
      throw DataError("manifest label out of range for id " + e.id);
    GlyphImage gi;
    std::string path = (fs::path(dir) / e.filename).string();
    gi.image = read_ppm(path);
    if (gi.image.h != ds.manifest.height || gi.image.w != ds.manifest.width)
      throw DataError("image dims disagree with manifest: " + path);
    if (to_hex(fnv1a64(gi.image.px.data(), gi.image.px.size())) != e.checksum)
      throw DataError("checksum mismatch: " + path);
    gi.label = e.label;
    gi.id = e.id;
    ds.images.push_back(std::move(gi));
  }
  return ds;
}

}  // namespace lpcr
