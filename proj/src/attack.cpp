#include "lpcr/attack.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lpcr/errors.hpp"
#include "lpcr/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace lpcr {

const char* shape_name(PatchShape s) {
  switch (s) {
    case PatchShape::Horizontal: return "horizontal";
    case PatchShape::Vertical: return "vertical";
    case PatchShape::Circular: return "circular";
  }
  return "?";
}

PatchShape shape_from_name(const std::string& name) {
  if (name == "horizontal") return PatchShape::Horizontal;
  if (name == "vertical") return PatchShape::Vertical;
  if (name == "circular") return PatchShape::Circular;
  throw ConfigError("unknown patch shape: " + name);
}

void validate_patch(const PatchSpec& p, int h, int w) {
  if (p.size < 1) throw ConfigError("patch size must be >= 1");
  switch (p.shape) {
    case PatchShape::Horizontal:
      if (p.size > h / 2) throw ConfigError("horizontal thickness exceeds h/2");
      if (p.pos_row < 0 || p.pos_row + p.size > h) throw ConfigError("horizontal patch out of bounds");
      break;
    case PatchShape::Vertical:
      if (p.size > w / 2) throw ConfigError("vertical thickness exceeds w/2");
      if (p.pos_col < 0 || p.pos_col + p.size > w) throw ConfigError("vertical patch out of bounds");
      break;
    case PatchShape::Circular:
      if (p.size > std::min(h, w) / 4) throw ConfigError("circular radius exceeds min(h,w)/4");
      if (p.pos_row - p.size < 0 || p.pos_row + p.size >= h || p.pos_col - p.size < 0 ||
          p.pos_col + p.size >= w)
        throw ConfigError("circular patch out of bounds");
      break;
  }
}

bool pixel_in_patch(const PatchSpec& p, int y, int x) {
  switch (p.shape) {
    case PatchShape::Horizontal: return y >= p.pos_row && y < p.pos_row + p.size;
    case PatchShape::Vertical: return x >= p.pos_col && x < p.pos_col + p.size;
    case PatchShape::Circular: {
      int dy = y - p.pos_row, dx = x - p.pos_col;
      return dy * dy + dx * dx <= p.size * p.size;
    }
  }
  return false;
}

Rect patch_bbox(const PatchSpec& p) {
  switch (p.shape) {
    case PatchShape::Horizontal:
      return {p.pos_row, p.pos_row + p.size, 0, 1 << 28};
    case PatchShape::Vertical:
      return {0, 1 << 28, p.pos_col, p.pos_col + p.size};
    case PatchShape::Circular:
      return {p.pos_row - p.size, p.pos_row + p.size + 1, p.pos_col - p.size,
              p.pos_col + p.size + 1};
  }
  return {};
}

void apply_patch_in_place(Image& img, const PatchSpec& p) {
  validate_patch(p, img.h, img.w);
  Rect r = patch_bbox(p);
  r.y1 = std::min(r.y1, img.h);
  r.x1 = std::min(r.x1, img.w);
  for (int y = r.y0; y < r.y1; ++y)
    for (int x = r.x0; x < r.x1; ++x)
      if (pixel_in_patch(p, y, x)) {
        img.at(y, x, 0) = p.color.r;
        img.at(y, x, 1) = p.color.g;
        img.at(y, x, 2) = p.color.b;
      }
}

Image perturb_image(const Image& img, const PatchSpec& p) {
  Image out = img;
  apply_patch_in_place(out, p);
  return out;
}

bool patch_changes_image(const Image& img, const PatchSpec& p) {
  Rect r = patch_bbox(p);
  r.y1 = std::min(r.y1, img.h);
  r.x1 = std::min(r.x1, img.w);
  for (int y = r.y0; y < r.y1; ++y)
    for (int x = r.x0; x < r.x1; ++x)
      if (pixel_in_patch(p, y, x) &&
          (img.at(y, x, 0) != p.color.r || img.at(y, x, 1) != p.color.g ||
           img.at(y, x, 2) != p.color.b))
        return true;
  return false;
}

Rgb darkest_pixel(const Image& img) {
  if (img.px.empty()) throw ConfigError("darkest_pixel: empty image");
  int best = 256 * 3;
  std::size_t best_i = 0;
  for (std::size_t i = 0; i < img.px.size(); i += 3) {
    int s = img.px[i] + img.px[i + 1] + img.px[i + 2];
    if (s < best) {
      best = s;
      best_i = i;
    }
  }
  return Rgb{img.px[best_i], img.px[best_i + 1], img.px[best_i + 2]};
}

int shape_threshold(PatchShape s, int h, int w, const AttackConfig& c) {
  int bound, cfg;
  switch (s) {
    case PatchShape::Horizontal: bound = h / 2; cfg = c.horizontal_max; break;
    case PatchShape::Vertical: bound = w / 2; cfg = c.vertical_max; break;
    default: bound = std::min(h, w) / 4; cfg = c.circular_max; break;
  }
  if (bound < 1) throw ConfigError("image too small for this patch shape");
  if (cfg == 0) return bound;
  if (cfg < 1 || cfg > bound)
    throw ConfigError("attack threshold out of range for " + std::string(shape_name(s)));
  return cfg;
}

std::vector<std::pair<int, int>> patch_positions(PatchShape s, int size, int h, int w,
                                                 int circular_stride) {
  std::vector<std::pair<int, int>> pos;
  switch (s) {
    case PatchShape::Horizontal:
      for (int i = 0; i + size <= h; ++i) pos.emplace_back(i, 0);
      break;
    case PatchShape::Vertical:
      for (int j = 0; j + size <= w; ++j) pos.emplace_back(0, j);
      break;
    case PatchShape::Circular: {
      int stride = std::max(1, circular_stride);
      for (int r = size; r + size < h; r += stride)
        for (int c = size; c + size < w; c += stride) pos.emplace_back(r, c);
      break;
    }
  }
  return pos;
}

double mse(const Image& a, const Image& b) {
  if (!a.same_dims(b)) throw ConfigError("mse: image dims differ");
  double sum = 0;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    double d = static_cast<double>(a.px[i]) - static_cast<double>(b.px[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(a.px.size());
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
ScoreResult score_from_logits_impl(const T* logits, int n, int true_label) {
  if (true_label < 0 || true_label >= n) throw ConfigError("score: label out of range");
  ScoreResult r;
  double mx = static_cast<double>(logits[0]);
  r.predicted = 0;
  for (int i = 1; i < n; ++i)
    if (static_cast<double>(logits[i]) > mx) {
      mx = static_cast<double>(logits[i]);
      r.predicted = i;
    }
  double sum = 0;
  for (int i = 0; i < n; ++i) sum += std::exp(static_cast<double>(logits[i]) - mx);
  double lse = mx + std::log(sum);
  r.confidence = std::exp(static_cast<double>(logits[r.predicted]) - lse);
  r.loss = lse - static_cast<double>(logits[true_label]);
  return r;
}

}  // namespace

ScoreResult score_from_logits(const float* logits, int n, int true_label) {
  return score_from_logits_impl(logits, n, true_label);
}
ScoreResult score_from_logits(const double* logits, int n, int true_label) {
  return score_from_logits_impl(logits, n, true_label);
}

namespace {

class CnnAttackContext : public AttackContext {
 public:
  CnnAttackContext(LpcrModel& model, const Image& img, int true_label)
      : eval_(model.net, img), original_(img), patched_(img), true_label_(true_label),
        num_classes_(model.net.out_dim()) {}

  ScoreResult score_patch(const PatchSpec& patch) override {
    apply_patch_in_place(patched_, patch);
    Rect r = patch_bbox(patch);
    const std::vector<float>& logits = eval_.score_rect(patched_, r);
    ScoreResult s = score_from_logits(logits.data(), num_classes_, true_label_);
    // Undo the patch so the buffer stays clean for the next probe.
    Rect c = r;
    c.y0 = std::max(0, c.y0);
    c.x0 = std::max(0, c.x0);
    c.y1 = std::min(patched_.h, c.y1);
    c.x1 = std::min(patched_.w, c.x1);
    for (int y = c.y0; y < c.y1; ++y)
      for (int x = c.x0; x < c.x1; ++x)
        for (int ch = 0; ch < 3; ++ch) patched_.at(y, x, ch) = original_.at(y, x, ch);
    return s;
  }

  ScoreResult score_clean() override {
    return score_from_logits(eval_.clean_logits().data(), num_classes_, true_label_);
  }

 private:
  PatchedEval eval_;
  Image original_;
  Image patched_;
  int true_label_;
  int num_classes_;
};

}  // namespace

ScoreResult CnnClassifier::score(const Image& img, int true_label) {
  Tensor x = image_to_tensor(img);
  FwdOpt opt;
  opt.mode = Mode::Eval;
  opt.threads = threads_;
  ForwardCache cache;
  forward(model_.net, x, opt, &cache);
  std::size_t nl = model_.net.layers.size();
  bool has_softmax = model_.net.layers.back().spec.kind == LayerKind::Softmax;
  const Tensor& logits = cache.acts[has_softmax ? nl - 1 : nl];
  return score_from_logits(logits.ptr(), model_.net.out_dim(), true_label);
}

std::unique_ptr<AttackContext> CnnClassifier::make_context(const Image& img, int true_label) {
  return std::make_unique<CnnAttackContext>(model_, img, true_label);
}

AttackOutcome exhaustive_mask_attack(AttackContext& ctx, const GlyphImage& img, PatchShape shape,
                                     const AttackConfig& config) {
  const int h = img.image.h, w = img.image.w;
  const Rgb color = darkest_pixel(img.image);
  const int threshold = shape_threshold(shape, h, w, config);

  AttackOutcome out;
  out.record.image_id = img.id;
  out.record.shape = shape;
  out.record.true_label = img.label;

  for (int size = 1; size <= threshold; ++size) {
    double best_loss = 0;  // reset per size; any qualifying probe beats it
    std::optional<PatchSpec> best;
    ScoreResult best_score;
    for (auto [row, col] : patch_positions(shape, size, h, w, config.circular_stride)) {
      PatchSpec p{shape, row, col, size, color};
      if (!patch_changes_image(img.image, p)) continue;  // X' == X: no perturbation
      ScoreResult s = ctx.score_patch(p);
      if (config.require_misclassification && s.predicted == img.label) continue;
      if (s.loss > best_loss) {
        best_loss = s.loss;
        best = p;
        best_score = s;
      }
    }
    if (best) {
      out.record.success = true;
      out.record.patch = *best;
      out.record.predicted = best_score.predicted;
      out.record.confidence = best_score.confidence;
      out.record.loss = best_score.loss;
      out.adversarial = perturb_image(img.image, *best);
      out.record.mse = mse(img.image, out.adversarial);
      return out;
    }
  }

  ScoreResult clean = ctx.score_clean();
  out.record.success = false;
  out.record.predicted = clean.predicted;
  out.record.confidence = clean.confidence;
  out.record.loss = clean.loss;
  out.record.mse = 0;
  out.adversarial = img.image;
  return out;
}

AttackOutcome exhaustive_mask_attack(Classifier& model, const GlyphImage& img, PatchShape shape,
                                     const AttackConfig& config) {
  auto ctx = model.make_context(img.image, img.label);
  return exhaustive_mask_attack(*ctx, img, shape, config);
}

Image fgsm_attack(LpcrModel& model, const Image& img, int true_label, double epsilon) {
  if (epsilon < 0) throw ConfigError("fgsm: epsilon must be >= 0");
  Tensor x = image_to_tensor(img);
  FwdOpt opt;
  opt.mode = Mode::Eval;
  opt.threads = 1;
  LossGrad<float> lg = loss_and_grad(model.net, x, {true_label}, opt, /*want_input_grad=*/true);

  Image out = img;
  std::int64_t plane = static_cast<std::int64_t>(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int xx = 0; xx < img.w; ++xx) {
      std::int64_t p = static_cast<std::int64_t>(y) * img.w + xx;
      for (int c = 0; c < 3; ++c) {
        float g = lg.input_grad.data[c * plane + p];
        double s = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
        double v = img.at(y, xx, c) / 255.0 + epsilon * s;
        v = std::clamp(v, 0.0, 1.0);
        out.at(y, xx, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  return out;
}

AttackRunResult attack_dataset(Classifier& model, const std::vector<GlyphImage>& dataset,
                               const std::vector<PatchShape>& shapes, const AttackConfig& config,
                               int threads) {
  if (dataset.empty()) throw ConfigError("attack_dataset: empty dataset");
  if (shapes.empty()) throw ConfigError("attack_dataset: no shapes requested");

  const int n = static_cast<int>(dataset.size());
  const int ns = static_cast<int>(shapes.size());
  std::vector<AttackOutcome> outcomes(static_cast<std::size_t>(n) * ns);

  parallel_for(0, n, threads, [&](int i) {
    auto ctx = model.make_context(dataset[i].image, dataset[i].label);
    for (int s = 0; s < ns; ++s)
      outcomes[static_cast<std::size_t>(i) * ns + s] =
          exhaustive_mask_attack(*ctx, dataset[i], shapes[s], config);
  });

  AttackRunResult result;
  result.records.reserve(outcomes.size());
  for (auto& o : outcomes) result.records.push_back(o.record);

  for (int s = 0; s < ns; ++s) {
    ShapeSummary sum;
    sum.shape = shapes[s];
    double conf = 0, m = 0;
    for (int i = 0; i < n; ++i) {
      const AttackOutcome& o = outcomes[static_cast<std::size_t>(i) * ns + s];
      sum.attempts++;
      if (o.record.success) {
        sum.successes++;
        conf += o.record.confidence;
        m += o.record.mse;
      }
    }
    sum.rate = sum.attempts ? static_cast<double>(sum.successes) / sum.attempts : 0.0;
    sum.mean_confidence = sum.successes ? conf / sum.successes : 0.0;
    sum.mean_mse = sum.successes ? m / sum.successes : 0.0;
    result.summaries.push_back(sum);
  }

  for (int i = 0; i < n; ++i)
    for (int s = 0; s < ns; ++s) {
      AttackOutcome& o = outcomes[static_cast<std::size_t>(i) * ns + s];
      if (!o.record.success) continue;
      HardExample he;
      he.adversarial.image = std::move(o.adversarial);
      he.adversarial.label = o.record.true_label;
      he.adversarial.id = o.record.image_id + "__" + shape_name(o.record.shape);
      he.original_id = o.record.image_id;
      he.shape = o.record.shape;
      he.patch = *o.record.patch;
      he.predicted = o.record.predicted;
      he.confidence = o.record.confidence;
      he.loss = o.record.loss;
      he.mse = o.record.mse;
      result.hard_set.push_back(std::move(he));
    }
  return result;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

json patch_to_json(const PatchSpec& p) {
  json j;
  j["shape"] = shape_name(p.shape);
  j["row"] = p.pos_row;
  j["col"] = p.pos_col;
  j["size"] = p.size;
  j["color"] = {p.color.r, p.color.g, p.color.b};
  return j;
}

PatchSpec patch_from_json(const json& j) {
  PatchSpec p;
  p.shape = shape_from_name(j.at("shape").get<std::string>());
  p.pos_row = j.at("row").get<int>();
  p.pos_col = j.at("col").get<int>();
  p.size = j.at("size").get<int>();
  p.color.r = j.at("color").at(0).get<std::uint8_t>();
  p.color.g = j.at("color").at(1).get<std::uint8_t>();
  p.color.b = j.at("color").at(2).get<std::uint8_t>();
  return p;
}

}  // namespace

void write_records_jsonl(const std::vector<AttackRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write records: " + path);
  for (const auto& r : records) {
    json j;
    j["id"] = r.image_id;
    j["shape"] = shape_name(r.shape);
    j["true_label"] = r.true_label;
    j["success"] = r.success;
    j["patch"] = r.patch ? patch_to_json(*r.patch) : json(nullptr);
    j["predicted"] = r.predicted;
    j["confidence"] = r.confidence;
    j["loss"] = r.loss;
    j["mse"] = r.mse;
    out << j.dump() << "\n";
  }
}

std::vector<AttackRecord> read_records_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open records: " + path);
  std::vector<AttackRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      AttackRecord r;
      r.image_id = j.at("id").get<std::string>();
      r.shape = shape_from_name(j.at("shape").get<std::string>());
      r.true_label = j.at("true_label").get<int>();
      r.success = j.at("success").get<bool>();
      if (!j.at("patch").is_null()) r.patch = patch_from_json(j.at("patch"));
      r.predicted = j.at("predicted").get<int>();
      r.confidence = j.at("confidence").get<double>();
      r.loss = j.at("loss").get<double>();
      r.mse = j.at("mse").get<double>();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad record: " + e.what());
    }
  }
  return records;
}

void write_summary_csv(const std::vector<ShapeSummary>& summaries, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write summary: " + path);
  out << "shape,attempts,successes,rate,mean_confidence,mean_mse\n";
  char buf[160];
  for (const auto& s : summaries) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.6f,%.6f,%.3f\n", shape_name(s.shape), s.attempts,
                  s.successes, s.rate, s.mean_confidence, s.mean_mse);
    out << buf;
  }
}

void save_hard_set(const AttackRunResult& result, const std::string& classes, int h, int w,
                   const std::string& dir) {
  fs::create_directories(dir);
  json m;
  m["version"] = 1;
  m["dims"] = {h, w};
  m["classes"] = classes;
  json entries = json::array();
  for (const auto& e : result.hard_set) {
    std::string filename = e.adversarial.id + ".ppm";
    write_ppm((fs::path(dir) / filename).string(), e.adversarial.image);
    json je;
    je["id"] = e.adversarial.id;
    je["original_id"] = e.original_id;
    je["shape"] = shape_name(e.shape);
    je["label"] = e.adversarial.label;
    je["filename"] = filename;
    je["checksum"] = to_hex(fnv1a64(e.adversarial.image.px.data(), e.adversarial.image.px.size()));
    je["patch"] = patch_to_json(e.patch);
    je["predicted"] = e.predicted;
    je["confidence"] = e.confidence;
    je["loss"] = e.loss;
    je["mse"] = e.mse;
    entries.push_back(je);
  }
  m["entries"] = entries;
  std::ofstream out(fs::path(dir) / "hard_manifest.json");
  if (!out) throw DataError("cannot write hard set manifest under " + dir);
  out << m.dump(2) << "\n";
}

HardSet load_hard_set(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "hard_manifest.json");
  if (!in) throw DataError("missing hard_manifest.json under " + dir);
  json m;
  try {
    in >> m;
  } catch (const std::exception& e) {
    throw DataError(std::string("malformed hard_manifest.json: ") + e.what());
  }
  HardSet hs;
  try {
    hs.height = m.at("dims").at(0).get<int>();
    hs.width = m.at("dims").at(1).get<int>();
    hs.classes = m.at("classes").get<std::string>();
    for (const auto& je : m.at("entries")) {
      HardExample e;
      e.adversarial.id = je.at("id").get<std::string>();
      e.original_id = je.at("original_id").get<std::string>();
      e.shape = shape_from_name(je.at("shape").get<std::string>());
      e.adversarial.label = je.at("label").get<int>();
      if (e.adversarial.label < 0 || e.adversarial.label >= static_cast<int>(hs.classes.size()))
        throw DataError("hard set label out of range for " + e.adversarial.id);
      std::string path = (fs::path(dir) / je.at("filename").get<std::string>()).string();
      e.adversarial.image = read_ppm(path);
      if (to_hex(fnv1a64(e.adversarial.image.px.data(), e.adversarial.image.px.size())) !=
          je.at("checksum").get<std::string>())
        throw DataError("checksum mismatch: " + path);
      e.patch = patch_from_json(je.at("patch"));
      e.predicted = je.at("predicted").get<int>();
      e.confidence = je.at("confidence").get<double>();
      e.loss = je.at("loss").get<double>();
      e.mse = je.at("mse").get<double>();
      hs.images.push_back(e.adversarial);
      hs.examples.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("hard_manifest.json field error: ") + e.what());
  }
  return hs;
}

}  // namespace lpcr
