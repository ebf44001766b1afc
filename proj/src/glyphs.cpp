#include "lpcr/glyphs.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "lpcr/errors.hpp"

namespace lpcr {
namespace {

struct Seg {
  double x0, y0, x1, y1;  // unit glyph box, x right, y down
};

// Stroke skeletons per character. Shapes mimic embossed plate glyphs:
// blocky, axis-aligned where possible. 'B' shares the outline of '8' with a
// narrower right edge, and '0' is '8' without the middle bar, so the natural
// confusions between 0/8/B survive the synthetic stand-in.
const std::vector<Seg>& segments_for(char symbol) {
  static const std::vector<Seg> k0 = {{0, 0, 1, 0}, {1, 0, 1, 1}, {1, 1, 0, 1}, {0, 1, 0, 0}};
  static const std::vector<Seg> k1 = {{0.55, 0, 0.55, 1}, {0.25, 0.18, 0.55, 0}};
  static const std::vector<Seg> k2 = {
      {0, 0, 1, 0}, {1, 0, 1, 0.5}, {1, 0.5, 0, 0.5}, {0, 0.5, 0, 1}, {0, 1, 1, 1}};
  static const std::vector<Seg> k3 = {{0, 0, 1, 0}, {1, 0, 1, 1}, {0, 1, 1, 1}, {0.3, 0.5, 1, 0.5}};
  static const std::vector<Seg> k4 = {{0, 0, 0, 0.5}, {0, 0.5, 1, 0.5}, {1, 0, 1, 1}};
  static const std::vector<Seg> k5 = {
      {1, 0, 0, 0}, {0, 0, 0, 0.5}, {0, 0.5, 1, 0.5}, {1, 0.5, 1, 1}, {1, 1, 0, 1}};
  static const std::vector<Seg> k6 = {
      {1, 0, 0, 0}, {0, 0, 0, 1}, {0, 1, 1, 1}, {1, 1, 1, 0.5}, {1, 0.5, 0, 0.5}};
  static const std::vector<Seg> k7 = {{0, 0, 1, 0}, {1, 0, 0.35, 1}};
  // '8' is an hourglass: two lobes with a waist. Slanted sides keep it
  // distinguishable from box glyphs with a stray band drawn across them.
  static const std::vector<Seg> k8 = {
      {0.1, 0, 0.9, 0},        {0.1, 0, 0.25, 0.5},  {0.9, 0, 0.75, 0.5},
      {0.25, 0.5, 0.75, 0.5},  {0.25, 0.5, 0.05, 1}, {0.75, 0.5, 0.95, 1},
      {0.05, 1, 0.95, 1}};
  static const std::vector<Seg> k9 = {
      {1, 0.5, 0, 0.5}, {0, 0.5, 0, 0}, {0, 0, 1, 0}, {1, 0, 1, 1}, {1, 1, 0, 1}};
  static const std::vector<Seg> kA = {
      {0, 1, 0.5, 0}, {0.5, 0, 1, 1}, {0.19, 0.62, 0.81, 0.62}};
  static const std::vector<Seg> kB = {
      {0, 0, 0.82, 0}, {0.82, 0, 0.82, 1}, {0.82, 1, 0, 1}, {0, 1, 0, 0}, {0, 0.5, 0.82, 0.5}};
  static const std::vector<Seg> kF = {{0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0.5, 0.7, 0.5}};

  switch (symbol) {
    case '0': return k0;
    case '1': return k1;
    case '2': return k2;
    case '3': return k3;
    case '4': return k4;
    case '5': return k5;
    case '6': return k6;
    case '7': return k7;
    case '8': return k8;
    case '9': return k9;
    case 'A': return kA;
    case 'B': return kB;
    case 'F': return kF;
    default: throw ConfigError(std::string("unknown class symbol '") + symbol + "'");
  }
}

double dist_point_segment(double px, double py, const Seg& s) {
  double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  double cx = s.x0 + t * dx, cy = s.y0 + t * dy;
  return std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy));
}

std::uint8_t lerp_channel(std::uint8_t bg, std::uint8_t fg, double cov) {
  double v = bg + (static_cast<double>(fg) - bg) * cov;
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

}  // namespace

Image render_glyph(char symbol, const GlyphStyle& style, int h, int w, Rng& rng) {
  if (h <= 0 || w <= 0 || h % 16 != 0 || w % 16 != 0)
    throw ConfigError("glyph dims must be positive and divisible by 16, got " +
                      std::to_string(h) + "x" + std::to_string(w));
  const std::vector<Seg>& skeleton = segments_for(symbol);

  // Fixed draw order keeps the stream layout stable.
  double amp = style.jitter;
  double tx = rng.next_range(-0.04, 0.04) * amp;
  double ty = rng.next_range(-0.04, 0.04) * amp;
  double scale = 1.0 + rng.next_range(-0.06, 0.06) * amp;
  double shear = rng.next_range(-0.08, 0.08) * amp;

  // Glyph box inside the canvas, in pixel coordinates.
  double x0 = 0.16 * w, x1 = 0.84 * w;
  double y0 = 0.10 * h, y1 = 0.90 * h;

  std::vector<Seg> segs(skeleton.size());
  auto map_pt = [&](double u, double v, double& X, double& Y) {
    double uu = 0.5 + (u - 0.5) * scale + shear * (0.5 - v) + tx;
    double vv = 0.5 + (v - 0.5) * scale + ty;
    X = x0 + uu * (x1 - x0);
    Y = y0 + vv * (y1 - y0);
  };
  for (std::size_t i = 0; i < skeleton.size(); ++i) {
    map_pt(skeleton[i].x0, skeleton[i].y0, segs[i].x0, segs[i].y0);
    map_pt(skeleton[i].x1, skeleton[i].y1, segs[i].x1, segs[i].y1);
  }

  double half = std::max(0.75, style.stroke_px * 0.5);
  Image img(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double d = 1e30;
      for (const Seg& s : segs) d = std::min(d, dist_point_segment(x + 0.5, y + 0.5, s));
      double cov = std::clamp(0.5 + (half - d), 0.0, 1.0);
      img.at(y, x, 0) = lerp_channel(style.bg.r, style.fg.r, cov);
      img.at(y, x, 1) = lerp_channel(style.bg.g, style.fg.g, cov);
      img.at(y, x, 2) = lerp_channel(style.bg.b, style.fg.b, cov);
    }
  }
  return img;
}

}  // namespace lpcr
