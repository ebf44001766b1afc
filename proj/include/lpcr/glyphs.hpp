#pragma once

#include "lpcr/image.hpp"
#include "lpcr/rng.hpp"

namespace lpcr {

// Per-image rendering style. Stroke width is in pixels at the target dims.
struct GlyphStyle {
  double stroke_px = 3.0;
  Rgb fg{30, 30, 30};
  Rgb bg{220, 220, 220};
  double jitter = 1.0;  // 0 disables geometric jitter
};

// Rasterizes one character from the embedded stroke table onto an h x w
// canvas. Strokes are drawn in fg over a flat bg with a 1-pixel antialias
// band, so the darkest pixel of the result is always the stroke color and
// the lightest is the background. Deterministic in (symbol, style, dims,
// rng state); jitter consumes a fixed number of draws.
Image render_glyph(char symbol, const GlyphStyle& style, int h, int w, Rng& rng);

}  // namespace lpcr
