#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lpcr {

// H x W x 3 image, 8-bit channels, row-major (y, x, c).
struct Image {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> px;  // size h*w*3

  Image() = default;
  Image(int height, int width, std::uint8_t fill = 0)
      : h(height), w(width), px(static_cast<std::size_t>(height) * width * 3, fill) {}

  std::uint8_t& at(int y, int x, int c) { return px[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return px[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }

  bool same_dims(const Image& o) const { return h == o.h && w == o.w; }
  bool operator==(const Image& o) const { return h == o.h && w == o.w && px == o.px; }
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

// Labeled sample. `label` indexes the class alphabet; `id` is stable across runs.
struct GlyphImage {
  Image image;
  int label = -1;
  std::string id;
};

constexpr int kNumClasses = 13;
extern const char kClassAlphabet[kNumClasses];  // {0..9, A, B, F}

int class_index(char symbol);          // -1 if unknown
char class_symbol(int label);          // throws ConfigError if out of range

// FNV-1a 64-bit over a byte range; used for every file checksum in the toolkit.
std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n);
std::string to_hex(std::uint64_t v);
std::uint64_t from_hex(const std::string& s);

// Binary PPM (P6, maxval 255). Throws DataError naming the file on any
// malformed header, bad dimensions, or truncation.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// Binary PGM (P5, maxval 255) for grayscale analysis renders.
void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& gray);

}  // namespace lpcr
