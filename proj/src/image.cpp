#include "lpcr/image.hpp"

#include <cstdio>
#include <fstream>

#include "lpcr/errors.hpp"

namespace lpcr {

const char kClassAlphabet[kNumClasses] = {'0', '1', '2', '3', '4', '5', '6',
                                          '7', '8', '9', 'A', 'B', 'F'};

int class_index(char symbol) {
  for (int i = 0; i < kNumClasses; ++i)
    if (kClassAlphabet[i] == symbol) return i;
  return -1;
}

char class_symbol(int label) {
  if (label < 0 || label >= kNumClasses)
    throw ConfigError("class label out of range: " + std::to_string(label));
  return kClassAlphabet[label];
}

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::uint64_t from_hex(const std::string& s) {
  std::uint64_t v = 0;
  for (char c : s) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
    else throw DataError("bad hex digit in checksum: " + s);
    v = (v << 4) | static_cast<std::uint64_t>(d);
  }
  return v;
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.px.data()),
            static_cast<std::streamsize>(img.px.size()));
  if (!out) throw DataError("write failed: " + path);
}

namespace {

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw DataError("truncated header: " + path);
  return tok;
}

int parse_dim(const std::string& tok, const std::string& path) {
  try {
    std::size_t pos = 0;
    long v = std::stol(tok, &pos);
    if (pos != tok.size() || v <= 0 || v > 1 << 16) throw std::invalid_argument(tok);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw DataError("malformed header field '" + tok + "': " + path);
  }
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  if (next_token(in, path) != "P6") throw DataError("not a P6 ppm: " + path);
  Image img;
  img.w = parse_dim(next_token(in, path), path);
  img.h = parse_dim(next_token(in, path), path);
  if (parse_dim(next_token(in, path), path) != 255)
    throw DataError("unsupported maxval (want 255): " + path);
  // Exactly one whitespace byte separates header and raster; next_token has
  // already consumed it as the delimiter of the maxval token.
  img.px.resize(static_cast<std::size_t>(img.h) * img.w * 3);
  in.read(reinterpret_cast<char*>(img.px.data()),
          static_cast<std::streamsize>(img.px.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.px.size()))
    throw DataError("truncated pixel data: " + path);
  return img;
}

void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& gray) {
  if (gray.size() != static_cast<std::size_t>(h) * w)
    throw ConfigError("pgm buffer size does not match dims");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()),
            static_cast<std::streamsize>(gray.size()));
  if (!out) throw DataError("write failed: " + path);
}

}  // namespace lpcr
