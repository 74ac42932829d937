// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "occfit/common.hpp"
#include "occfit/math.hpp"

namespace occfit {

// Row-major interleaved float image, values nominally in [0, 1] for color.
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.f)
      : width(w), height(h), channels(c),
        data(size_t(w) * size_t(h) * size_t(c), fill) {}

  float at(int x, int y, int c) const {
    return data[(size_t(y) * width + size_t(x)) * channels + size_t(c)];
  }
  float& at(int x, int y, int c) {
    return data[(size_t(y) * width + size_t(x)) * channels + size_t(c)];
  }
};

// Per-pixel class ids; 0 is free/background.
struct LabelMap {
  int width = 0, height = 0;
  std::vector<uint8_t> data;

  LabelMap() = default;
  LabelMap(int w, int h) : width(w), height(h), data(size_t(w) * size_t(h), 0) {}

  uint8_t at(int x, int y) const { return data[size_t(y) * width + size_t(x)]; }
  uint8_t& at(int x, int y) { return data[size_t(y) * width + size_t(x)]; }
};

inline double scalar_value(double x) { return x; }
inline double scalar_value(float x) { return double(x); }

// Continuous sample domain is [0, width-1] x [0, height-1] with pixel centers
// at integer coordinates. The corner lattice is clamped so sampling exactly on
// the far edge stays in range.
template <class T>
void sample_bilinear(const Image& img, const T& u, const T& v, T* out) {
  double uv = scalar_value(u), vv = scalar_value(v);
  if (!(uv >= 0.0 && uv <= img.width - 1.0 && vv >= 0.0 &&
        vv <= img.height - 1.0))
    throw DomainError("bilinear sample outside image bounds");
  int x0 = int(uv);
  int y0 = int(vv);
  if (x0 > img.width - 2) x0 = img.width - 2;
  if (y0 > img.height - 2) y0 = img.height - 2;
  if (x0 < 0) x0 = 0;  // width == 1 collapses to nearest
  if (y0 < 0) y0 = 0;
  int x1 = std::min(x0 + 1, img.width - 1);
  int y1 = std::min(y0 + 1, img.height - 1);
  T fu = u - double(x0);
  T fv = v - double(y0);
  T w11 = fu * fv;
  T w10 = fu - w11;        // fu * (1 - fv)
  T w01 = fv - w11;        // (1 - fu) * fv
  T w00 = 1.0 - fu - w01;  // (1 - fu) * (1 - fv)
  for (int c = 0; c < img.channels; ++c) {
    out[c] = w00 * double(img.at(x0, y0, c)) + w10 * double(img.at(x1, y0, c)) +
             w01 * double(img.at(x0, y1, c)) + w11 * double(img.at(x1, y1, c));
  }
}

namespace detail {

// Reads one whitespace-delimited token, skipping '#' comments, tracking the
// byte offset for parse errors.
// Reads one whitespace-delimited token, skipping # comments. `offset` tracks
// the stream position; `tok_start` receives the token's first byte.
inline std::string next_token(std::istream& in, size_t& offset,
                              size_t* tok_start = nullptr) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    ++offset;
    if (c == '#') {
      while ((c = in.get()) != EOF) {
        ++offset;
        if (c == '\n') break;
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    if (tok.empty() && tok_start) *tok_start = offset - 1;
    tok.push_back(char(c));
  }
  return tok;
}

inline int parse_int_token(std::istream& in, size_t& offset,
                           const std::string& what) {
  size_t start = offset;
  std::string tok = next_token(in, offset, &start);
  try {
    size_t used = 0;
    int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ParseError("expected integer for " + what + ", got '" + tok + "'",
                     start);
  }
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open for reading: " + path.string());
  return in;
}

}  // namespace detail

// Binary PPM (P6), max value 255. Color floats are clamped to [0, 1].
inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 3) throw DomainError("write_ppm needs a 3-channel image");
  auto out = detail::open_out(path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(size_t(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        row[size_t(x) * 3 + size_t(c)] =
            uint8_t(std::lround(clamp01(img.at(x, y, c)) * 255.f));
    out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!out) throw ConfigError("short write: " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  size_t off = 0;
  size_t magic_at = 0;
  std::string magic = detail::next_token(in, off, &magic_at);
  if (magic != "P6") throw ParseError("not a P6 ppm: '" + magic + "'", magic_at);
  int w = detail::parse_int_token(in, off, "width");
  int h = detail::parse_int_token(in, off, "height");
  int maxv = detail::parse_int_token(in, off, "maxval");
  if (w <= 0 || h <= 0) throw ParseError("bad ppm dimensions", off);
  if (maxv != 255) throw ParseError("unsupported ppm maxval", off);
  Image img(w, h, 3);
  std::vector<uint8_t> raw(size_t(w) * size_t(h) * 3);
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (size_t(in.gcount()) != raw.size())
    throw ParseError("truncated ppm pixel data", off + size_t(in.gcount()));
  for (size_t i = 0; i < raw.size(); ++i) img.data[i] = float(raw[i]) / 255.f;
  return img;
}

// Grayscale PFM, little-endian (negative scale), rows bottom-to-top.
inline void write_pfm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1) throw DomainError("write_pfm needs a 1-channel image");
  auto out = detail::open_out(path);
  out << "Pf\n" << img.width << " " << img.height << "\n-1.0\n";
  for (int y = img.height - 1; y >= 0; --y)
    out.write(reinterpret_cast<const char*>(&img.data[size_t(y) * img.width]),
              std::streamsize(sizeof(float) * size_t(img.width)));
  if (!out) throw ConfigError("short write: " + path.string());
}

inline Image read_pfm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  size_t off = 0;
  size_t magic_at = 0;
  std::string magic = detail::next_token(in, off, &magic_at);
  if (magic != "Pf")
    throw ParseError("not a grayscale pfm: '" + magic + "'", magic_at);
  int w = detail::parse_int_token(in, off, "width");
  int h = detail::parse_int_token(in, off, "height");
  std::string scale = detail::next_token(in, off);
  if (scale.empty() || scale[0] != '-')
    throw ParseError("big-endian pfm not supported", off);
  if (w <= 0 || h <= 0) throw ParseError("bad pfm dimensions", off);
  Image img(w, h, 1);
  for (int y = h - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(&img.data[size_t(y) * w]),
            std::streamsize(sizeof(float) * size_t(w)));
    if (size_t(in.gcount()) != sizeof(float) * size_t(w))
      throw ParseError("truncated pfm pixel data", off);
  }
  return img;
}

// Binary PGM (P5) for label maps, max value 255.
inline void write_pgm(const std::filesystem::path& path, const LabelMap& labels) {
  auto out = detail::open_out(path);
  out << "P5\n" << labels.width << " " << labels.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(labels.data.data()),
            std::streamsize(labels.data.size()));
  if (!out) throw ConfigError("short write: " + path.string());
}

inline LabelMap read_pgm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  size_t off = 0;
  size_t magic_at = 0;
  std::string magic = detail::next_token(in, off, &magic_at);
  if (magic != "P5") throw ParseError("not a P5 pgm: '" + magic + "'", magic_at);
  int w = detail::parse_int_token(in, off, "width");
  int h = detail::parse_int_token(in, off, "height");
  int maxv = detail::parse_int_token(in, off, "maxval");
  if (w <= 0 || h <= 0 || maxv != 255) throw ParseError("bad pgm header", off);
  LabelMap labels(w, h);
  in.read(reinterpret_cast<char*>(labels.data.data()),
          std::streamsize(labels.data.size()));
  if (size_t(in.gcount()) != labels.data.size())
    throw ParseError("truncated pgm pixel data", off + size_t(in.gcount()));
  return labels;
}

}  // namespace occfit
