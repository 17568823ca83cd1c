#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "mvsa/errors.hpp"
#include "mvsa/image.hpp"

namespace mvsa {

/// Integer samples as stored on disk (8- or 16-bit), interleaved.
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
  int maxval = 0;  // PGM header value; 0 = full range of bit_depth

  double max_value() const {
    if (maxval > 0) return maxval;
    return bit_depth == 16 ? 65535.0 : 255.0;
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void png_error_fn(png_structp, png_const_charp msg) { throw FormatError(std::string("PNG: ") + msg); }
inline void png_warning_fn(png_structp, png_const_charp) {}

inline RawImage read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw FormatError("cannot open image '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  if (!png) throw FormatError("PNG: cannot allocate reader");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  png_init_io(png, fp.get());
  png_read_info(png, info);
  int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (bit_depth == 16) png_set_swap(png);
  png_read_update_info(png, info);

  RawImage img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  bit_depth = png_get_bit_depth(png, info);
  img.bit_depth = bit_depth == 16 ? 16 : 8;
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<unsigned char> buf(rowbytes * img.height);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());

  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(n);
  if (img.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint16_t v;
      std::memcpy(&v, buf.data() + 2 * i, 2);
      img.samples[i] = v;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) img.samples[i] = buf[i];
  }
  return img;
}

inline void write_png(const std::string& path, const RawImage& img) {
  if (img.channels < 1 || img.channels > 4) throw ArgumentError("write_png: 1-4 channels supported");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw FormatError("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  if (!png) throw FormatError("PNG: cannot allocate writer");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};

  static constexpr int kColor[] = {PNG_COLOR_TYPE_GRAY, PNG_COLOR_TYPE_GRAY_ALPHA, PNG_COLOR_TYPE_RGB,
                                   PNG_COLOR_TYPE_RGB_ALPHA};
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, img.bit_depth, kColor[img.channels - 1], PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (img.bit_depth == 16) png_set_swap(png);

  const std::size_t row_samples = static_cast<std::size_t>(img.width) * img.channels;
  const std::size_t bytes_per = img.bit_depth == 16 ? 2 : 1;
  std::vector<unsigned char> row(row_samples * bytes_per);
  for (int y = 0; y < img.height; ++y) {
    const std::uint16_t* src = img.samples.data() + y * row_samples;
    for (std::size_t i = 0; i < row_samples; ++i) {
      if (bytes_per == 2)
        std::memcpy(row.data() + 2 * i, &src[i], 2);
      else
        row[i] = static_cast<unsigned char>(src[i]);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

/// Binary PGM (P5), maxval up to 65535 (16-bit samples are big-endian).
inline RawImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image '" + path + "'");
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P5") throw FormatError("PGM '" + path + "': only binary P5 is supported", 0);
  RawImage img;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    img.maxval = std::stoi(token());
    if (img.maxval < 1 || img.maxval > 65535) throw FormatError("PGM '" + path + "': invalid maxval");
    img.bit_depth = img.maxval > 255 ? 16 : 8;
  } catch (const std::logic_error&) {
    throw FormatError("PGM '" + path + "': malformed header");
  }
  img.channels = 1;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  const std::size_t bpp = img.bit_depth == 16 ? 2 : 1;
  std::vector<unsigned char> buf(n * bpp);
  const auto header_end = static_cast<std::size_t>(in.tellg());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size())
    throw FormatError("PGM '" + path + "': truncated payload, expected " + std::to_string(buf.size()) +
                          " bytes, got " + std::to_string(in.gcount()),
                      header_end + static_cast<std::size_t>(in.gcount()));
  img.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    img.samples[i] = bpp == 2 ? static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]) : buf[i];
  return img;
}

}  // namespace detail

/// PNG or binary PGM, chosen by file signature.
inline RawImage read_raw_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image '" + path + "'");
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  in.close();
  if (png_sig_cmp(sig, 0, 8) == 0) return detail::read_png(path);
  if (sig[0] == 'P' && sig[1] == '5') return detail::read_pgm(path);
  throw FormatError("image '" + path + "': not a PNG or binary PGM file", 0);
}

inline void write_raw_png(const std::string& path, const RawImage& img) { detail::write_png(path, img); }

/// Loads a colour or grey image normalized to [0,1]. Alpha is dropped.
inline ImageGrid load_image(const std::string& path) {
  const RawImage raw = read_raw_image(path);
  const int out_channels = raw.channels >= 3 ? 3 : 1;
  ImageGrid img(raw.width, raw.height, out_channels);
  const double inv = 1.0 / raw.max_value();
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      for (int c = 0; c < out_channels; ++c)
        img.at(x, y, c) = static_cast<float>(
            raw.samples[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels + c] * inv);
  return img;
}

/// 8-bit PNG of an image in [0,1].
inline void save_image_png(const std::string& path, const ImageGrid& img) {
  RawImage raw{img.width, img.height, img.channels, 8, {}, 0};
  raw.samples.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double v = std::clamp(static_cast<double>(img.data[i]), 0.0, 1.0);
    raw.samples[i] = static_cast<std::uint16_t>(std::lround(v * 255.0));
  }
  write_raw_png(path, raw);
}

/// 16-bit depth image: stored value / depth_scale = depth, 0 = invalid.
inline DepthMap load_depth_png(const std::string& path, double depth_scale) {
  if (!(depth_scale > 0.0)) throw ArgumentError("load_depth_png: depth_scale must be positive");
  const RawImage raw = read_raw_image(path);
  if (raw.channels != 1) throw FormatError("depth image '" + path + "' must be single-channel");
  DepthMap d(raw.width, raw.height);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x) {
      const std::uint16_t s = raw.samples[static_cast<std::size_t>(y) * raw.width + x];
      if (s == 0)
        d.invalidate(x, y);
      else
        d.set(x, y, s / depth_scale);
    }
  return d;
}

/// Depths are rounded to depth*depth_scale and clamped to 65535; invalid = 0.
inline void save_depth_png(const std::string& path, const DepthMap& d, double depth_scale) {
  if (!(depth_scale > 0.0)) throw ArgumentError("save_depth_png: depth_scale must be positive");
  RawImage raw{d.width, d.height, 1, 16, std::vector<std::uint16_t>(d.size(), 0), 0};
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!d.valid[i]) continue;
    const double v = std::round(d.depth[i] * depth_scale);
    raw.samples[i] = static_cast<std::uint16_t>(std::clamp(v, 1.0, 65535.0));
  }
  write_raw_png(path, raw);
}

}  // namespace mvsa
