#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mvsa/errors.hpp"

namespace mvsa {

/// Row-major interleaved image with values in [0,1].
struct ImageGrid {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  ImageGrid() = default;
  ImageGrid(int w, int h, int c) : width(w), height(h), channels(c) {
    if (w < 1 || h < 1 || c < 1) throw ArgumentError("ImageGrid: dimensions must be positive");
    data.assign(static_cast<std::size_t>(w) * h * c, 0.0f);
  }

  float& at(int x, int y, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool empty() const { return data.empty(); }

  /// Luma 0.299R + 0.587G + 0.114B; single-channel images pass through.
  float gray(int x, int y) const {
    if (channels >= 3) return 0.299f * at(x, y, 0) + 0.587f * at(x, y, 1) + 0.114f * at(x, y, 2);
    return at(x, y, 0);
  }

  void validate() const {
    if (data.size() != static_cast<std::size_t>(width) * height * channels)
      throw ArgumentError("ImageGrid: data length does not match dimensions");
    for (float v : data)
      if (!std::isfinite(v)) throw ArgumentError("ImageGrid: non-finite pixel value");
  }
};

/// Dense depth in scene units. `scale` is the pixel stride of this grid
/// relative to the image it was estimated from (grid pixel (u,v) sits on
/// image pixel (scale*u, scale*v)).
struct DepthMap {
  int width = 0;
  int height = 0;
  int scale = 1;
  std::vector<double> depth;
  std::vector<unsigned char> valid;

  DepthMap() = default;
  DepthMap(int w, int h, int s = 1) : width(w), height(h), scale(s) {
    if (w < 1 || h < 1 || s < 1) throw ArgumentError("DepthMap: dimensions must be positive");
    depth.assign(static_cast<std::size_t>(w) * h, 0.0);
    valid.assign(static_cast<std::size_t>(w) * h, 0);
  }

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  std::size_t size() const { return depth.size(); }

  bool is_valid(int x, int y) const { return valid[index(x, y)] != 0; }
  double at(int x, int y) const { return depth[index(x, y)]; }

  void set(int x, int y, double d) {
    const std::size_t i = index(x, y);
    depth[i] = d;
    valid[i] = (std::isfinite(d) && d > 0.0) ? 1 : 0;
  }
  void invalidate(int x, int y) {
    const std::size_t i = index(x, y);
    depth[i] = 0.0;
    valid[i] = 0;
  }

  std::size_t count_valid() const {
    std::size_t n = 0;
    for (auto v : valid) n += v;
    return n;
  }
};

}  // namespace mvsa
