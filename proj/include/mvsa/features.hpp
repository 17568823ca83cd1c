#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mvsa/detail/binary_io.hpp"
#include "mvsa/errors.hpp"
#include "mvsa/image.hpp"

namespace mvsa {

/// Channel-major feature grid. Grid pixel (x, y) corresponds to image pixel
/// (scale*x, scale*y).
struct FeatureMap {
  int channels = 0;
  int width = 0;
  int height = 0;
  int scale = 1;
  std::vector<float> data;

  FeatureMap() = default;
  FeatureMap(int c, int w, int h, int s) : channels(c), width(w), height(h), scale(s) {
    if (c < 1 || w < 1 || h < 1 || s < 1) throw ArgumentError("FeatureMap: dimensions and scale must be positive");
    data.assign(static_cast<std::size_t>(c) * w * h, 0.0f);
  }

  std::size_t plane() const { return static_cast<std::size_t>(width) * height; }
  float& at(int c, int x, int y) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  float at(int c, int x, int y) const { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }

  std::vector<float> vector_at(int x, int y) const {
    std::vector<float> v(channels);
    for (int c = 0; c < channels; ++c) v[c] = at(c, x, y);
    return v;
  }

  /// Pixel-major copy: `channels` consecutive floats per grid pixel.
  std::vector<float> interleaved() const {
    std::vector<float> out(data.size());
    const std::size_t n = plane();
    for (int c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < n; ++i) out[i * channels + c] = data[c * n + i];
    return out;
  }
};

namespace detail {

/// Luma averaged over a centered window of `stride` pixels (tent-weighted ends
/// for even strides), sampled at image pixels (stride*u, stride*v).
inline std::vector<float> area_luma(const ImageGrid& img, int stride, int& w, int& h) {
  w = (img.width + stride - 1) / stride;
  h = (img.height + stride - 1) / stride;
  const int half = stride / 2;
  std::vector<float> wt(2 * half + 1, 1.0f);
  if (stride % 2 == 0 && stride > 1) wt.front() = wt.back() = 0.5f;
  std::vector<float> out(static_cast<std::size_t>(w) * h);
#pragma omp parallel for schedule(static)
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      double acc = 0.0, ws = 0.0;
      for (int j = -half; j <= half; ++j) {
        const int y = std::clamp(v * stride + j, 0, img.height - 1);
        for (int i = -half; i <= half; ++i) {
          const int x = std::clamp(u * stride + i, 0, img.width - 1);
          const double k = static_cast<double>(wt[j + half]) * wt[i + half];
          acc += k * img.gray(x, y);
          ws += k;
        }
      }
      out[static_cast<std::size_t>(v) * w + u] = static_cast<float>(acc / ws);
    }
  return out;
}

}  // namespace detail

/// Census-style descriptor: for each neighbor in a (2r+1)^2 window, the signed
/// difference (neighbor luma - center luma), L2-normalized. Flat patches stay
/// zero. With stride > 1 the luma is first area-averaged by the stride and the
/// window is taken on the reduced grid. Borders replicate the edge pixels.
inline FeatureMap extract_census_features(const ImageGrid& img, int patch_radius = 3, int stride = 4) {
  if (patch_radius < 1) throw ArgumentError("extract_census_features: patch_radius must be >= 1");
  if (stride < 1) throw ArgumentError("extract_census_features: stride must be >= 1");
  const int side = 2 * patch_radius + 1;
  if (img.width < side || img.height < side)
    throw ArgumentError("extract_census_features: image " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + " is smaller than the " + std::to_string(side) + "x" +
                        std::to_string(side) + " patch");

  int wf = 0, hf = 0;
  const std::vector<float> luma = detail::area_luma(img, stride, wf, hf);
  const int dims = side * side - 1;
  FeatureMap fm(dims, wf, hf, stride);
  constexpr double kFlat = 1e-6;

#pragma omp parallel for schedule(static)
  for (int yf = 0; yf < hf; ++yf) {
    std::vector<double> desc(dims);
    for (int xf = 0; xf < wf; ++xf) {
      const double center = luma[static_cast<std::size_t>(yf) * wf + xf];
      int k = 0;
      double norm2 = 0.0;
      for (int dy = -patch_radius; dy <= patch_radius; ++dy) {
        const int y = std::clamp(yf + dy, 0, hf - 1);
        for (int dx = -patch_radius; dx <= patch_radius; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int x = std::clamp(xf + dx, 0, wf - 1);
          const double d = luma[static_cast<std::size_t>(y) * wf + x] - center;
          norm2 += d * d;
          desc[k++] = d;
        }
      }
      const double norm = std::sqrt(norm2);
      const double inv = norm > kFlat ? 1.0 / norm : 0.0;
      for (int c = 0; c < dims; ++c) fm.at(c, xf, yf) = static_cast<float>(desc[c] * inv);
    }
  }
  return fm;
}

struct BilinearSample {
  std::vector<float> values;
  bool valid = false;
};

namespace detail {

struct BilinearTaps {
  int x0, y0, x1, y1;
  float wx, wy;
};

inline bool bilinear_taps(int width, int height, double x, double y, BilinearTaps& t) {
  if (!(x >= 0.0 && y >= 0.0 && x <= width - 1.0 && y <= height - 1.0)) return false;
  t.x0 = static_cast<int>(std::floor(x));
  t.y0 = static_cast<int>(std::floor(y));
  t.x1 = std::min(t.x0 + 1, width - 1);
  t.y1 = std::min(t.y0 + 1, height - 1);
  t.wx = static_cast<float>(x - t.x0);
  t.wy = static_cast<float>(y - t.y0);
  return true;
}

}  // namespace detail

/// Bilinear lookup in grid coordinates; invalid outside [0,W-1]x[0,H-1].
inline BilinearSample sample_bilinear(const FeatureMap& fm, double x, double y) {
  detail::BilinearTaps t{};
  if (!detail::bilinear_taps(fm.width, fm.height, x, y, t)) return {{}, false};
  BilinearSample s{std::vector<float>(fm.channels), true};
  const float w00 = (1 - t.wx) * (1 - t.wy), w10 = t.wx * (1 - t.wy);
  const float w01 = (1 - t.wx) * t.wy, w11 = t.wx * t.wy;
  for (int c = 0; c < fm.channels; ++c) {
    // Integer coordinates must reproduce grid values exactly, so skip
    // zero-weight taps instead of multiplying them in.
    float v = w00 * fm.at(c, t.x0, t.y0);
    if (w10 != 0.0f) v += w10 * fm.at(c, t.x1, t.y0);
    if (w01 != 0.0f) v += w01 * fm.at(c, t.x0, t.y1);
    if (w11 != 0.0f) v += w11 * fm.at(c, t.x1, t.y1);
    s.values[c] = v;
  }
  return s;
}

inline double dot_affinity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    throw ArgumentError("dot_affinity: length mismatch (" + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + ")");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

// MVSF: "MVSF", u32 C, u32 W, u32 H, u32 scale, C*W*H f32 channel-major.

inline std::vector<unsigned char> encode_feature_map(const FeatureMap& fm) {
  detail::ByteWriter w;
  w.put_magic("MVSF");
  w.put<std::uint32_t>(fm.channels);
  w.put<std::uint32_t>(fm.width);
  w.put<std::uint32_t>(fm.height);
  w.put<std::uint32_t>(fm.scale);
  for (float v : fm.data) w.put<float>(v);
  return std::move(w.bytes());
}

inline FeatureMap decode_feature_map(const std::vector<unsigned char>& bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("MVSF", "MVSF");
  const auto c = r.get<std::uint32_t>("MVSF");
  const auto w = r.get<std::uint32_t>("MVSF");
  const auto h = r.get<std::uint32_t>("MVSF");
  const auto s = r.get<std::uint32_t>("MVSF");
  if (c == 0 || w == 0 || h == 0 || s == 0) throw FormatError("MVSF: zero dimension or scale in header", 4);
  const std::uint64_t count = std::uint64_t{c} * w * h;
  if (count > (std::uint64_t{1} << 32)) throw FormatError("MVSF: implausible header dimensions", 4);
  r.expect_payload(count * sizeof(float), "MVSF");

  FeatureMap fm;
  fm.channels = static_cast<int>(c);
  fm.width = static_cast<int>(w);
  fm.height = static_cast<int>(h);
  fm.scale = static_cast<int>(s);
  fm.data.resize(count);
  std::memcpy(fm.data.data(), r.cursor(), count * sizeof(float));
  for (std::size_t i = 0; i < count; ++i)
    if (!std::isfinite(fm.data[i]))
      throw FormatError("MVSF: non-finite feature value", r.position() + i * sizeof(float));
  return fm;
}

inline void save_feature_map(const std::string& path, const FeatureMap& fm) {
  detail::write_file_bytes(path, encode_feature_map(fm));
}

inline FeatureMap load_feature_map(const std::string& path) {
  return decode_feature_map(detail::read_file_bytes(path));
}

}  // namespace mvsa
