#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvsa/errors.hpp"
#include "mvsa/geometry.hpp"
#include "mvsa/image.hpp"

namespace mvsa {

namespace detail {

inline void require_same_size(const DepthMap& a, const DepthMap& b, const char* op) {
  if (a.width != b.width || a.height != b.height) throw ArgumentError(std::string(op) + ": dimension mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training losses

/// Multi-scale log-depth L1. `pyramid[s-1]` is the prediction at scale s
/// (s = 1..4); each is nearest-neighbour upsampled to the ground-truth grid
/// and weighted by 1/s^2. Each scale is averaged over pixels valid in both.
inline double log_depth_l1(std::span<const DepthMap> pyramid, const DepthMap& gt) {
  if (pyramid.empty()) throw ArgumentError("log_depth_l1: empty prediction pyramid");
  if (gt.count_valid() == 0) throw ArgumentError("log_depth_l1: ground truth has no valid pixels");
  double loss = 0.0;
  for (std::size_t si = 0; si < pyramid.size(); ++si) {
    const DepthMap& p = pyramid[si];
    const double s = static_cast<double>(si + 1);
    double sum = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < gt.height; ++y) {
      const int py = static_cast<int>(static_cast<long long>(y) * p.height / gt.height);
      for (int x = 0; x < gt.width; ++x) {
        const int px = static_cast<int>(static_cast<long long>(x) * p.width / gt.width);
        if (!gt.is_valid(x, y) || !p.is_valid(px, py)) continue;
        sum += std::abs(std::log(p.at(px, py)) - std::log(gt.at(x, y)));
        ++n;
      }
    }
    if (n > 0) loss += sum / static_cast<double>(n) / (s * s);
  }
  return loss;
}

/// Inverse depth average-pooled by `factor` (ceil-sized output). A pooled
/// pixel averages the pixels valid in `mask`; it is invalid if none are.
struct InverseDepthGrid {
  int width = 0;
  int height = 0;
  std::vector<double> value;
  std::vector<unsigned char> valid;
};

inline InverseDepthGrid pooled_inverse_depth(const DepthMap& d, const std::vector<unsigned char>& mask, int factor) {
  InverseDepthGrid g;
  g.width = (d.width + factor - 1) / factor;
  g.height = (d.height + factor - 1) / factor;
  g.value.assign(static_cast<std::size_t>(g.width) * g.height, 0.0);
  g.valid.assign(g.value.size(), 0);
  for (int gy = 0; gy < g.height; ++gy)
    for (int gx = 0; gx < g.width; ++gx) {
      double sum = 0.0;
      int n = 0;
      for (int y = gy * factor; y < std::min(d.height, (gy + 1) * factor); ++y)
        for (int x = gx * factor; x < std::min(d.width, (gx + 1) * factor); ++x) {
          if (!mask[d.index(x, y)]) continue;
          sum += 1.0 / d.at(x, y);
          ++n;
        }
      if (n > 0) {
        g.value[static_cast<std::size_t>(gy) * g.width + gx] = sum / n;
        g.valid[static_cast<std::size_t>(gy) * g.width + gx] = 1;
      }
    }
  return g;
}

/// Forward differences (gx, gy); zero on the last column/row and wherever the
/// forward neighbour is invalid.
inline std::pair<std::vector<double>, std::vector<double>> forward_gradients(const InverseDepthGrid& g) {
  std::vector<double> gx(g.value.size(), 0.0), gy(g.value.size(), 0.0);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * g.width + x;
      if (!g.valid[i]) continue;
      if (x + 1 < g.width && g.valid[i + 1]) gx[i] = g.value[i + 1] - g.value[i];
      if (y + 1 < g.height && g.valid[i + g.width]) gy[i] = g.value[i + g.width] - g.value[i];
    }
  return {std::move(gx), std::move(gy)};
}

/// Sum over scales s = 1..4 (average-pool factor 2^(s-1)) of the mean
/// |grad(1/pred) - grad(1/gt)| (L1 over x and y) on jointly valid pixels.
inline double inv_depth_gradient_loss(const DepthMap& pred, const DepthMap& gt, int scales = 4) {
  detail::require_same_size(pred, gt, "inv_depth_gradient_loss");
  std::vector<unsigned char> joint(pred.size());
  for (std::size_t i = 0; i < joint.size(); ++i) {
    joint[i] = pred.valid[i] && gt.valid[i];
    if (joint[i] && (!(pred.depth[i] > 0.0) || !(gt.depth[i] > 0.0)))
      throw DataError("inv_depth_gradient_loss: non-positive depth on a valid pixel");
  }
  double loss = 0.0;
  for (int s = 0; s < scales; ++s) {
    const int factor = 1 << s;
    const InverseDepthGrid p = pooled_inverse_depth(pred, joint, factor);
    const InverseDepthGrid g = pooled_inverse_depth(gt, joint, factor);
    const auto [pgx, pgy] = forward_gradients(p);
    const auto [ggx, ggy] = forward_gradients(g);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      if (!p.valid[i]) continue;
      sum += std::abs(pgx[i] - ggx[i]) + std::abs(pgy[i] - ggy[i]);
      ++n;
    }
    if (n > 0) loss += sum / static_cast<double>(n);
  }
  return loss;
}

struct NormalMap {
  int width = 0;
  int height = 0;
  std::vector<Vec3> normal;
  std::vector<unsigned char> valid;

  const Vec3& at(int x, int y) const { return normal[static_cast<std::size_t>(y) * width + x]; }
  bool is_valid(int x, int y) const { return valid[static_cast<std::size_t>(y) * width + x] != 0; }
};

/// Camera-space normals from backprojected neighbours: central differences,
/// one-sided at borders or next to invalid pixels. Oriented so n_z < 0.
inline NormalMap normals_from_depth(const DepthMap& d, const Intrinsics& k) {
  NormalMap nm;
  nm.width = d.width;
  nm.height = d.height;
  nm.normal.assign(d.size(), Vec3::Zero());
  nm.valid.assign(d.size(), 0);
  auto point = [&](int x, int y) { return backproject_pixel(k, x, y, d.at(x, y)); };
  auto tangent = [&](int x, int y, int dx, int dy, Vec3& t) {
    const bool fwd = (x + dx < d.width && y + dy < d.height) && d.is_valid(x + dx, y + dy);
    const bool bwd = (x - dx >= 0 && y - dy >= 0) && d.is_valid(x - dx, y - dy);
    if (fwd && bwd)
      t = point(x + dx, y + dy) - point(x - dx, y - dy);
    else if (fwd)
      t = point(x + dx, y + dy) - point(x, y);
    else if (bwd)
      t = point(x, y) - point(x - dx, y - dy);
    else
      return false;
    return true;
  };
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x) {
      if (!d.is_valid(x, y)) continue;
      Vec3 tu, tv;
      if (!tangent(x, y, 1, 0, tu) || !tangent(x, y, 0, 1, tv)) continue;
      Vec3 n = tu.cross(tv);
      const double len = n.norm();
      if (!(len > 1e-12) || !std::isfinite(len)) continue;
      n /= len;
      if (n.z() > 0.0) n = -n;
      const std::size_t i = d.index(x, y);
      nm.normal[i] = n;
      nm.valid[i] = 1;
    }
  return nm;
}

/// Mean of (1 - n_pred . n_gt) / 2 over jointly valid pixels; in [0,1].
/// Evaluated as |n_pred - n_gt|^2 / 4, equal for unit normals and exactly 0
/// when they coincide.
inline double normals_loss(const NormalMap& pred, const NormalMap& gt) {
  if (pred.width != gt.width || pred.height != gt.height) throw ArgumentError("normals_loss: dimension mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.normal.size(); ++i) {
    if (!pred.valid[i] || !gt.valid[i]) continue;
    sum += std::min(1.0, 0.25 * (pred.normal[i] - gt.normal[i]).squaredNorm());
    ++n;
  }
  if (n == 0) throw ArgumentError("normals_loss: no jointly valid pixels");
  return sum / static_cast<double>(n);
}

struct LossBreakdown {
  double depth = 0.0;
  double gradient = 0.0;
  double normals = 0.0;
  double total() const { return depth + gradient + normals; }
};

/// Sum of the three supervised terms. The gradient and normals terms use the
/// finest pyramid level.
inline LossBreakdown total_loss(std::span<const DepthMap> pyramid, const DepthMap& gt, const Intrinsics& k) {
  LossBreakdown l;
  l.depth = log_depth_l1(pyramid, gt);
  l.gradient = inv_depth_gradient_loss(pyramid.front(), gt);
  l.normals = normals_loss(normals_from_depth(pyramid.front(), k), normals_from_depth(gt, k));
  return l;
}

// ---------------------------------------------------------------------------
// Benchmark metrics

struct PixelErrors {
  std::vector<double> abs_rel;  // NaN where not jointly valid
  double mean = 0.0;
  std::size_t n_valid = 0;
};

namespace detail {

inline void check_gt(const DepthMap& gt, const char* op) {
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt.valid[i] && !(gt.depth[i] > 0.0))
      throw DataError(std::string(op) + ": ground truth has a non-positive depth marked valid");
}

}  // namespace detail

/// |pred - gt| / gt per jointly valid pixel and its mean.
inline PixelErrors abs_rel_map(const DepthMap& pred, const DepthMap& gt) {
  detail::require_same_size(pred, gt, "abs_rel_map");
  detail::check_gt(gt, "abs_rel_map");
  PixelErrors e;
  e.abs_rel.assign(gt.size(), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!gt.valid[i] || !pred.valid[i]) continue;
    e.abs_rel[i] = std::abs(pred.depth[i] - gt.depth[i]) / gt.depth[i];
    sum += e.abs_rel[i];
    ++e.n_valid;
  }
  if (e.n_valid == 0) throw ArgumentError("abs_rel_map: no jointly valid pixels");
  e.mean = sum / static_cast<double>(e.n_valid);
  return e;
}

/// 100 * fraction of jointly valid pixels with max(p/g, g/p) < thresh.
inline double inlier_ratio(const DepthMap& pred, const DepthMap& gt, double thresh = 1.03) {
  detail::require_same_size(pred, gt, "inlier_ratio");
  detail::check_gt(gt, "inlier_ratio");
  std::size_t inliers = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!gt.valid[i] || !pred.valid[i]) continue;
    const double p = pred.depth[i];
    const double g = gt.depth[i];
    inliers += std::max(p / g, g / p) < thresh;
    ++n;
  }
  if (n == 0) throw ArgumentError("inlier_ratio: no jointly valid pixels");
  return 100.0 * static_cast<double>(inliers) / static_cast<double>(n);
}

struct ImageMetrics {
  std::string name;
  double abs_rel = 0.0;
  double tau = 0.0;
  std::size_t n_valid = 0;
};

struct DepthReport {
  double abs_rel = 0.0;
  double tau = 0.0;
  std::size_t n_valid = 0;
  std::size_t skipped = 0;  // pairs without jointly valid pixels
  std::vector<ImageMetrics> per_image;
};

struct DepthPair {
  std::string name;
  const DepthMap* pred = nullptr;
  const DepthMap* gt = nullptr;
};

/// Metrics per image first, then an unweighted mean over images.
inline DepthReport depth_report(std::span<const DepthPair> pairs, double thresh = 1.03) {
  DepthReport r;
  for (const DepthPair& p : pairs) {
    detail::require_same_size(*p.pred, *p.gt, "depth_report");
    detail::check_gt(*p.gt, "depth_report");
    std::size_t joint = 0;
    for (std::size_t i = 0; i < p.gt->size(); ++i) joint += p.gt->valid[i] && p.pred->valid[i];
    if (joint == 0) {
      ++r.skipped;
      continue;
    }
    ImageMetrics m;
    m.name = p.name;
    const PixelErrors e = abs_rel_map(*p.pred, *p.gt);
    m.abs_rel = e.mean;
    m.n_valid = e.n_valid;
    m.tau = inlier_ratio(*p.pred, *p.gt, thresh);
    r.per_image.push_back(std::move(m));
  }
  if (r.per_image.empty()) throw ArgumentError("depth_report: no image has jointly valid pixels");
  for (const ImageMetrics& m : r.per_image) {
    r.abs_rel += m.abs_rel;
    r.tau += m.tau;
    r.n_valid += m.n_valid;
  }
  r.abs_rel /= static_cast<double>(r.per_image.size());
  r.tau /= static_cast<double>(r.per_image.size());
  return r;
}

inline nlohmann::json depth_report_to_json(const DepthReport& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const ImageMetrics& m : r.per_image)
    images.push_back({{"name", m.name}, {"abs_rel", m.abs_rel}, {"tau", m.tau}, {"n_valid", m.n_valid}});
  return {{"abs_rel", r.abs_rel},
          {"tau", r.tau},
          {"n_valid", r.n_valid},
          {"skipped", r.skipped},
          {"per_image", images}};
}

/// Fixed-width table; rel is reported x100 next to tau, as in benchmark tables.
inline std::string depth_report_table(const DepthReport& r) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-32s %10s %10s %10s\n", "image", "rel", "tau", "pixels");
  out += line;
  for (const ImageMetrics& m : r.per_image) {
    std::snprintf(line, sizeof line, "%-32.32s %10.3f %10.2f %10zu\n", m.name.c_str(), 100.0 * m.abs_rel, m.tau,
                  m.n_valid);
    out += line;
  }
  std::snprintf(line, sizeof line, "%-32s %10.3f %10.2f %10zu\n", "average", 100.0 * r.abs_rel, r.tau, r.n_valid);
  out += line;
  if (r.skipped > 0) {
    std::snprintf(line, sizeof line, "skipped %zu image(s) without valid pixels\n", r.skipped);
    out += line;
  }
  return out;
}

}  // namespace mvsa
