#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvsa/errors.hpp"
#include "mvsa/image.hpp"

namespace mvsa {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics in pixels.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ArgumentError("Intrinsics: focal lengths must be positive");
    if (width < 1 || height < 1) throw ArgumentError("Intrinsics: image size must be at least 1x1");
  }

  double mean_focal() const { return 0.5 * (fx + fy); }

  /// Intrinsics of a grid sampled every `stride` pixels starting at pixel 0.
  Intrinsics downsampled(int stride) const {
    if (stride < 1) throw ArgumentError("Intrinsics::downsampled: stride must be >= 1");
    const double s = stride;
    return {fx / s, fy / s, cx / s, cy / s, (width + stride - 1) / stride, (height + stride - 1) / stride};
  }

  bool contains(double u, double v) const {
    return u >= 0.0 && v >= 0.0 && u <= width - 1.0 && v <= height - 1.0;
  }
};

/// Rigid transform x' = R x + t.
struct RigidPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidPose identity() { return {}; }
  static RigidPose from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }

  /// Row-major 4x4; the bottom row must be (0,0,0,1).
  static RigidPose from_row_major(std::span<const double, 16> m) {
    RigidPose p;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = m[r * 4 + c];
      p.translation[r] = m[r * 4 + 3];
    }
    if (m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0)
      throw ArgumentError("RigidPose: bottom row of 4x4 must be (0,0,0,1)");
    return p;
  }

  std::array<double, 16> to_row_major() const {
    std::array<double, 16> m{};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[r * 4 + c] = rotation(r, c);
      m[r * 4 + 3] = translation[r];
    }
    m[15] = 1.0;
    return m;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidPose inverse() const {
    const Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  RigidPose operator*(const RigidPose& o) const {
    return {rotation * o.rotation, rotation * o.translation + translation};
  }

  /// Orthonormality error max|RᵀR - I| and determinant error |det R - 1|.
  double orthonormality_error() const {
    return ((rotation.transpose() * rotation) - Mat3::Identity()).cwiseAbs().maxCoeff();
  }
  double determinant_error() const { return std::abs(rotation.determinant() - 1.0); }

  bool is_valid(double tol = 1e-6) const {
    return rotation.allFinite() && translation.allFinite() && orthonormality_error() <= tol &&
           determinant_error() <= tol;
  }
};

/// One posed view. Stores world-from-camera as given and caches the inverse.
struct CameraFrame {
  std::string id;
  Intrinsics intrinsics;
  RigidPose world_from_camera;
  RigidPose camera_from_world;
  ImageGrid image;
  std::optional<DepthMap> gt_depth;

  CameraFrame() = default;
  CameraFrame(std::string frame_id, const Intrinsics& k, const RigidPose& pose, ImageGrid img = {},
              std::optional<DepthMap> gt = std::nullopt)
      : id(std::move(frame_id)),
        intrinsics(k),
        world_from_camera(pose),
        camera_from_world(pose.inverse()),
        image(std::move(img)),
        gt_depth(std::move(gt)) {
    intrinsics.validate();
    if (!image.empty() && (image.width != k.width || image.height != k.height))
      throw ArgumentError("CameraFrame '" + id + "': image size does not match intrinsics");
    if (gt_depth && (gt_depth->width != k.width || gt_depth->height != k.height))
      throw ArgumentError("CameraFrame '" + id + "': ground-truth depth size does not match intrinsics");
  }

  Vec3 center() const { return world_from_camera.translation; }
};

struct RangeEstimate {
  double d_min = 0.0;
  double d_max = 0.0;

  void validate() const {
    if (!(d_min > 0.0) || !(d_max > d_min) || !std::isfinite(d_max))
      throw ArgumentError("RangeEstimate: requires 0 < d_min < d_max");
  }
  double geometric_mean() const { return std::sqrt(d_min * d_max); }
};

struct ProjectedPoint {
  double u = 0.0;
  double v = 0.0;
  double z = 0.0;
  bool valid = false;
};

inline ProjectedPoint project_point(const Intrinsics& k, const Vec3& p_cam) {
  const double z = p_cam.z();
  if (!(z > 0.0)) return {0.0, 0.0, z, false};
  return {k.fx * p_cam.x() / z + k.cx, k.fy * p_cam.y() / z + k.cy, z, true};
}

inline Vec3 backproject_pixel(const Intrinsics& k, double u, double v, double depth) {
  if (!(depth > 0.0)) throw DomainError("backproject_pixel: depth must be positive");
  return {(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth};
}

/// Source-camera-from-reference-camera transform.
inline RigidPose relative_pose(const RigidPose& ref_world_from_camera, const RigidPose& src_world_from_camera) {
  return src_world_from_camera.inverse() * ref_world_from_camera;
}

/// sqrt(|t| + 2/3 tr(I - R)) for a relative pose.
inline double pose_distance(const RigidPose& rel) {
  const double trace_term = (Mat3::Identity() - rel.rotation).trace();
  // tr(I - R) = 2 - 2cos(theta) >= 0; clamp rounding below zero.
  const double value = rel.translation.norm() + (2.0 / 3.0) * std::max(0.0, trace_term);
  return std::sqrt(value);
}

/// Bounds test for a projection. Points within `eps` px outside the border
/// are snapped onto it, so rounding from a rescaled scene cannot flip the
/// validity of a correspondence that lands exactly on the edge.
inline bool snap_into_image(const Intrinsics& k, ProjectedPoint& q, double eps = 1e-9) {
  auto snap = [eps](double& x, double hi) {
    if (x < 0.0 && x >= -eps) x = 0.0;
    if (x > hi && x <= hi + eps) x = hi;
  };
  snap(q.u, k.width - 1.0);
  snap(q.v, k.height - 1.0);
  return k.contains(q.u, q.v);
}

/// Reprojection of reference pixel (u,v) at depth d into a source camera.
/// Bounds are checked against `src_k` width/height.
inline ProjectedPoint sweep_correspondence(const Intrinsics& ref_k, const Intrinsics& src_k,
                                           const RigidPose& src_from_ref, double u, double v, double d) {
  const Vec3 p_ref = backproject_pixel(ref_k, u, v, d);
  ProjectedPoint q = project_point(src_k, src_from_ref.apply(p_ref));
  if (q.valid && !snap_into_image(src_k, q)) q.valid = false;
  return q;
}

inline ProjectedPoint sweep_correspondence(const CameraFrame& ref, const CameraFrame& src, double u, double v,
                                           double d) {
  return sweep_correspondence(ref.intrinsics, src.intrinsics,
                              relative_pose(ref.world_from_camera, src.world_from_camera), u, v, d);
}

struct RangeHeuristicConfig {
  double max_disparity_frac = 0.3;
  double min_disparity_px = 2.0;
  double absolute_min = 1e-3;
  double absolute_max = 1e6;
  RangeEstimate fallback{0.25, 100.0};
  double zero_baseline_eps = 1e-9;
};

/// Depth band over which disparities between the reference and any source
/// stay within [min_disparity_px, max_disparity_frac * width], using a
/// fronto-parallel disparity model d = f * b / disparity.
inline RangeEstimate estimate_matchable_range(const CameraFrame& ref, std::span<const CameraFrame> sources,
                                              const RangeHeuristicConfig& cfg = {}) {
  if (sources.empty()) throw ArgumentError("estimate_matchable_range: at least one source frame required");
  const double f = ref.intrinsics.mean_focal();
  const double disp_max = cfg.max_disparity_frac * ref.intrinsics.width;
  const double disp_min = cfg.min_disparity_px;

  double lo = std::numeric_limits<double>::infinity();
  double hi = 0.0;
  bool any = false;
  for (const CameraFrame& src : sources) {
    const double b = (src.center() - ref.center()).norm();
    if (!(b > cfg.zero_baseline_eps)) continue;
    any = true;
    lo = std::min(lo, f * b / disp_max);
    hi = std::max(hi, f * b / disp_min);
  }
  if (!any) return cfg.fallback;
  lo = std::clamp(lo, cfg.absolute_min, cfg.absolute_max);
  hi = std::clamp(hi, cfg.absolute_min, cfg.absolute_max);
  if (!(hi > lo)) return cfg.fallback;
  return {lo, hi};
}

}  // namespace mvsa
