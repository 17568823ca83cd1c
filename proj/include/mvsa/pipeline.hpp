#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvsa/costvolume.hpp"
#include "mvsa/depthestimate.hpp"
#include "mvsa/errors.hpp"
#include "mvsa/evaluation.hpp"
#include "mvsa/features.hpp"
#include "mvsa/fusion.hpp"
#include "mvsa/geometry.hpp"
#include "mvsa/image.hpp"
#include "mvsa/imageio.hpp"

namespace mvsa {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Scene manifest

struct FrameEntry {
  std::string id;
  std::string image;  // relative to the manifest directory
  Intrinsics intrinsics;
  RigidPose world_from_camera;
  std::optional<std::string> gt_depth;
  double depth_scale = 1000.0;
};

struct SceneManifest {
  std::string units;
  std::vector<FrameEntry> frames;

  std::optional<std::size_t> index_of(const std::string& id) const {
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (frames[i].id == id) return i;
    return std::nullopt;
  }
};

/// Manifest plus decoded frames, in manifest order.
struct Scene {
  SceneManifest manifest;
  std::vector<CameraFrame> frames;

  const CameraFrame* find(const std::string& id) const {
    for (const CameraFrame& f : frames)
      if (f.id == id) return &f;
    return nullptr;
  }
};

inline constexpr double kPoseTolerance = 1e-4;

namespace detail {

inline const nlohmann::json& require_key(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw ConfigError(where + ": missing \"" + key + "\"");
  return obj.at(key);
}

template <typename T>
T json_get(const nlohmann::json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": wrong type");
  }
}

inline void reject_unknown_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok |= it.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
  }
}

inline nlohmann::json read_json_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: '" + path + "'");
  std::ifstream in(path);
  if (!in) throw ConfigError(std::string("cannot open ") + what + " '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string(what) + " '" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

}  // namespace detail

/// Checks a world-from-camera pose and names the frame in the diagnostic.
inline void check_frame_pose(const RigidPose& p, const std::string& id) {
  if (!p.rotation.allFinite() || !p.translation.allFinite())
    throw ConfigError("frame '" + id + "': pose has non-finite entries");
  if (p.rotation.determinant() < 0.0)
    throw ConfigError("frame '" + id + "': pose rotation is not a proper orthonormal rotation (det(R) = -1, reflection)");
  if (p.orthonormality_error() > kPoseTolerance || p.determinant_error() > kPoseTolerance)
    throw ConfigError("frame '" + id + "': pose rotation is not orthonormal (error " +
                      std::to_string(std::max(p.orthonormality_error(), p.determinant_error())) + ")");
}

inline SceneManifest manifest_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("manifest: top level must be an object");
  detail::reject_unknown_keys(doc, {"units", "frames"}, "manifest");
  SceneManifest m;
  if (doc.contains("units")) m.units = detail::json_get<std::string>(doc["units"], "manifest.units");
  const auto& frames = detail::require_key(doc, "frames", "manifest");
  if (!frames.is_array()) throw ConfigError("manifest.frames: must be an array");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& jf = frames[i];
    const std::string where = "manifest.frames[" + std::to_string(i) + "]";
    if (!jf.is_object()) throw ConfigError(where + ": must be an object");
    detail::reject_unknown_keys(jf, {"id", "image", "intrinsics", "world_from_camera", "gt_depth", "depth_scale"},
                                where);
    FrameEntry f;
    f.id = detail::json_get<std::string>(detail::require_key(jf, "id", where), where + ".id");
    if (f.id.empty()) throw ConfigError(where + ": empty id");
    if (!ids.insert(f.id).second) throw ConfigError("duplicate frame id '" + f.id + "'");
    f.image = detail::json_get<std::string>(detail::require_key(jf, "image", where), where + ".image");

    const auto& jk = detail::require_key(jf, "intrinsics", where);
    const std::string kw = "frame '" + f.id + "' intrinsics";
    detail::reject_unknown_keys(jk, {"fx", "fy", "cx", "cy", "width", "height"}, kw);
    f.intrinsics.fx = detail::json_get<double>(detail::require_key(jk, "fx", kw), kw + ".fx");
    f.intrinsics.fy = detail::json_get<double>(detail::require_key(jk, "fy", kw), kw + ".fy");
    f.intrinsics.cx = detail::json_get<double>(detail::require_key(jk, "cx", kw), kw + ".cx");
    f.intrinsics.cy = detail::json_get<double>(detail::require_key(jk, "cy", kw), kw + ".cy");
    f.intrinsics.width = detail::json_get<int>(detail::require_key(jk, "width", kw), kw + ".width");
    f.intrinsics.height = detail::json_get<int>(detail::require_key(jk, "height", kw), kw + ".height");
    try {
      f.intrinsics.validate();
    } catch (const ArgumentError& e) {
      throw ConfigError("frame '" + f.id + "': " + e.what());
    }

    const auto& jp = detail::require_key(jf, "world_from_camera", where);
    const auto m16 = detail::json_get<std::vector<double>>(jp, "frame '" + f.id + "' world_from_camera");
    if (m16.size() != 16) throw ConfigError("frame '" + f.id + "': world_from_camera must have 16 entries");
    try {
      f.world_from_camera = RigidPose::from_row_major(std::span<const double, 16>(m16.data(), 16));
    } catch (const ArgumentError& e) {
      throw ConfigError("frame '" + f.id + "': " + e.what());
    }
    check_frame_pose(f.world_from_camera, f.id);

    if (jf.contains("gt_depth"))
      f.gt_depth = detail::json_get<std::string>(jf["gt_depth"], "frame '" + f.id + "' gt_depth");
    if (jf.contains("depth_scale")) {
      f.depth_scale = detail::json_get<double>(jf["depth_scale"], "frame '" + f.id + "' depth_scale");
      if (!(f.depth_scale > 0.0)) throw ConfigError("frame '" + f.id + "': depth_scale must be positive");
    }
    m.frames.push_back(std::move(f));
  }
  return m;
}

inline nlohmann::json manifest_to_json(const SceneManifest& m) {
  nlohmann::json frames = nlohmann::json::array();
  for (const FrameEntry& f : m.frames) {
    const Intrinsics& k = f.intrinsics;
    nlohmann::json jf = {{"id", f.id},
                         {"image", f.image},
                         {"intrinsics",
                          {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width},
                           {"height", k.height}}},
                         {"world_from_camera", f.world_from_camera.to_row_major()}};
    if (f.gt_depth) {
      jf["gt_depth"] = *f.gt_depth;
      jf["depth_scale"] = f.depth_scale;
    }
    frames.push_back(std::move(jf));
  }
  return {{"units", m.units}, {"frames", frames}};
}

/// Reads the manifest and every referenced image and ground-truth depth.
inline Scene load_scene(const std::string& path) {
  Scene s;
  s.manifest = manifest_from_json(detail::read_json_file(path, "scene manifest"));
  const fs::path base = fs::path(path).parent_path();
  for (const FrameEntry& f : s.manifest.frames) {
    const fs::path img_path = base / f.image;
    if (!fs::exists(img_path)) throw ConfigError("frame '" + f.id + "': image not found: '" + img_path.string() + "'");
    ImageGrid img = load_image(img_path.string());
    if (img.width != f.intrinsics.width || img.height != f.intrinsics.height)
      throw ConfigError("frame '" + f.id + "': image is " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + " but intrinsics say " + std::to_string(f.intrinsics.width) +
                        "x" + std::to_string(f.intrinsics.height));
    std::optional<DepthMap> gt;
    if (f.gt_depth) {
      const fs::path gt_path = base / *f.gt_depth;
      if (!fs::exists(gt_path))
        throw ConfigError("frame '" + f.id + "': ground-truth depth not found: '" + gt_path.string() + "'");
      gt = load_depth_png(gt_path.string(), f.depth_scale);
      if (gt->width != f.intrinsics.width || gt->height != f.intrinsics.height)
        throw ConfigError("frame '" + f.id + "': ground-truth depth size does not match intrinsics");
    }
    s.frames.emplace_back(f.id, f.intrinsics, f.world_from_camera, std::move(img), std::move(gt));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Tuples

struct TupleSpec {
  std::string reference;
  std::vector<std::string> sources;
};

struct TupleSelection {
  std::vector<TupleSpec> tuples;
  std::vector<std::string> omitted;  // references without any candidate
};

/// Throws ConfigError if ids are unknown, the reference repeats in its
/// sources, or no source is given.
inline void validate_tuple(const TupleSpec& t, const SceneManifest& m) {
  if (!m.index_of(t.reference)) throw ConfigError("tuple references unknown frame id '" + t.reference + "'");
  if (t.sources.empty()) throw ConfigError("tuple '" + t.reference + "' has no sources");
  for (const std::string& s : t.sources) {
    if (s == t.reference) throw ConfigError("tuple '" + t.reference + "' lists its reference as a source");
    if (!m.index_of(s)) throw ConfigError("tuple '" + t.reference + "' references unknown frame id '" + s + "'");
  }
}

inline nlohmann::json tuples_to_json(const TupleSelection& sel) {
  nlohmann::json arr = nlohmann::json::array();
  for (const TupleSpec& t : sel.tuples) arr.push_back({{"reference", t.reference}, {"sources", t.sources}});
  return {{"tuples", arr}, {"omitted", sel.omitted}};
}

inline TupleSelection tuples_from_json(const nlohmann::json& doc) {
  const auto& arr = detail::require_key(doc, "tuples", "tuples file");
  if (!arr.is_array()) throw ConfigError("tuples file: \"tuples\" must be an array");
  TupleSelection sel;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "tuples[" + std::to_string(i) + "]";
    TupleSpec t;
    t.reference = detail::json_get<std::string>(detail::require_key(arr[i], "reference", where), where + ".reference");
    t.sources = detail::json_get<std::vector<std::string>>(detail::require_key(arr[i], "sources", where),
                                                           where + ".sources");
    sel.tuples.push_back(std::move(t));
  }
  if (doc.contains("omitted")) sel.omitted = detail::json_get<std::vector<std::string>>(doc["omitted"], "omitted");
  return sel;
}

inline void save_tuples(const std::string& path, const TupleSelection& sel) {
  detail::write_json_file(path, tuples_to_json(sel));
}

inline TupleSelection load_tuples(const std::string& path) {
  return tuples_from_json(detail::read_json_file(path, "tuples file"));
}

struct PoseTupleConfig {
  std::size_t max_sources = 8;
  double t_low = 0.025;
  double t_high = 0.45;
  double t_target = 0.225;
};

namespace detail {

struct Candidate {
  double key;  // smaller is better
  std::size_t index;
};

inline std::vector<std::string> pick_sources(std::vector<Candidate> c, std::span<const CameraFrame> frames,
                                             std::size_t max_sources) {
  std::stable_sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) {
    if (a.key != b.key) return a.key < b.key;
    return a.index < b.index;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < c.size() && out.size() < max_sources; ++i) out.push_back(frames[c[i].index].id);
  return out;
}

}  // namespace detail

/// Every frame in turn is a reference. Sources have pose distance in
/// [t_low, t_high], nearest to t_target first; equal keys keep manifest order.
inline TupleSelection select_tuples_pose(std::span<const CameraFrame> frames, const PoseTupleConfig& cfg = {}) {
  if (frames.size() < 2) throw ArgumentError("select_tuples_pose: at least two frames required");
  if (!(cfg.t_low <= cfg.t_high)) throw ArgumentError("select_tuples_pose: t_low must not exceed t_high");
  if (cfg.max_sources < 1) throw ArgumentError("select_tuples_pose: max_sources must be >= 1");
  TupleSelection sel;
  for (std::size_t r = 0; r < frames.size(); ++r) {
    std::vector<detail::Candidate> cand;
    for (std::size_t s = 0; s < frames.size(); ++s) {
      if (s == r) continue;
      const double d =
          pose_distance(relative_pose(frames[r].world_from_camera, frames[s].world_from_camera));
      if (d >= cfg.t_low && d <= cfg.t_high) cand.push_back({std::abs(d - cfg.t_target), s});
    }
    if (cand.empty()) {
      sel.omitted.push_back(frames[r].id);
      continue;
    }
    sel.tuples.push_back({frames[r].id, detail::pick_sources(std::move(cand), frames, cfg.max_sources)});
  }
  return sel;
}

struct OverlapTupleConfig {
  std::size_t max_sources = 8;
  double min_overlap = 0.3;
  int grid = 16;
  RangeHeuristicConfig range;
};

/// Fraction of a grid x grid lattice of reference pixel centres that,
/// backprojected at `depth`, project inside `src`.
inline double overlap_score(const CameraFrame& ref, const CameraFrame& src, double depth, int grid = 16) {
  if (grid < 1) throw ArgumentError("overlap_score: grid must be >= 1");
  if (!(depth > 0.0)) throw DomainError("overlap_score: depth must be positive");
  const RigidPose src_from_ref = relative_pose(ref.world_from_camera, src.world_from_camera);
  const Intrinsics& k = ref.intrinsics;
  int inside = 0;
  for (int j = 0; j < grid; ++j)
    for (int i = 0; i < grid; ++i) {
      const double u = (i + 0.5) * k.width / grid - 0.5;
      const double v = (j + 0.5) * k.height / grid - 0.5;
      const ProjectedPoint q = project_point(src.intrinsics, src_from_ref.apply(backproject_pixel(k, u, v, depth)));
      inside += q.valid && src.intrinsics.contains(q.u, q.v);
    }
  return static_cast<double>(inside) / (grid * grid);
}

/// Overlap at the arithmetic midpoint of the pair's matchable range.
inline double pair_overlap(const CameraFrame& ref, const CameraFrame& src, const OverlapTupleConfig& cfg = {}) {
  const RangeEstimate r = estimate_matchable_range(ref, std::span<const CameraFrame>(&src, 1), cfg.range);
  return overlap_score(ref, src, 0.5 * (r.d_min + r.d_max), cfg.grid);
}

inline TupleSelection select_tuples_overlap(std::span<const CameraFrame> frames, const OverlapTupleConfig& cfg = {}) {
  if (frames.size() < 2) throw ArgumentError("select_tuples_overlap: at least two frames required");
  if (cfg.max_sources < 1) throw ArgumentError("select_tuples_overlap: max_sources must be >= 1");
  TupleSelection sel;
  for (std::size_t r = 0; r < frames.size(); ++r) {
    std::vector<detail::Candidate> cand;
    for (std::size_t s = 0; s < frames.size(); ++s) {
      if (s == r) continue;
      const double score = pair_overlap(frames[r], frames[s], cfg);
      if (score >= cfg.min_overlap) cand.push_back({-score, s});
    }
    if (cand.empty()) {
      sel.omitted.push_back(frames[r].id);
      continue;
    }
    sel.tuples.push_back({frames[r].id, detail::pick_sources(std::move(cand), frames, cfg.max_sources)});
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class SynthKind { kPlane, kSphere, kTwoPlanes };

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "plane") return SynthKind::kPlane;
  if (s == "sphere") return SynthKind::kSphere;
  if (s == "two-planes") return SynthKind::kTwoPlanes;
  throw ConfigError("unknown synthetic scene kind '" + s + "' (expected plane, sphere or two-planes)");
}

inline std::string synth_kind_name(SynthKind k) {
  switch (k) {
    case SynthKind::kPlane: return "plane";
    case SynthKind::kSphere: return "sphere";
    case SynthKind::kTwoPlanes: return "two-planes";
  }
  return "";
}

struct SynthConfig {
  int width = 640;
  int height = 480;
  double focal = 500.0;
  double texture_cell = 0.16;  // value-noise lattice spacing, scene units
  Vec3 target{0.0, 0.0, 2.0};
  double plane_depth = 2.0;           // plane: z of the plane
  double near_depth = 1.5;            // two-planes: foreground half-plane x < 0
  double far_depth = 3.0;             // two-planes: background
  double sphere_radius = 0.5;         // sphere: centred on target
  std::optional<double> arc_step;     // radians between cameras; sphere default 2*pi/n
  std::optional<double> arc_radius;   // camera distance to target; plane default |target - origin|
  std::optional<double> elevation;    // radians; sphere default 0.35, otherwise 0
};

/// Analytic surface used for rendering and ground truth.
class SynthSurface {
 public:
  SynthSurface(SynthKind kind, const SynthConfig& cfg) : kind_(kind), cfg_(cfg) {}

  /// Ray parameter t of the first hit of origin + t*dir (t > 0), if any.
  std::optional<double> intersect(const Vec3& origin, const Vec3& dir) const {
    switch (kind_) {
      case SynthKind::kPlane: return hit_plane(origin, dir, cfg_.plane_depth);
      case SynthKind::kTwoPlanes: {
        const auto near = hit_plane(origin, dir, cfg_.near_depth);
        if (near && (origin + *near * dir).x() < 0.0) return near;
        return hit_plane(origin, dir, cfg_.far_depth);
      }
      case SynthKind::kSphere: {
        const Vec3 oc = origin - cfg_.target;
        const double a = dir.squaredNorm();
        const double b = oc.dot(dir);
        const double c = oc.squaredNorm() - cfg_.sphere_radius * cfg_.sphere_radius;
        const double disc = b * b - a * c;
        if (disc < 0.0) return std::nullopt;
        const double sq = std::sqrt(disc);
        const double t0 = (-b - sq) / a;
        if (t0 > 0.0) return t0;
        const double t1 = (-b + sq) / a;
        if (t1 > 0.0) return t1;
        return std::nullopt;
      }
    }
    return std::nullopt;
  }

 private:
  static std::optional<double> hit_plane(const Vec3& o, const Vec3& d, double z) {
    if (d.z() == 0.0) return std::nullopt;
    const double t = (z - o.z()) / d.z();
    if (!(t > 0.0)) return std::nullopt;
    return t;
  }

  SynthKind kind_;
  SynthConfig cfg_;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline double lattice_value(std::int64_t i, std::int64_t j, std::int64_t k, std::uint64_t seed) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(i));
  h = splitmix64(h ^ static_cast<std::uint64_t>(j));
  h = splitmix64(h ^ static_cast<std::uint64_t>(k));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Trilinear value noise with smoothstep fade, in [0,1].
inline double value_noise(const Vec3& p, std::uint64_t seed) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto i = static_cast<std::int64_t>(fx), j = static_cast<std::int64_t>(fy), k = static_cast<std::int64_t>(fz);
  auto fade = [](double t) { return t * t * (3.0 - 2.0 * t); };
  const double tx = fade(p.x() - fx), ty = fade(p.y() - fy), tz = fade(p.z() - fz);
  double acc = 0.0;
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    const double w = (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) * (dz ? tz : 1.0 - tz);
    acc += w * lattice_value(i + dx, j + dy, k + dz, seed);
  }
  return acc;
}

/// Three octaves of value noise (cell, cell/2, cell/4), contrast-stretched.
inline double synth_texture(const Vec3& p, double cell, std::uint64_t seed) {
  static constexpr double kGain[3] = {0.5, 0.3, 0.2};
  double acc = 0.0;
  double c = cell;
  for (int o = 0; o < 3; ++o, c *= 0.5) acc += kGain[o] * value_noise(p / c, seed + 0x9E37ull * o);
  return std::clamp(0.5 + 2.0 * (acc - 0.5), 0.0, 1.0);
}

inline RigidPose look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  Vec3 up(0.0, -1.0, 0.0);
  if (std::abs(z.dot(up)) > 0.999) up = Vec3(0.0, 0.0, 1.0);
  const Vec3 x = z.cross(up).normalized();
  const Vec3 y = z.cross(x);
  RigidPose p;
  p.rotation.col(0) = x;
  p.rotation.col(1) = y;
  p.rotation.col(2) = z;
  p.translation = eye;
  return p;
}

}  // namespace detail

/// Camera i sits at angle (i - c) * step around the target, c = (n-1)/2 for
/// arcs. With odd n the central plane camera is at the origin with identity
/// rotation.
inline std::vector<RigidPose> synth_camera_poses(SynthKind kind, int n_frames, const SynthConfig& cfg) {
  const bool ring = kind == SynthKind::kSphere;
  const double step = cfg.arc_step.value_or(ring ? 2.0 * std::numbers::pi / n_frames : 0.05);
  const double radius = cfg.arc_radius.value_or(ring ? 1.75 : cfg.target.norm());
  const double elev = cfg.elevation.value_or(ring ? 0.35 : 0.0);
  const double centre = ring ? 0.0 : 0.5 * (n_frames - 1);
  std::vector<RigidPose> poses;
  for (int i = 0; i < n_frames; ++i) {
    const double phi = (i - centre) * step;
    const Vec3 offset(-radius * std::cos(elev) * std::sin(phi), -radius * std::sin(elev),
                      -radius * std::cos(elev) * std::cos(phi));
    const Vec3 eye = cfg.target + offset;
    if (!ring && i - centre == 0.0 && elev == 0.0) {
      poses.push_back(RigidPose::from_translation(eye));
      continue;
    }
    poses.push_back(detail::look_at(eye, cfg.target));
  }
  return poses;
}

/// Renders an RGB view (quantized to 8 bits) and analytic depth along the
/// optical axis for one camera.
inline void render_synth_view(const SynthSurface& surface, const Intrinsics& k, const RigidPose& world_from_camera,
                              double texture_cell, std::uint64_t seed, ImageGrid& img, DepthMap& depth) {
  img = ImageGrid(k.width, k.height, 3);
  depth = DepthMap(k.width, k.height);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const Vec3 ray_cam = backproject_pixel(k, x, y, 1.0);
      const Vec3 dir = world_from_camera.rotation * ray_cam;
      const auto t = surface.intersect(world_from_camera.translation, dir);
      double base = 0.5;
      std::array<double, 3> tint{0.5, 0.5, 0.5};
      if (t) {
        const Vec3 p = world_from_camera.translation + *t * dir;
        base = detail::synth_texture(p, texture_cell, seed);
        for (int c = 0; c < 3; ++c) tint[c] = detail::synth_texture(p, texture_cell, seed + 1 + c);
        depth.set(x, y, *t);  // ray_cam has unit z, so t is the depth
      } else {
        depth.invalidate(x, y);
      }
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(0.8 * base + 0.2 * tint[c], 0.0, 1.0);
        img.data[(static_cast<std::size_t>(y) * k.width + x) * 3 + c] =
            static_cast<float>(std::round(v * 255.0) / 255.0);
      }
    }
  }
}

/// Hermetic scene with exact poses and analytic depth. Frame ids are
/// "f000", "f001", ...
inline Scene synth_scene(SynthKind kind, int n_frames, std::uint64_t seed, const SynthConfig& cfg = {}) {
  if (n_frames < 2) throw ArgumentError("synth_scene: at least two frames required");
  if (cfg.width < 1 || cfg.height < 1 || !(cfg.focal > 0.0)) throw ArgumentError("synth_scene: bad camera");
  const Intrinsics k{cfg.focal, cfg.focal, 0.5 * (cfg.width - 1), 0.5 * (cfg.height - 1), cfg.width, cfg.height};
  const SynthSurface surface(kind, cfg);
  const std::vector<RigidPose> poses = synth_camera_poses(kind, n_frames, cfg);
  Scene s;
  s.manifest.units = "synthetic " + synth_kind_name(kind) + ", scene units";
  for (int i = 0; i < n_frames; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "f%03d", i);
    ImageGrid img;
    DepthMap depth;
    render_synth_view(surface, k, poses[i], cfg.texture_cell, seed, img, depth);
    FrameEntry e;
    e.id = id;
    e.intrinsics = k;
    e.world_from_camera = poses[i];
    s.manifest.frames.push_back(e);
    s.frames.emplace_back(id, k, poses[i], std::move(img), std::move(depth));
  }
  return s;
}

/// Largest power-of-ten scale (at most 1000) that keeps every depth below
/// the 16-bit limit.
inline double choose_depth_scale(const Scene& s) {
  double max_depth = 0.0;
  for (const CameraFrame& f : s.frames)
    if (f.gt_depth)
      for (std::size_t i = 0; i < f.gt_depth->size(); ++i)
        if (f.gt_depth->valid[i]) max_depth = std::max(max_depth, f.gt_depth->depth[i]);
  double scale = 1000.0;
  while (scale > 1e-6 && max_depth * scale > 65535.0) scale /= 10.0;
  return scale;
}

/// Writes images, 16-bit ground-truth depth and scene.json into `dir`.
/// Fills in the manifest paths and returns the manifest path.
inline std::string write_scene(Scene& s, const std::string& dir) {
  fs::create_directories(dir);
  const double scale = choose_depth_scale(s);
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    FrameEntry& e = s.manifest.frames[i];
    const CameraFrame& f = s.frames[i];
    e.image = f.id + ".png";
    save_image_png((fs::path(dir) / e.image).string(), f.image);
    if (f.gt_depth) {
      e.gt_depth = f.id + "_depth.png";
      e.depth_scale = scale;
      save_depth_png((fs::path(dir) / *e.gt_depth).string(), *f.gt_depth, scale);
    }
  }
  const std::string path = (fs::path(dir) / "scene.json").string();
  detail::write_json_file(path, manifest_to_json(s.manifest));
  return path;
}

/// UV sphere for mesh evaluation against the analytic sphere.
inline TriangleMesh uv_sphere(const Vec3& centre, double radius, int rings = 64, int segments = 128) {
  if (rings < 2 || segments < 3) throw ArgumentError("uv_sphere: need rings >= 2 and segments >= 3");
  TriangleMesh m;
  m.vertices.push_back(centre + Vec3(0, 0, radius));
  for (int r = 1; r < rings; ++r) {
    const double th = std::numbers::pi * r / rings;
    for (int s = 0; s < segments; ++s) {
      const double ph = 2.0 * std::numbers::pi * s / segments;
      m.vertices.push_back(centre + radius * Vec3(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph),
                                                  std::cos(th)));
    }
  }
  m.vertices.push_back(centre - Vec3(0, 0, radius));
  const int south = static_cast<int>(m.vertices.size()) - 1;
  auto at = [segments](int r, int s) { return 1 + (r - 1) * segments + (s % segments); };
  for (int s = 0; s < segments; ++s) m.triangles.push_back({0, at(1, s), at(1, s + 1)});
  for (int r = 1; r + 1 < rings; ++r)
    for (int s = 0; s < segments; ++s) {
      m.triangles.push_back({at(r, s), at(r + 1, s), at(r + 1, s + 1)});
      m.triangles.push_back({at(r, s), at(r + 1, s + 1), at(r, s + 1)});
    }
  for (int s = 0; s < segments; ++s) m.triangles.push_back({south, at(rings - 1, s + 1), at(rings - 1, s)});
  return m;
}

// ---------------------------------------------------------------------------
// Configuration and orchestration

struct FusionSettings {
  double voxel_size = 0.04;
  double max_depth = 3.5;
  std::optional<double> truncation;
  double weight_cap = 128.0;
};

struct PipelineConfig {
  int bins = 64;
  int passes = 2;
  double margin = 0.05;
  std::optional<double> temperature;
  ScorerMode scorer = ScorerMode::kDotOnly;
  std::optional<std::string> mlp_weights;  // relative to the config file
  double empty_score = 0.0;
  RangeHeuristicConfig range;
  int patch_radius = 3;
  int stride = 4;
  FusionSettings fusion;
  std::uint64_t seed = 0;
  bool write_png = false;
  double png_depth_scale = 1000.0;

  void validate() const {
    if (bins < 2) throw ConfigError("config: bins must be >= 2");
    if (passes < 1) throw ConfigError("config: passes must be >= 1");
    if (!(margin >= 0.0)) throw ConfigError("config: margin must be >= 0");
    if (temperature && !(*temperature > 0.0)) throw ConfigError("config: temperature must be positive");
    if (scorer == ScorerMode::kMlp && !mlp_weights) throw ConfigError("config: scorer \"mlp\" requires mlp_weights");
    if (patch_radius < 1) throw ConfigError("config: patch_radius must be >= 1");
    if (stride < 1) throw ConfigError("config: stride must be >= 1");
    if (!(fusion.voxel_size > 0.0)) throw ConfigError("config: fusion.voxel must be positive");
    if (!(fusion.max_depth > 0.0)) throw ConfigError("config: fusion.max_depth must be positive");
    if (!(png_depth_scale > 0.0)) throw ConfigError("config: png_depth_scale must be positive");
  }

  CascadeConfig cascade() const {
    CascadeConfig c;
    c.bins = bins;
    c.passes = passes;
    c.margin_frac = margin;
    c.temperature = temperature;
    c.range = range;
    return c;
  }

  TsdfConfig tsdf() const {
    TsdfConfig t;
    t.voxel_size = fusion.voxel_size;
    t.truncation = fusion.truncation;
    t.max_fuse_depth = fusion.max_depth;
    t.weight_cap = static_cast<float>(fusion.weight_cap);
    return t;
  }
};

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  using detail::json_get;
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  detail::reject_unknown_keys(j,
                              {"bins", "passes", "margin", "temperature", "scorer", "mlp_weights", "empty_score",
                               "range", "features", "fusion", "seed", "write_png", "png_depth_scale"},
                              "config");
  PipelineConfig c;
  if (j.contains("bins")) c.bins = json_get<int>(j["bins"], "config.bins");
  if (j.contains("passes")) c.passes = json_get<int>(j["passes"], "config.passes");
  if (j.contains("margin")) c.margin = json_get<double>(j["margin"], "config.margin");
  if (j.contains("temperature") && !j["temperature"].is_null())
    c.temperature = json_get<double>(j["temperature"], "config.temperature");
  if (j.contains("scorer")) {
    const auto s = json_get<std::string>(j["scorer"], "config.scorer");
    if (s == "dot")
      c.scorer = ScorerMode::kDotOnly;
    else if (s == "mlp")
      c.scorer = ScorerMode::kMlp;
    else
      throw ConfigError("config.scorer: expected \"dot\" or \"mlp\", got \"" + s + "\"");
  }
  if (j.contains("mlp_weights") && !j["mlp_weights"].is_null())
    c.mlp_weights = json_get<std::string>(j["mlp_weights"], "config.mlp_weights");
  if (j.contains("empty_score")) c.empty_score = json_get<double>(j["empty_score"], "config.empty_score");
  if (j.contains("range")) {
    const auto& r = j["range"];
    detail::reject_unknown_keys(
        r, {"max_disparity_frac", "min_disparity_px", "absolute_min", "absolute_max", "fallback", "zero_baseline_eps"},
        "config.range");
    if (r.contains("max_disparity_frac"))
      c.range.max_disparity_frac = json_get<double>(r["max_disparity_frac"], "config.range.max_disparity_frac");
    if (r.contains("min_disparity_px"))
      c.range.min_disparity_px = json_get<double>(r["min_disparity_px"], "config.range.min_disparity_px");
    if (r.contains("absolute_min")) c.range.absolute_min = json_get<double>(r["absolute_min"], "config.range");
    if (r.contains("absolute_max")) c.range.absolute_max = json_get<double>(r["absolute_max"], "config.range");
    if (r.contains("zero_baseline_eps"))
      c.range.zero_baseline_eps = json_get<double>(r["zero_baseline_eps"], "config.range.zero_baseline_eps");
    if (r.contains("fallback")) {
      const auto fb = json_get<std::vector<double>>(r["fallback"], "config.range.fallback");
      if (fb.size() != 2) throw ConfigError("config.range.fallback: expected [d_min, d_max]");
      c.range.fallback = {fb[0], fb[1]};
    }
  }
  if (j.contains("features")) {
    const auto& f = j["features"];
    detail::reject_unknown_keys(f, {"patch_radius", "stride"}, "config.features");
    if (f.contains("patch_radius")) c.patch_radius = json_get<int>(f["patch_radius"], "config.features.patch_radius");
    if (f.contains("stride")) c.stride = json_get<int>(f["stride"], "config.features.stride");
  }
  if (j.contains("fusion")) {
    const auto& f = j["fusion"];
    detail::reject_unknown_keys(f, {"voxel", "max_depth", "truncation", "weight_cap"}, "config.fusion");
    if (f.contains("voxel")) c.fusion.voxel_size = json_get<double>(f["voxel"], "config.fusion.voxel");
    if (f.contains("max_depth")) c.fusion.max_depth = json_get<double>(f["max_depth"], "config.fusion.max_depth");
    if (f.contains("truncation") && !f["truncation"].is_null())
      c.fusion.truncation = json_get<double>(f["truncation"], "config.fusion.truncation");
    if (f.contains("weight_cap")) c.fusion.weight_cap = json_get<double>(f["weight_cap"], "config.fusion.weight_cap");
  }
  if (j.contains("seed")) c.seed = json_get<std::uint64_t>(j["seed"], "config.seed");
  if (j.contains("write_png")) c.write_png = json_get<bool>(j["write_png"], "config.write_png");
  if (j.contains("png_depth_scale"))
    c.png_depth_scale = json_get<double>(j["png_depth_scale"], "config.png_depth_scale");
  c.validate();
  return c;
}

/// Relative mlp_weights paths are resolved against the config directory.
inline PipelineConfig load_pipeline_config(const std::string& path) {
  PipelineConfig c = pipeline_config_from_json(detail::read_json_file(path, "config file"));
  if (c.mlp_weights && fs::path(*c.mlp_weights).is_relative())
    c.mlp_weights = (fs::path(path).parent_path() / *c.mlp_weights).string();
  return c;
}

inline ScorerConfig make_scorer(const PipelineConfig& cfg) {
  ScorerConfig s;
  s.mode = cfg.scorer;
  s.empty_score = cfg.empty_score;
  if (cfg.scorer == ScorerMode::kMlp) s.mlp = load_mlp_weights(*cfg.mlp_weights);
  return s;
}

/// Ground truth point-sampled on a feature grid: grid pixel (u,v) takes the
/// value at image pixel (stride*u, stride*v).
inline DepthMap sample_depth_grid(const DepthMap& full, int stride) {
  if (stride < 1) throw ArgumentError("sample_depth_grid: stride must be >= 1");
  DepthMap out((full.width + stride - 1) / stride, (full.height + stride - 1) / stride, stride);
  for (int v = 0; v < out.height; ++v)
    for (int u = 0; u < out.width; ++u) {
      if (full.is_valid(u * stride, v * stride))
        out.set(u, v, full.at(u * stride, v * stride));
      else
        out.invalidate(u, v);
    }
  return out;
}

/// Recovers the stride s with ceil(W/s) = w and ceil(H/s) = h.
inline int infer_grid_stride(const Intrinsics& k, int w, int h) {
  for (int s = 1; s <= std::max(k.width, k.height); ++s)
    if ((k.width + s - 1) / s == w && (k.height + s - 1) / s == h) return s;
  throw DataError("depth grid " + std::to_string(w) + "x" + std::to_string(h) + " does not divide image " +
                  std::to_string(k.width) + "x" + std::to_string(k.height));
}

struct TupleOutcome {
  std::string reference;
  bool ok = false;
  std::string error;
  std::optional<CascadeResult> result;
};

struct DepthRunResult {
  std::vector<TupleOutcome> outcomes;
  std::optional<DepthReport> report;  // when any successful reference has ground truth

  std::size_t failures() const {
    return static_cast<std::size_t>(
        std::count_if(outcomes.begin(), outcomes.end(), [](const TupleOutcome& o) { return !o.ok; }));
  }
};

/// Runs the cascade for every tuple. A failing tuple records its error and
/// the batch continues. With `out_dir`, writes <reference>.mvsd (and
/// optionally <reference>_depth.png) plus report.json.
inline DepthRunResult run_depth(const Scene& scene, std::span<const TupleSpec> tuples, const PipelineConfig& cfg,
                                const std::optional<std::string>& out_dir = std::nullopt) {
  cfg.validate();
  const ScorerConfig scorer = make_scorer(cfg);
  const CascadeConfig cascade = cfg.cascade();
  if (out_dir) fs::create_directories(*out_dir);

  std::map<std::string, FeatureMap> features;
  auto features_of = [&](const CameraFrame& f) -> const FeatureMap& {
    auto it = features.find(f.id);
    if (it == features.end())
      it = features.emplace(f.id, extract_census_features(f.image, cfg.patch_radius, cfg.stride)).first;
    return it->second;
  };

  DepthRunResult run;
  for (const TupleSpec& t : tuples) {
    TupleOutcome o;
    o.reference = t.reference;
    try {
      validate_tuple(t, scene.manifest);
      const CameraFrame& ref = *scene.find(t.reference);
      std::vector<CameraFrame> srcs;
      std::vector<FeatureMap> fsrc;
      for (const std::string& id : t.sources) {
        srcs.push_back(*scene.find(id));
        fsrc.push_back(features_of(srcs.back()));
      }
      o.result = cascaded_depth(ref, srcs, features_of(ref), fsrc, scorer, cascade);
      if (out_dir) {
        save_depth_mvsd((fs::path(*out_dir) / (t.reference + ".mvsd")).string(), o.result->depth);
        if (cfg.write_png)
          save_depth_png((fs::path(*out_dir) / (t.reference + "_depth.png")).string(), o.result->depth,
                         cfg.png_depth_scale);
      }
      o.ok = true;
    } catch (const std::exception& e) {
      o.error = e.what();
    }
    run.outcomes.push_back(std::move(o));
  }

  std::vector<DepthMap> gts;
  std::vector<std::pair<std::string, const DepthMap*>> preds;
  gts.reserve(run.outcomes.size());
  for (const TupleOutcome& o : run.outcomes) {
    if (!o.ok) continue;
    const CameraFrame& ref = *scene.find(o.reference);
    if (!ref.gt_depth) continue;
    gts.push_back(sample_depth_grid(*ref.gt_depth, o.result->depth.scale));
    preds.emplace_back(o.reference, &o.result->depth);
  }
  if (!preds.empty()) {
    std::vector<DepthPair> pairs;
    for (std::size_t i = 0; i < preds.size(); ++i) pairs.push_back({preds[i].first, preds[i].second, &gts[i]});
    run.report = depth_report(pairs);
  }

  if (out_dir) {
    nlohmann::json j;
    j["tuples"] = run.outcomes.size();
    j["failures"] = nlohmann::json::array();
    for (const TupleOutcome& o : run.outcomes)
      if (!o.ok) j["failures"].push_back({{"reference", o.reference}, {"error", o.error}});
    if (run.report) j["depth"] = depth_report_to_json(*run.report);
    detail::write_json_file((fs::path(*out_dir) / "report.json").string(), j);
  }
  return run;
}

/// Fuses, in manifest order, every frame that has <id>.mvsd in `depth_dir`.
/// Returns the number of fused maps.
inline std::size_t fuse_depth_dir(TsdfVolume& vol, const Scene& scene, const std::string& depth_dir) {
  std::size_t fused = 0;
  for (const CameraFrame& f : scene.frames) {
    const fs::path p = fs::path(depth_dir) / (f.id + ".mvsd");
    if (!fs::exists(p)) continue;
    DepthMap d = load_depth_mvsd(p.string());
    d.scale = infer_grid_stride(f.intrinsics, d.width, d.height);
    integrate_depth_map(vol, f, d);
    ++fused;
  }
  return fused;
}

/// Fuses the ground-truth depth of every frame that has one.
inline std::size_t fuse_ground_truth(TsdfVolume& vol, const Scene& scene) {
  std::size_t fused = 0;
  for (const CameraFrame& f : scene.frames) {
    if (!f.gt_depth) continue;
    integrate_depth_map(vol, f, *f.gt_depth);
    ++fused;
  }
  return fused;
}

/// Pairs each <id>.mvsd in `pred_dir` with the frame's ground truth on the
/// prediction grid.
inline DepthReport evaluate_depth_dir(const Scene& scene, const std::string& pred_dir) {
  std::vector<std::string> names;
  std::vector<DepthMap> preds, gts;
  for (const CameraFrame& f : scene.frames) {
    const fs::path p = fs::path(pred_dir) / (f.id + ".mvsd");
    if (!f.gt_depth || !fs::exists(p)) continue;
    DepthMap d = load_depth_mvsd(p.string());
    const int stride = infer_grid_stride(f.intrinsics, d.width, d.height);
    d.scale = stride;
    gts.push_back(sample_depth_grid(*f.gt_depth, stride));
    preds.push_back(std::move(d));
    names.push_back(f.id);
  }
  if (preds.empty()) throw DataError("no predictions with ground truth found in '" + pred_dir + "'");
  std::vector<DepthPair> pairs;
  for (std::size_t i = 0; i < preds.size(); ++i) pairs.push_back({names[i], &preds[i], &gts[i]});
  return depth_report(pairs);
}

}  // namespace mvsa
