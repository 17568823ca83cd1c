#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvsa/errors.hpp"
#include "mvsa/features.hpp"
#include "mvsa/geometry.hpp"

namespace mvsa {

/// Strictly increasing positive depth hypotheses.
struct DepthBins {
  std::vector<double> values;

  DepthBins() = default;
  explicit DepthBins(std::vector<double> v) : values(std::move(v)) { validate(); }

  void validate() const {
    if (values.size() < 2) throw ArgumentError("DepthBins: at least two bins required");
    if (!(values.front() > 0.0)) throw ArgumentError("DepthBins: depths must be positive");
    for (std::size_t i = 1; i < values.size(); ++i)
      if (!(values[i] > values[i - 1])) throw ArgumentError("DepthBins: values must be strictly increasing");
  }

  int count() const { return static_cast<int>(values.size()); }
  double front() const { return values.front(); }
  double back() const { return values.back(); }
  double operator[](std::size_t i) const { return values[i]; }
  RangeEstimate range() const { return {values.front(), values.back()}; }
};

/// K depths spaced uniformly in log depth; endpoints are exact.
inline DepthBins make_log_bins(const RangeEstimate& range, int count) {
  if (count < 2) throw ArgumentError("make_log_bins: K must be >= 2");
  if (!(range.d_min > 0.0) || !(range.d_min < range.d_max))
    throw ArgumentError("make_log_bins: requires 0 < d_min < d_max");
  const double lo = std::log(range.d_min);
  const double step = (std::log(range.d_max) - lo) / (count - 1);
  std::vector<double> v(count);
  for (int j = 0; j < count; ++j) v[j] = std::exp(lo + j * step);
  v.front() = range.d_min;
  v.back() = range.d_max;
  return DepthBins(std::move(v));
}

/// Geometric side information for one (source, bin, pixel) cell.
struct MetadataRecord {
  static constexpr int kMlpInputSize = 12;

  double dot = 0.0;
  Vec3 ray_ref = Vec3::Zero();
  Vec3 ray_src = Vec3::Zero();
  double depth_ref_norm = 0.0;
  double depth_src_norm = 0.0;
  double ray_angle = 0.0;
  double pose_dist_norm = 0.0;
  bool valid = false;

  /// dot, ray_ref(3), ray_src(3), depth_ref_norm, depth_src_norm, ray_angle,
  /// pose_dist_norm, valid.
  std::array<double, kMlpInputSize> mlp_input() const {
    return {dot,
            ray_ref.x(),
            ray_ref.y(),
            ray_ref.z(),
            ray_src.x(),
            ray_src.y(),
            ray_src.z(),
            depth_ref_norm,
            depth_src_norm,
            ray_angle,
            pose_dist_norm,
            valid ? 1.0 : 0.0};
  }
};

/// Position of `depth` in [d_min, d_max] on a log scale, clamped to [0,1].
inline double log_normalized_depth(double depth, double d_min, double d_max) {
  const double t = (std::log(depth) - std::log(d_min)) / (std::log(d_max) - std::log(d_min));
  return std::clamp(t, 0.0, 1.0);
}

/// p_i / max_j p_j; all zeros when every distance is zero.
inline std::vector<double> normalized_pose_distances(std::span<const double> pose_dists) {
  if (pose_dists.empty()) throw ArgumentError("normalized_pose_distances: at least one source required");
  const double mx = *std::max_element(pose_dists.begin(), pose_dists.end());
  std::vector<double> out(pose_dists.size(), 0.0);
  if (mx > 0.0)
    for (std::size_t i = 0; i < pose_dists.size(); ++i) out[i] = pose_dists[i] / mx;
  return out;
}

/// Writes pose_dist_norm into every valid record of source i.
inline void normalize_metadata(std::vector<std::vector<MetadataRecord>>& per_source,
                               std::span<const double> pose_dists) {
  if (per_source.size() != pose_dists.size())
    throw ArgumentError("normalize_metadata: one pose distance per source required");
  const std::vector<double> norm = normalized_pose_distances(pose_dists);
  for (std::size_t i = 0; i < per_source.size(); ++i)
    for (MetadataRecord& r : per_source[i])
      if (r.valid) r.pose_dist_norm = norm[i];
}

/// Pose distances with translations divided by the largest source
/// baseline, so the result does not depend on the scene scale.
inline std::vector<double> scale_free_pose_distances(const CameraFrame& ref, std::span<const CameraFrame> sources) {
  std::vector<RigidPose> rel;
  rel.reserve(sources.size());
  double max_baseline = 0.0;
  for (const CameraFrame& s : sources) {
    rel.push_back(relative_pose(ref.world_from_camera, s.world_from_camera));
    max_baseline = std::max(max_baseline, rel.back().translation.norm());
  }
  std::vector<double> out;
  out.reserve(rel.size());
  for (RigidPose r : rel) {
    if (max_baseline > 0.0) r.translation /= max_baseline;
    out.push_back(pose_distance(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation MLP

enum class Activation { kRelu, kNone };

struct MlpLayer {
  int in_dim = 0;
  int out_dim = 0;
  std::vector<double> weights;  // out_dim rows x in_dim columns, row-major
  std::vector<double> bias;
  Activation activation = Activation::kNone;
};

struct MlpWeights {
  std::vector<MlpLayer> layers;

  /// Throws ConfigError on inconsistent shapes. `required_out` = 0 skips the
  /// head check.
  void validate(int required_out = 2) const {
    if (layers.empty()) throw ConfigError("MLP: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const MlpLayer& l = layers[i];
      const std::string where = "MLP layer " + std::to_string(i);
      if (l.in_dim < 1 || l.out_dim < 1) throw ConfigError(where + ": dimensions must be positive");
      if (l.weights.size() != static_cast<std::size_t>(l.in_dim) * l.out_dim)
        throw ConfigError(where + ": expected " + std::to_string(l.in_dim * l.out_dim) + " weights, got " +
                          std::to_string(l.weights.size()));
      if (l.bias.size() != static_cast<std::size_t>(l.out_dim))
        throw ConfigError(where + ": expected " + std::to_string(l.out_dim) + " biases, got " +
                          std::to_string(l.bias.size()));
      if (i > 0 && layers[i - 1].out_dim != l.in_dim)
        throw ConfigError(where + ": in_dim " + std::to_string(l.in_dim) + " does not chain with previous out_dim " +
                          std::to_string(layers[i - 1].out_dim));
      for (double w : l.weights)
        if (!std::isfinite(w)) throw ConfigError(where + ": non-finite weight");
      for (double b : l.bias)
        if (!std::isfinite(b)) throw ConfigError(where + ": non-finite bias");
    }
    if (required_out > 0 && layers.back().out_dim != required_out)
      throw ConfigError("MLP: final layer must output " + std::to_string(required_out) + " values (score, weight)");
  }

  int input_size() const { return layers.empty() ? 0 : layers.front().in_dim; }
};

inline std::vector<double> mlp_forward(const MlpWeights& w, std::span<const double> x) {
  if (w.layers.empty()) throw ArgumentError("mlp_forward: empty network");
  if (x.size() != static_cast<std::size_t>(w.layers.front().in_dim))
    throw ArgumentError("mlp_forward: input has " + std::to_string(x.size()) + " values, network expects " +
                        std::to_string(w.layers.front().in_dim));
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next;
  for (const MlpLayer& l : w.layers) {
    if (cur.size() != static_cast<std::size_t>(l.in_dim)) throw ArgumentError("mlp_forward: layer dimension mismatch");
    next.assign(l.out_dim, 0.0);
    for (int o = 0; o < l.out_dim; ++o) {
      double acc = l.bias[o];
      const double* row = l.weights.data() + static_cast<std::size_t>(o) * l.in_dim;
      for (int i = 0; i < l.in_dim; ++i) acc += row[i] * cur[i];
      next[o] = (l.activation == Activation::kRelu) ? std::max(0.0, acc) : acc;
    }
    cur.swap(next);
  }
  return cur;
}

inline MlpWeights mlp_from_json(const nlohmann::json& doc, int required_out = 2) {
  if (!doc.is_object() || !doc.contains("layers") || !doc["layers"].is_array())
    throw ConfigError("MLP JSON: expected an object with a \"layers\" array");
  MlpWeights w;
  for (const auto& jl : doc["layers"]) {
    MlpLayer l;
    try {
      l.in_dim = jl.at("in").get<int>();
      l.out_dim = jl.at("out").get<int>();
      l.weights = jl.at("w").get<std::vector<double>>();
      l.bias = jl.at("b").get<std::vector<double>>();
      const std::string act = jl.value("act", std::string("none"));
      if (act == "relu")
        l.activation = Activation::kRelu;
      else if (act == "none")
        l.activation = Activation::kNone;
      else
        throw ConfigError("MLP JSON: unknown activation \"" + act + "\"");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("MLP JSON: malformed layer: ") + e.what());
    }
    w.layers.push_back(std::move(l));
  }
  w.validate(required_out);
  return w;
}

inline nlohmann::json mlp_to_json(const MlpWeights& w) {
  nlohmann::json layers = nlohmann::json::array();
  for (const MlpLayer& l : w.layers)
    layers.push_back({{"in", l.in_dim},
                      {"out", l.out_dim},
                      {"w", l.weights},
                      {"b", l.bias},
                      {"act", l.activation == Activation::kRelu ? "relu" : "none"}});
  return {{"layers", layers}};
}

inline MlpWeights load_mlp_weights(const std::string& path, int required_out = 2) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open MLP weight file '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("MLP weight file '" + path + "': " + e.what());
  }
  return mlp_from_json(doc, required_out);
}

inline void save_mlp_weights(const std::string& path, const MlpWeights& w) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write MLP weight file '" + path + "'");
  out << mlp_to_json(w).dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// View aggregation

struct ScoreWeight {
  double score = 0.0;
  double weight = 0.0;
};

/// softmax over the weight logits, max-subtracted.
inline std::vector<double> softmax_weights(std::span<const ScoreWeight> views) {
  if (views.empty()) throw ArgumentError("softmax_weights: empty view list");
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& v : views) mx = std::max(mx, v.weight);
  std::vector<double> p(views.size());
  double z = 0.0;
  for (std::size_t i = 0; i < views.size(); ++i) z += (p[i] = std::exp(views[i].weight - mx));
  for (double& x : p) x /= z;
  return p;
}

/// Softmax-weighted mean of per-source scores.
inline double aggregate_views(std::span<const ScoreWeight> views) {
  if (views.empty()) throw ArgumentError("aggregate_views: at least one source required");
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& v : views) mx = std::max(mx, v.weight);
  double num = 0.0;
  double den = 0.0;
  for (const auto& v : views) {
    const double e = std::exp(v.weight - mx);
    num += e * v.score;
    den += e;
  }
  return num / den;
}

enum class ScorerMode { kDotOnly, kMlp };

struct ScorerConfig {
  ScorerMode mode = ScorerMode::kDotOnly;
  std::optional<MlpWeights> mlp;
  double empty_score = 0.0;
};

struct CostVolume {
  DepthBins bins;
  int width = 0;
  int height = 0;
  int scale = 1;                            // feature-grid stride
  std::vector<double> scores;               // (k, v, u)
  std::vector<std::uint16_t> coverage;      // valid sources per cell

  std::size_t index(int k, int v, int u) const {
    return (static_cast<std::size_t>(k) * height + v) * width + u;
  }
  double score(int k, int v, int u) const { return scores[index(k, v, u)]; }
  int cover(int k, int v, int u) const { return coverage[index(k, v, u)]; }
};

namespace detail {

/// Per-(reference, source) state shared by every cell of a sweep.
struct SweepContext {
  Intrinsics ref_k;
  Intrinsics src_k;
  RigidPose src_from_ref;
  Mat3 ref_rotation;  // world_from_camera rotation of the reference
  Vec3 src_center_in_ref;
  const FeatureMap* ref_features = nullptr;
  const FeatureMap* src_features = nullptr;
  std::vector<float> ref_interleaved;
  std::vector<float> src_interleaved;
};

inline Intrinsics grid_intrinsics(const Intrinsics& k, const FeatureMap& fm) {
  Intrinsics g = k.downsampled(fm.scale);
  g.width = fm.width;
  g.height = fm.height;
  return g;
}

inline SweepContext make_sweep_context(const CameraFrame& ref, const CameraFrame& src, const FeatureMap& f_ref,
                                       const FeatureMap& f_src, bool interleave) {
  if (f_ref.channels != f_src.channels) throw ArgumentError("feature maps differ in channel count");
  SweepContext c;
  c.ref_k = grid_intrinsics(ref.intrinsics, f_ref);
  c.src_k = grid_intrinsics(src.intrinsics, f_src);
  c.src_from_ref = relative_pose(ref.world_from_camera, src.world_from_camera);
  c.ref_rotation = ref.world_from_camera.rotation;
  c.src_center_in_ref = c.src_from_ref.inverse().translation;
  c.ref_features = &f_ref;
  c.src_features = &f_src;
  if (interleave) {
    c.ref_interleaved = f_ref.interleaved();
    c.src_interleaved = f_src.interleaved();
  }
  return c;
}

inline double sampled_dot(const SweepContext& c, int u, int v, double x, double y) {
  const FeatureMap& fs = *c.src_features;
  const int ch = fs.channels;
  BilinearTaps t{};
  bilinear_taps(fs.width, fs.height, x, y, t);
  const float w[4] = {(1 - t.wx) * (1 - t.wy), t.wx * (1 - t.wy), (1 - t.wx) * t.wy, t.wx * t.wy};
  const std::size_t idx[4] = {static_cast<std::size_t>(t.y0) * fs.width + t.x0,
                              static_cast<std::size_t>(t.y0) * fs.width + t.x1,
                              static_cast<std::size_t>(t.y1) * fs.width + t.x0,
                              static_cast<std::size_t>(t.y1) * fs.width + t.x1};
  const float* ref = c.ref_interleaved.data() + (static_cast<std::size_t>(v) * c.ref_features->width + u) * ch;
  double acc = 0.0;
  for (int q = 0; q < 4; ++q) {
    if (w[q] == 0.0f) continue;
    const float* src = c.src_interleaved.data() + idx[q] * ch;
    double d = 0.0;
    for (int i = 0; i < ch; ++i) d += static_cast<double>(ref[i]) * src[i];
    acc += static_cast<double>(w[q]) * d;
  }
  return acc;
}

/// Metadata without the pose term; the dot product is delegated to `dot_fn`.
template <typename DotFn>
MetadataRecord metadata_at(const SweepContext& c, const DepthBins& bins, int u, int v, int k, DotFn&& dot_fn) {
  MetadataRecord r;
  const double d = bins[k];
  const Vec3 p_ref = backproject_pixel(c.ref_k, u, v, d);
  const Vec3 p_src = c.src_from_ref.apply(p_ref);
  ProjectedPoint q = project_point(c.src_k, p_src);
  if (!q.valid || !snap_into_image(c.src_k, q)) return r;

  r.valid = true;
  r.dot = dot_fn(q.u, q.v);
  // Rays in world coordinates: both origins to P, expressed via the reference
  // camera frame and rotated once.
  const Vec3 ray_ref_cam = p_ref.normalized();
  const Vec3 ray_src_cam = (p_ref - c.src_center_in_ref).normalized();
  r.ray_ref = c.ref_rotation * ray_ref_cam;
  r.ray_src = c.ref_rotation * ray_src_cam;
  r.depth_ref_norm = log_normalized_depth(d, bins.front(), bins.back());
  r.depth_src_norm = log_normalized_depth(q.z, bins.front(), bins.back());
  r.ray_angle = std::acos(std::clamp(ray_ref_cam.dot(ray_src_cam), -1.0, 1.0));
  return r;
}

}  // namespace detail

/// Metadata for reference grid pixel (u,v) at bin k against one source.
/// pose_dist_norm is left at 0; normalize_metadata fills it.
inline MetadataRecord compute_metadata(const CameraFrame& ref, const CameraFrame& src, const FeatureMap& f_ref,
                                       const FeatureMap& f_src, const DepthBins& bins, int u, int v, int k) {
  if (u < 0 || v < 0 || u >= f_ref.width || v >= f_ref.height)
    throw ArgumentError("compute_metadata: pixel outside the reference feature grid");
  if (k < 0 || k >= bins.count()) throw ArgumentError("compute_metadata: bin index out of range");
  const detail::SweepContext c = detail::make_sweep_context(ref, src, f_ref, f_src, false);
  const std::vector<float> ref_vec = f_ref.vector_at(u, v);
  return detail::metadata_at(c, bins, u, v, k, [&](double x, double y) {
    return dot_affinity(ref_vec, sample_bilinear(f_src, x, y).values);
  });
}

/// Plane-sweep cost volume over the reference feature grid. Sources whose
/// correspondence falls outside their grid or behind the camera are left out
/// of the per-cell softmax; cells with no valid source get empty_score.
inline CostVolume build_cost_volume(const CameraFrame& ref, std::span<const CameraFrame> sources,
                                    const FeatureMap& f_ref, std::span<const FeatureMap> f_sources,
                                    const DepthBins& bins, const ScorerConfig& scorer) {
  if (sources.empty()) throw ArgumentError("build_cost_volume: at least one source required");
  if (sources.size() != f_sources.size())
    throw ArgumentError("build_cost_volume: one feature map per source required");
  if (sources.size() > std::numeric_limits<std::uint16_t>::max())
    throw ArgumentError("build_cost_volume: too many sources");
  for (const FeatureMap& f : f_sources)
    if (f.scale != f_ref.scale) throw ArgumentError("build_cost_volume: feature maps must share one scale");
  bins.validate();

  const bool use_mlp = scorer.mode == ScorerMode::kMlp;
  if (use_mlp) {
    if (!scorer.mlp) throw ConfigError("build_cost_volume: mlp scorer selected but no weights loaded");
    scorer.mlp->validate(2);
    if (scorer.mlp->input_size() != MetadataRecord::kMlpInputSize)
      throw ConfigError("build_cost_volume: MLP expects " + std::to_string(scorer.mlp->input_size()) +
                        " inputs, metadata layout has " + std::to_string(MetadataRecord::kMlpInputSize));
  }

  const std::size_t n = sources.size();
  std::vector<detail::SweepContext> ctx;
  ctx.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    ctx.push_back(detail::make_sweep_context(ref, sources[i], f_ref, f_sources[i], true));
  const std::vector<double> pose_norm = normalized_pose_distances(scale_free_pose_distances(ref, sources));

  CostVolume cv;
  cv.bins = bins;
  cv.width = f_ref.width;
  cv.height = f_ref.height;
  cv.scale = f_ref.scale;
  const int kcount = bins.count();
  cv.scores.assign(static_cast<std::size_t>(kcount) * cv.width * cv.height, scorer.empty_score);
  cv.coverage.assign(cv.scores.size(), 0);

  const int rows = kcount * cv.height;
#pragma omp parallel for schedule(dynamic, 4)
  for (int row = 0; row < rows; ++row) {
    const int k = row / cv.height;
    const int v = row % cv.height;
    std::vector<ScoreWeight> views;
    views.reserve(n);
    for (int u = 0; u < cv.width; ++u) {
      views.clear();
      for (std::size_t i = 0; i < n; ++i) {
        const detail::SweepContext& c = ctx[i];
        MetadataRecord r = detail::metadata_at(c, bins, u, v, k,
                                               [&](double x, double y) { return detail::sampled_dot(c, u, v, x, y); });
        if (!r.valid) continue;
        r.pose_dist_norm = pose_norm[i];
        if (use_mlp) {
          const auto in = r.mlp_input();
          const std::vector<double> out = mlp_forward(*scorer.mlp, in);
          views.push_back({out[0], out[1]});
        } else {
          views.push_back({r.dot, r.dot});
        }
      }
      const std::size_t idx = cv.index(k, v, u);
      cv.coverage[idx] = static_cast<std::uint16_t>(views.size());
      if (!views.empty()) cv.scores[idx] = aggregate_views(views);
    }
  }
  return cv;
}

}  // namespace mvsa
