#pragma once

#include <algorithm>
#include <array>
#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mvsa/detail/mc_tables.hpp"
#include "mvsa/errors.hpp"
#include "mvsa/geometry.hpp"
#include "mvsa/image.hpp"

namespace mvsa {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;

  bool empty() const { return vertices.empty(); }

  void validate() const {
    for (const Vec3& v : vertices)
      if (!v.allFinite()) throw ArgumentError("TriangleMesh: non-finite vertex");
    const int n = static_cast<int>(vertices.size());
    for (const auto& t : triangles)
      for (int i : t)
        if (i < 0 || i >= n) throw ArgumentError("TriangleMesh: triangle index out of range");
  }
};

struct TsdfConfig {
  double voxel_size = 0.04;
  std::optional<double> truncation;  // default 3 voxels
  double max_fuse_depth = 3.5;
  float weight_cap = 128.0f;
};

/// Sparse TSDF grid of 16^3-voxel blocks keyed by block coordinates. Voxel
/// (i,j,k) is the sample point origin + voxel_size * (i,j,k).
class TsdfVolume {
 public:
  static constexpr int kBlockSide = 16;
  static constexpr int kBlockVoxels = kBlockSide * kBlockSide * kBlockSide;

  struct Voxel {
    float tsdf = 1.0f;
    float weight = 0.0f;
  };
  using Index3 = std::array<int, 3>;

  explicit TsdfVolume(const TsdfConfig& cfg = {}, const Vec3& origin = Vec3::Zero())
      : voxel_size_(cfg.voxel_size),
        truncation_(cfg.truncation.value_or(3.0 * cfg.voxel_size)),
        max_fuse_depth_(cfg.max_fuse_depth),
        weight_cap_(cfg.weight_cap),
        origin_(origin) {
    if (!(voxel_size_ > 0.0)) throw ArgumentError("TsdfVolume: voxel_size must be positive");
    if (!(truncation_ > 0.0)) throw ArgumentError("TsdfVolume: truncation must be positive");
  }

  double voxel_size() const { return voxel_size_; }
  double truncation() const { return truncation_; }
  double max_fuse_depth() const { return max_fuse_depth_; }
  float weight_cap() const { return weight_cap_; }
  const Vec3& origin() const { return origin_; }
  std::size_t block_count() const { return blocks_.size(); }

  Vec3 voxel_position(const Index3& v) const {
    return origin_ + voxel_size_ * Vec3(v[0], v[1], v[2]);
  }

  /// Nearest voxel index of a world point.
  Index3 voxel_of(const Vec3& p) const {
    const Vec3 q = (p - origin_) / voxel_size_;
    return {static_cast<int>(std::lround(q.x())), static_cast<int>(std::lround(q.y())),
            static_cast<int>(std::lround(q.z()))};
  }

  static Index3 block_of(const Index3& v) {
    return {floor_div(v[0]), floor_div(v[1]), floor_div(v[2])};
  }

  const Voxel* find(const Index3& v) const {
    const auto it = blocks_.find(block_of(v));
    if (it == blocks_.end()) return nullptr;
    return &it->second[local_index(v)];
  }

  Voxel& voxel(const Index3& v) { return allocate(block_of(v))[local_index(v)]; }

  void set_voxel(const Index3& v, float tsdf, float weight) {
    Voxel& vx = voxel(v);
    vx.tsdf = std::clamp(tsdf, -1.0f, 1.0f);
    vx.weight = std::max(0.0f, weight);
  }

  std::vector<Voxel>& allocate(const Index3& block) {
    auto it = blocks_.find(block);
    if (it == blocks_.end()) it = blocks_.emplace(block, std::vector<Voxel>(kBlockVoxels)).first;
    return it->second;
  }

  /// Block keys in lexicographic order.
  std::vector<Index3> sorted_blocks() const {
    std::vector<Index3> keys;
    keys.reserve(blocks_.size());
    for (const auto& kv : blocks_) keys.push_back(kv.first);
    std::sort(keys.begin(), keys.end());
    return keys;
  }

  const std::vector<Voxel>& block(const Index3& key) const { return blocks_.at(key); }
  std::vector<Voxel>& block(const Index3& key) { return blocks_.at(key); }

  static Index3 block_voxel(const Index3& block, int local) {
    const int x = local % kBlockSide;
    const int y = (local / kBlockSide) % kBlockSide;
    const int z = local / (kBlockSide * kBlockSide);
    return {block[0] * kBlockSide + x, block[1] * kBlockSide + y, block[2] * kBlockSide + z};
  }

  static int local_index(const Index3& v) {
    const int x = v[0] - floor_div(v[0]) * kBlockSide;
    const int y = v[1] - floor_div(v[1]) * kBlockSide;
    const int z = v[2] - floor_div(v[2]) * kBlockSide;
    return (z * kBlockSide + y) * kBlockSide + x;
  }

 private:
  static int floor_div(int a) { return a >= 0 ? a / kBlockSide : -((-a + kBlockSide - 1) / kBlockSide); }

  struct KeyHash {
    std::size_t operator()(const Index3& k) const noexcept {
      std::uint64_t h = static_cast<std::uint32_t>(k[0]);
      h = h * 73856093u ^ static_cast<std::uint32_t>(k[1]) * 19349663u;
      h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint32_t>(k[2]) * 83492791u;
      return static_cast<std::size_t>(h);
    }
  };

  double voxel_size_;
  double truncation_;
  double max_fuse_depth_;
  float weight_cap_;
  Vec3 origin_;
  std::unordered_map<Index3, std::vector<Voxel>, KeyHash> blocks_;
};

/// Projective TSDF update from one depth map. `k` must describe the depth
/// grid itself. Voxels whose projected depth is invalid, beyond
/// max_fuse_depth, or more than one truncation band in front of the voxel
/// are left untouched.
inline void integrate_depth_map(TsdfVolume& vol, const Intrinsics& k, const RigidPose& world_from_camera,
                                const DepthMap& depth) {
  if (depth.width != k.width || depth.height != k.height)
    throw ArgumentError("integrate_depth_map: depth size does not match intrinsics");
  const double trunc = vol.truncation();
  const double max_depth = vol.max_fuse_depth();
  const double step = 0.5 * vol.voxel_size();
  auto usable = [&](double d) { return d > 0.0 && d <= max_depth; };

  // Allocate every block touched by the truncation band along each ray.
  std::vector<TsdfVolume::Index3> touched;
  {
    std::unordered_set<std::uint64_t> seen;
    for (int y = 0; y < depth.height; ++y)
      for (int x = 0; x < depth.width; ++x) {
        if (!depth.is_valid(x, y) || !usable(depth.at(x, y))) continue;
        const double d = depth.at(x, y);
        const Vec3 dir = backproject_pixel(k, x, y, 1.0);
        for (double t = std::max(1e-6, d - trunc); t <= d + trunc + 1e-12; t += step) {
          const Vec3 p = world_from_camera.apply(dir * t);
          const auto b = TsdfVolume::block_of(vol.voxel_of(p));
          const std::uint64_t key = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(b[0]) & 0x1FFFFF) << 42) |
                                    (static_cast<std::uint64_t>(static_cast<std::uint32_t>(b[1]) & 0x1FFFFF) << 21) |
                                    (static_cast<std::uint64_t>(static_cast<std::uint32_t>(b[2]) & 0x1FFFFF));
          if (seen.insert(key).second) touched.push_back(b);
        }
      }
  }
  if (touched.empty()) return;
  std::sort(touched.begin(), touched.end());
  std::vector<std::vector<TsdfVolume::Voxel>*> blocks;
  blocks.reserve(touched.size());
  for (const auto& b : touched) blocks.push_back(&vol.allocate(b));

  const RigidPose camera_from_world = world_from_camera.inverse();
  const float cap = vol.weight_cap();
  const int nblocks = static_cast<int>(touched.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (int bi = 0; bi < nblocks; ++bi) {
    std::vector<TsdfVolume::Voxel>& vox = *blocks[bi];
    for (int li = 0; li < TsdfVolume::kBlockVoxels; ++li) {
      const Vec3 pc = camera_from_world.apply(vol.voxel_position(TsdfVolume::block_voxel(touched[bi], li)));
      const ProjectedPoint q = project_point(k, pc);
      if (!q.valid) continue;
      const long px = std::lround(q.u);
      const long py = std::lround(q.v);
      if (px < 0 || py < 0 || px >= depth.width || py >= depth.height) continue;
      if (!depth.is_valid(static_cast<int>(px), static_cast<int>(py))) continue;
      const double d = depth.at(static_cast<int>(px), static_cast<int>(py));
      if (!usable(d)) continue;
      const double sdf = d - q.z;
      if (sdf < -trunc) continue;
      const float value = static_cast<float>(std::min(1.0, sdf / trunc));
      TsdfVolume::Voxel& v = vox[li];
      v.tsdf = (v.tsdf * v.weight + value) / (v.weight + 1.0f);
      v.weight = std::min(v.weight + 1.0f, cap);
    }
  }
}

/// Integrates a depth map estimated for `frame`, rescaling the frame
/// intrinsics to the depth grid (grid pixel (u,v) = image pixel
/// (scale*u, scale*v)).
inline void integrate_depth_map(TsdfVolume& vol, const CameraFrame& frame, const DepthMap& depth) {
  Intrinsics k = frame.intrinsics;
  if (depth.width != k.width || depth.height != k.height) {
    k = k.downsampled(depth.scale);
    if (depth.width != k.width || depth.height != k.height)
      throw ArgumentError("integrate_depth_map: depth grid does not match frame '" + frame.id + "' at scale " +
                          std::to_string(depth.scale));
  }
  integrate_depth_map(vol, k, frame.world_from_camera, depth);
}

/// Marching cubes over cells whose eight corners all carry weight. Vertices
/// on shared edges are emitted once.
inline TriangleMesh extract_mesh(const TsdfVolume& vol) {
  using Index3 = TsdfVolume::Index3;
  static constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                        {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  static constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                       {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
  struct EdgeKey {
    Index3 lower;
    int axis;
    bool operator==(const EdgeKey& o) const { return lower == o.lower && axis == o.axis; }
  };
  struct EdgeHash {
    std::size_t operator()(const EdgeKey& e) const noexcept {
      std::uint64_t h = static_cast<std::uint32_t>(e.lower[0]) * 73856093ull;
      h ^= static_cast<std::uint32_t>(e.lower[1]) * 19349663ull;
      h ^= static_cast<std::uint32_t>(e.lower[2]) * 83492791ull;
      return static_cast<std::size_t>(h * 3 + e.axis);
    }
  };

  TriangleMesh mesh;
  std::unordered_map<EdgeKey, int, EdgeHash> edge_vertex;
  auto edge_vertex_id = [&](const Index3& a, float va, const Index3& b, float vb) {
    // Canonical direction lower -> upper so shared edges interpolate identically.
    int axis = 0;
    while (a[axis] == b[axis]) ++axis;
    const bool a_lower = a[axis] < b[axis];
    const Index3& lo = a_lower ? a : b;
    const Index3& hi = a_lower ? b : a;
    const double vlo = a_lower ? va : vb;
    const double vhi = a_lower ? vb : va;
    const EdgeKey key{lo, axis};
    const auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    const double t = vlo / (vlo - vhi);
    const Vec3 plo = vol.voxel_position(lo);
    const Vec3 phi = vol.voxel_position(hi);
    mesh.vertices.push_back(plo + t * (phi - plo));
    const int id = static_cast<int>(mesh.vertices.size()) - 1;
    edge_vertex.emplace(key, id);
    return id;
  };

  for (const Index3& bkey : vol.sorted_blocks()) {
    const auto& blk = vol.block(bkey);
    for (int li = 0; li < TsdfVolume::kBlockVoxels; ++li) {
      if (blk[li].weight <= 0.0f) continue;
      const Index3 base = TsdfVolume::block_voxel(bkey, li);
      Index3 corner[8];
      float val[8];
      bool complete = true;
      for (int c = 0; c < 8 && complete; ++c) {
        corner[c] = {base[0] + kCorner[c][0], base[1] + kCorner[c][1], base[2] + kCorner[c][2]};
        const TsdfVolume::Voxel* v = vol.find(corner[c]);
        if (!v || v->weight <= 0.0f) complete = false;
        else val[c] = v->tsdf;
      }
      if (!complete) continue;
      int cube = 0;
      for (int c = 0; c < 8; ++c)
        if (val[c] < 0.0f) cube |= 1 << c;
      const int edges = detail::kMcEdgeTable[cube];
      if (edges == 0) continue;
      int ids[12];
      for (int e = 0; e < 12; ++e)
        if (edges & (1 << e)) {
          const int a = kEdge[e][0], b = kEdge[e][1];
          ids[e] = edge_vertex_id(corner[a], val[a], corner[b], val[b]);
        }
      for (const int* t = detail::kMcTriTable[cube]; *t != -1; t += 3)
        mesh.triangles.push_back({ids[t[0]], ids[t[1]], ids[t[2]]});
    }
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// Mesh evaluation

namespace detail {

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace detail

/// Area-weighted triangle choice, then uniform barycentric sampling.
inline std::vector<Vec3> sample_surface_points(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (mesh.triangles.empty()) throw ArgumentError("sample_surface_points: mesh has no triangles");
  if (n < 1) throw ArgumentError("sample_surface_points: n must be >= 1");
  mesh.validate();
  std::vector<double> cumulative(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto& t = mesh.triangles[i];
    const Vec3 &a = mesh.vertices[t[0]], &b = mesh.vertices[t[1]], &c = mesh.vertices[t[2]];
    total += 0.5 * (b - a).cross(c - a).norm();
    cumulative[i] = total;
  }
  if (!(total > 0.0)) throw ArgumentError("sample_surface_points: mesh has zero area");

  std::mt19937_64 rng(seed);
  std::vector<Vec3> pts;
  pts.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double r = detail::uniform01(rng) * total;
    std::size_t ti = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), r) -
                                              cumulative.begin());
    ti = std::min(ti, cumulative.size() - 1);
    const auto& t = mesh.triangles[ti];
    const double r1 = std::sqrt(detail::uniform01(rng));
    const double r2 = detail::uniform01(rng);
    pts.push_back((1.0 - r1) * mesh.vertices[t[0]] + r1 * (1.0 - r2) * mesh.vertices[t[1]] +
                  r1 * r2 * mesh.vertices[t[2]]);
  }
  return pts;
}

/// Exact nearest-neighbour lookup over a fixed point set (R-tree).
class PointIndex {
  using Point = boost::geometry::model::point<double, 3, boost::geometry::cs::cartesian>;
  using Value = std::pair<Point, std::size_t>;

 public:
  explicit PointIndex(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
    if (points_.empty()) throw ArgumentError("PointIndex: empty point set");
    std::vector<Value> values;
    values.reserve(points_.size());
    for (std::size_t i = 0; i < points_.size(); ++i)
      values.emplace_back(Point(points_[i].x(), points_[i].y(), points_[i].z()), i);
    tree_ = Tree(values.begin(), values.end());
  }

  /// Index of and Euclidean distance to the closest stored point.
  std::pair<std::size_t, double> nearest(const Vec3& q) const {
    std::vector<Value> hit;
    tree_.query(boost::geometry::index::nearest(Point(q.x(), q.y(), q.z()), 1), std::back_inserter(hit));
    return {hit.front().second, (points_[hit.front().second] - q).norm()};
  }

  /// Distances from each query to its nearest stored point.
  std::vector<double> distances(std::span<const Vec3> queries) const {
    std::vector<double> d(queries.size());
    const long n = static_cast<long>(queries.size());
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i) d[i] = nearest(queries[i]).second;
    return d;
  }

 private:
  using Tree = boost::geometry::index::rtree<Value, boost::geometry::index::quadratic<16>>;
  std::vector<Vec3> points_;
  Tree tree_;
};

struct MeshDistanceMetrics {
  double accuracy = 0.0;
  double completion = 0.0;
  double chamfer = 0.0;
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Vertex-to-vertex errors. accuracy averages gt -> pred nearest distances,
/// completion averages pred -> gt; `swap` exchanges the two.
inline MeshDistanceMetrics point_distance_metrics(std::span<const Vec3> pred, std::span<const Vec3> gt,
                                                  bool swap = false) {
  if (pred.empty() || gt.empty()) throw ArgumentError("mesh_distance_metrics: empty mesh");
  const PointIndex pred_index(pred);
  const PointIndex gt_index(gt);
  MeshDistanceMetrics m;
  m.accuracy = mean_of(pred_index.distances(gt));
  m.completion = mean_of(gt_index.distances(pred));
  if (swap) std::swap(m.accuracy, m.completion);
  m.chamfer = 0.5 * (m.accuracy + m.completion);
  return m;
}

inline MeshDistanceMetrics mesh_distance_metrics(const TriangleMesh& pred, const TriangleMesh& gt,
                                                 bool swap = false) {
  return point_distance_metrics(pred.vertices, gt.vertices, swap);
}

struct FScore {
  double precision = 0.0;
  double recall = 0.0;
  double fscore = 0.0;
};

/// precision: pred points closer than `thresh` to gt; recall: the reverse.
inline FScore fscore_at_threshold(std::span<const Vec3> pred, std::span<const Vec3> gt, double thresh = 0.05) {
  if (pred.empty() || gt.empty()) throw ArgumentError("fscore_at_threshold: empty point set");
  const PointIndex pred_index(pred);
  const PointIndex gt_index(gt);
  auto fraction_within = [thresh](const std::vector<double>& d) {
    std::size_t n = 0;
    for (double x : d) n += x < thresh;
    return static_cast<double>(n) / static_cast<double>(d.size());
  };
  FScore f;
  f.precision = fraction_within(gt_index.distances(pred));
  f.recall = fraction_within(pred_index.distances(gt));
  f.fscore = (f.precision + f.recall) > 0.0 ? 2.0 * f.precision * f.recall / (f.precision + f.recall) : 0.0;
  return f;
}

struct MeshEvalConfig {
  std::size_t samples = 200000;
  double thresh = 0.05;
  std::uint64_t seed = 0;
  bool swap_acc_comp = false;
};

struct MeshReport {
  MeshDistanceMetrics distances;
  FScore fscore;
};

inline MeshReport evaluate_mesh(const TriangleMesh& pred, const TriangleMesh& gt, const MeshEvalConfig& cfg = {}) {
  MeshReport r;
  r.distances = mesh_distance_metrics(pred, gt, cfg.swap_acc_comp);
  const std::vector<Vec3> ps = sample_surface_points(pred, cfg.samples, cfg.seed);
  const std::vector<Vec3> gs = sample_surface_points(gt, cfg.samples, cfg.seed);
  r.fscore = fscore_at_threshold(ps, gs, cfg.thresh);
  return r;
}

}  // namespace mvsa
