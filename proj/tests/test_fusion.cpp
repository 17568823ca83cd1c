#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "mvsa/fusion.hpp"
#include "mvsa/pipeline.hpp"

using namespace mvsa;

namespace {

using Index3 = TsdfVolume::Index3;

DepthMap constant_depth(int w, int h, double v) {
  DepthMap d(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) d.set(x, y, v);
  return d;
}

/// n x n vertex grid in the plane z = `z`, two triangles per cell.
TriangleMesh grid_mesh(int n, double spacing, double z) {
  TriangleMesh m;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) m.vertices.emplace_back(i * spacing, j * spacing, z);
  for (int j = 0; j + 1 < n; ++j)
    for (int i = 0; i + 1 < n; ++i) {
      const int a = j * n + i;
      m.triangles.push_back({a, a + 1, a + n + 1});
      m.triangles.push_back({a, a + n + 1, a + n});
    }
  return m;
}

std::vector<Vec3> random_points(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> p(n);
  for (auto& v : p) v = Vec3(u(rng), u(rng), u(rng));
  return p;
}

double brute_mean_nearest(const std::vector<Vec3>& queries, const std::vector<Vec3>& targets) {
  double sum = 0.0;
  for (const Vec3& q : queries) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& t : targets) best = std::min(best, (t - q).norm());
    sum += best;
  }
  return sum / static_cast<double>(queries.size());
}

template <typename Field>
void write_field(TsdfVolume& vol, int lo, int hi, Field f) {
  for (int k = lo; k <= hi; ++k)
    for (int j = lo; j <= hi; ++j)
      for (int i = lo; i <= hi; ++i) {
        const Index3 v{i, j, k};
        vol.set_voxel(v, static_cast<float>(f(vol.voxel_position(v)) / vol.truncation()), 1.0f);
      }
}

}  // namespace

TEST(Integrate, EmptyDepthLeavesVolumeUnchanged) {
  TsdfVolume vol;
  const Intrinsics k{60, 60, 31.5, 23.5, 64, 48};
  integrate_depth_map(vol, k, RigidPose::identity(), DepthMap(64, 48));
  EXPECT_EQ(vol.block_count(), 0u);
  EXPECT_TRUE(extract_mesh(vol).empty());
}

TEST(Integrate, FrontoPlaneSignConvention) {
  TsdfVolume vol;
  const Intrinsics k{60, 60, 31.5, 23.5, 64, 48};
  integrate_depth_map(vol, k, RigidPose::identity(), constant_depth(64, 48, 1.0));
  const double trunc = vol.truncation();
  ASSERT_NEAR(trunc, 0.12, 1e-12);

  const TsdfVolume::Voxel* front = vol.find({0, 0, 20});  // z = 0.80, beyond the band in front
  ASSERT_NE(front, nullptr);
  EXPECT_EQ(front->tsdf, 1.0f);
  EXPECT_EQ(front->weight, 1.0f);

  const TsdfVolume::Voxel* near_front = vol.find({0, 0, 24});  // z = 0.96
  EXPECT_NEAR(near_front->tsdf, 0.04 / trunc, 1e-5);
  const TsdfVolume::Voxel* surface = vol.find({0, 0, 25});
  EXPECT_NEAR(surface->tsdf, 0.0, 1e-5);
  const TsdfVolume::Voxel* behind = vol.find({0, 0, 27});  // z = 1.08
  EXPECT_NEAR(behind->tsdf, -0.08 / trunc, 1e-5);

  const TsdfVolume::Voxel* far_behind = vol.find({0, 0, 31});  // z = 1.24, past the band
  ASSERT_NE(far_behind, nullptr);
  EXPECT_EQ(far_behind->weight, 0.0f);
  EXPECT_EQ(far_behind->tsdf, 1.0f);

  for (const Index3& b : vol.sorted_blocks())
    for (const auto& v : vol.block(b)) {
      EXPECT_LE(std::abs(v.tsdf), 1.0f);
      EXPECT_GE(v.weight, 0.0f);
    }
}

TEST(Integrate, DepthBeyondMaxIsSkipped) {
  TsdfVolume vol;
  ASSERT_EQ(vol.max_fuse_depth(), 3.5);
  const Intrinsics k{60, 60, 31.5, 23.5, 64, 48};
  integrate_depth_map(vol, k, RigidPose::identity(), constant_depth(64, 48, 5.0));
  EXPECT_EQ(vol.block_count(), 0u);
}

TEST(Integrate, SizeMismatch) {
  TsdfVolume vol;
  const Intrinsics k{60, 60, 31.5, 23.5, 64, 48};
  EXPECT_THROW(integrate_depth_map(vol, k, RigidPose::identity(), constant_depth(32, 24, 1.0)), ArgumentError);
  TsdfConfig bad;
  bad.voxel_size = 0.0;
  EXPECT_THROW(TsdfVolume{bad}, ArgumentError);
}

TEST(Integrate, OrderInvariantForEqualWeights) {
  SynthConfig cfg;
  cfg.width = 80;
  cfg.height = 60;
  cfg.focal = 60;
  const Scene s = synth_scene(SynthKind::kSphere, 4, 3, cfg);
  TsdfVolume ab, ba;
  integrate_depth_map(ab, s.frames[0], *s.frames[0].gt_depth);
  integrate_depth_map(ab, s.frames[1], *s.frames[1].gt_depth);
  integrate_depth_map(ba, s.frames[1], *s.frames[1].gt_depth);
  integrate_depth_map(ba, s.frames[0], *s.frames[0].gt_depth);
  ASSERT_EQ(ab.sorted_blocks(), ba.sorted_blocks());
  for (const Index3& b : ab.sorted_blocks()) {
    const auto& x = ab.block(b);
    const auto& y = ba.block(b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_NEAR(x[i].tsdf, y[i].tsdf, 1e-6);
      EXPECT_EQ(x[i].weight, y[i].weight);
    }
  }
}

TEST(ExtractMesh, AnalyticSphere) {
  TsdfVolume vol;
  const Vec3 c(0.013, -0.021, 0.007);
  const double r = 0.5;
  write_field(vol, -18, 18, [&](const Vec3& p) { return (p - c).norm() - r; });
  const TriangleMesh m = extract_mesh(vol);
  ASSERT_GT(m.triangles.size(), 100u);
  m.validate();
  for (const Vec3& v : m.vertices) EXPECT_LT(std::abs((v - c).norm() - r), vol.voxel_size());
}

TEST(ExtractMesh, AllPositiveIsEmpty) {
  TsdfVolume vol;
  write_field(vol, -3, 3, [](const Vec3&) { return 1.0; });
  const TriangleMesh m = extract_mesh(vol);
  EXPECT_TRUE(m.empty());
  EXPECT_TRUE(m.triangles.empty());
}

TEST(ExtractMesh, PlaneIsExact) {
  TsdfVolume vol;
  const Vec3 n = Vec3(0.3, 0.4, std::sqrt(0.75)).normalized();
  const double offset = 0.113;
  write_field(vol, -8, 8, [&](const Vec3& p) { return n.dot(p) - offset; });
  const TriangleMesh m = extract_mesh(vol);
  ASSERT_FALSE(m.empty());
  for (const Vec3& v : m.vertices) EXPECT_NEAR(n.dot(v), offset, 1e-6);
}

TEST(ExtractMesh, UnweightedCornersProduceNothing) {
  TsdfVolume vol;
  write_field(vol, -4, 4, [](const Vec3& p) { return p.z() - 0.01; });
  for (int j = -4; j <= 4; ++j)
    for (int i = -4; i <= 4; ++i) vol.set_voxel({i, j, 0}, -0.1f, 0.0f);
  // Every sign change now involves an unweighted corner.
  EXPECT_TRUE(extract_mesh(vol).empty());
}

TEST(SampleSurface, SingleTriangleInside) {
  TriangleMesh m;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 2, 1)};
  m.triangles = {{0, 1, 2}};
  const Vec3 a = m.vertices[0], b = m.vertices[1], c = m.vertices[2];
  const Vec3 normal = (b - a).cross(c - a);
  for (const Vec3& p : sample_surface_points(m, 2000, 5)) {
    EXPECT_NEAR(normal.dot(p - a), 0.0, 1e-12);
    // Barycentric coordinates from sub-triangle areas.
    const double area = normal.norm();
    const double wa = (b - p).cross(c - p).norm() / area;
    const double wb = (c - p).cross(a - p).norm() / area;
    const double wc = (a - p).cross(b - p).norm() / area;
    EXPECT_NEAR(wa + wb + wc, 1.0, 1e-9);
  }
}

TEST(SampleSurface, AreaWeightedSplit) {
  TriangleMesh m;
  m.vertices = {Vec3(0, 0, 0), Vec3(2, 0, 0), Vec3(0, 1, 0), Vec3(10, 0, 0), Vec3(16, 0, 0), Vec3(10, 1, 0)};
  m.triangles = {{0, 1, 2}, {3, 4, 5}};
  const std::size_t n = 10000;
  const auto pts = sample_surface_points(m, n, 7);
  const double small = static_cast<double>(std::count_if(pts.begin(), pts.end(), [](const Vec3& p) { return p.x() < 5; }));
  const double p = 1.0 / 4.0;
  const double sigma = std::sqrt(n * p * (1 - p));
  EXPECT_LT(std::abs(small - n * p), 3 * sigma);
}

TEST(SampleSurface, SeedDeterminismAndErrors) {
  const TriangleMesh m = grid_mesh(5, 0.3, 0.0);
  EXPECT_EQ(sample_surface_points(m, 500, 11), sample_surface_points(m, 500, 11));
  EXPECT_NE(sample_surface_points(m, 500, 11), sample_surface_points(m, 500, 12));
  EXPECT_THROW(sample_surface_points(TriangleMesh{}, 10, 0), ArgumentError);
  EXPECT_THROW(sample_surface_points(m, 0, 0), ArgumentError);
}

TEST(MeshMetrics, IdenticalIsZero) {
  const TriangleMesh m = grid_mesh(6, 0.2, 1.0);
  const MeshDistanceMetrics d = mesh_distance_metrics(m, m);
  EXPECT_EQ(d.accuracy, 0.0);
  EXPECT_EQ(d.completion, 0.0);
  EXPECT_EQ(d.chamfer, 0.0);
}

TEST(MeshMetrics, ParallelGridsOffset) {
  const TriangleMesh gt = grid_mesh(10, 0.5, 0.0);
  const TriangleMesh pred = grid_mesh(10, 0.5, 0.10);
  const MeshDistanceMetrics d = mesh_distance_metrics(pred, gt);
  EXPECT_NEAR(d.accuracy, 0.10, 1e-12);
  EXPECT_NEAR(d.completion, 0.10, 1e-12);
  EXPECT_NEAR(d.chamfer, 0.10, 1e-12);
}

TEST(MeshMetrics, MatchesBruteForce) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 10; ++t) {
    TriangleMesh pred, gt;
    pred.vertices = random_points(120 + t * 8, rng);
    gt.vertices = random_points(200 - t * 5, rng);
    const MeshDistanceMetrics d = mesh_distance_metrics(pred, gt);
    // Accuracy runs from ground truth to prediction.
    const double acc = brute_mean_nearest(gt.vertices, pred.vertices);
    const double comp = brute_mean_nearest(pred.vertices, gt.vertices);
    EXPECT_EQ(d.accuracy, acc);
    EXPECT_EQ(d.completion, comp);
    EXPECT_EQ(d.chamfer, 0.5 * (acc + comp));

    const MeshDistanceMetrics swapped = mesh_distance_metrics(gt, pred);
    EXPECT_EQ(swapped.accuracy, d.completion);
    EXPECT_EQ(swapped.completion, d.accuracy);
    EXPECT_EQ(swapped.chamfer, d.chamfer);
    const MeshDistanceMetrics flag = mesh_distance_metrics(pred, gt, true);
    EXPECT_EQ(flag.accuracy, d.completion);
    EXPECT_EQ(flag.completion, d.accuracy);
  }
  EXPECT_THROW(mesh_distance_metrics(TriangleMesh{}, grid_mesh(2, 1, 0)), ArgumentError);
}

TEST(FScore, Examples) {
  const TriangleMesh g = grid_mesh(10, 1.0, 0.0);
  const FScore same = fscore_at_threshold(g.vertices, g.vertices);
  EXPECT_EQ(same.precision, 1.0);
  EXPECT_EQ(same.recall, 1.0);
  EXPECT_EQ(same.fscore, 1.0);

  const TriangleMesh shifted = grid_mesh(10, 1.0, 0.10);
  const FScore off = fscore_at_threshold(shifted.vertices, g.vertices, 0.05);
  EXPECT_EQ(off.precision, 0.0);
  EXPECT_EQ(off.recall, 0.0);
  EXPECT_EQ(off.fscore, 0.0);

  const std::vector<Vec3> half(g.vertices.begin(), g.vertices.begin() + 50);
  const FScore pr = fscore_at_threshold(half, g.vertices);
  EXPECT_EQ(pr.precision, 1.0);
  EXPECT_EQ(pr.recall, 0.5);
  EXPECT_DOUBLE_EQ(pr.fscore, 2.0 / 3.0);

  EXPECT_THROW(fscore_at_threshold({}, g.vertices), ArgumentError);
}

TEST(Fusion, GroundTruthSphereChamfer) {
  SynthConfig cfg;
  cfg.width = 320;
  cfg.height = 240;
  cfg.focal = 250;
  const Scene s = synth_scene(SynthKind::kSphere, 12, 4, cfg);
  TsdfVolume vol;
  EXPECT_EQ(fuse_ground_truth(vol, s), 12u);
  const TriangleMesh m = extract_mesh(vol);
  ASSERT_FALSE(m.empty());
  const TriangleMesh gt = uv_sphere(cfg.target, cfg.sphere_radius, 256, 512);
  const MeshDistanceMetrics d = mesh_distance_metrics(m, gt);
  EXPECT_LT(d.chamfer, 0.04);
  for (const Vec3& v : m.vertices) EXPECT_LT(std::abs((v - cfg.target).norm() - cfg.sphere_radius), 0.04);
}
