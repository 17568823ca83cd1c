#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "mvsa/costvolume.hpp"
#include "mvsa/parallel.hpp"
#include "mvsa/pipeline.hpp"
#include "test_support.hpp"

using namespace mvsa;

namespace {

MlpWeights random_mlp(std::uint64_t seed, int hidden = 8) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  MlpWeights w;
  MlpLayer a{MetadataRecord::kMlpInputSize, hidden, {}, {}, Activation::kRelu};
  MlpLayer b{hidden, 2, {}, {}, Activation::kNone};
  for (MlpLayer* l : {&a, &b}) {
    l->weights.resize(static_cast<std::size_t>(l->in_dim) * l->out_dim);
    l->bias.resize(l->out_dim);
    for (double& x : l->weights) x = n(rng);
    for (double& x : l->bias) x = n(rng);
  }
  w.layers = {a, b};
  return w;
}

FeatureMap random_features(int c, int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  FeatureMap fm(c, w, h, 1);
  for (float& v : fm.data) v = n(rng);
  return fm;
}

/// Small random-feature rig: reference at the origin plus three sources.
struct Rig {
  Intrinsics k{40.0, 40.0, 16.0, 12.0, 32, 24};
  std::vector<CameraFrame> frames;
  std::vector<FeatureMap> features;

  explicit Rig(double lambda = 1.0) {
    const std::vector<Vec3> centres{{0, 0, 0}, {-0.1, 0, 0}, {0.08, 0.03, 0}, {0.0, -0.12, 0.02}};
    for (std::size_t i = 0; i < centres.size(); ++i) {
      RigidPose p = RigidPose::from_translation(lambda * centres[i]);
      if (i == 3) p.rotation = test::rot_axis(Vec3(0.2, 1, 0), 0.05);
      frames.emplace_back("c" + std::to_string(i), k, p);
      features.push_back(random_features(6, k.width, k.height, 100 + i));
    }
  }
};

}  // namespace

TEST(LogBins, GeometricSpacing) {
  const DepthBins b = make_log_bins({1.0, 4.0}, 3);
  ASSERT_EQ(b.count(), 3);
  EXPECT_EQ(b[0], 1.0);
  EXPECT_NEAR(b[1], 2.0, 1e-12);
  EXPECT_EQ(b[2], 4.0);
}

TEST(LogBins, EndpointsExactAndConstantRatio) {
  const DepthBins b = make_log_bins({0.25, 100.0}, 64);
  EXPECT_EQ(b.front(), 0.25);
  EXPECT_EQ(b.back(), 100.0);
  const double ratio = std::pow(100.0 / 0.25, 1.0 / 63.0);
  EXPECT_NEAR(ratio, 1.0997, 1e-4);
  for (int j = 1; j < 64; ++j) EXPECT_NEAR(b[j] / b[j - 1], ratio, 1e-12);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int t = 0; t < 200; ++t) {
    double lo = std::exp(u(rng)), hi = std::exp(u(rng));
    if (lo == hi) continue;
    if (lo > hi) std::swap(lo, hi);
    const DepthBins r = make_log_bins({lo, hi}, 2 + t % 70);
    EXPECT_EQ(r.front(), lo);
    EXPECT_EQ(r.back(), hi);
  }
}

TEST(LogBins, Errors) {
  EXPECT_THROW(make_log_bins({2.0, 1.0}, 4), ArgumentError);
  EXPECT_THROW(make_log_bins({1.0, 1.0}, 4), ArgumentError);
  EXPECT_THROW(make_log_bins({1.0, 2.0}, 1), ArgumentError);
  EXPECT_THROW(DepthBins({1.0, 1.0}), ArgumentError);
  EXPECT_THROW(DepthBins({0.0, 1.0}), ArgumentError);
}

TEST(Metadata, CoincidentCameras) {
  Rig rig;
  const DepthBins bins = make_log_bins({0.5, 8.0}, 5);
  const MetadataRecord r = compute_metadata(rig.frames[0], rig.frames[0], rig.features[0], rig.features[0], bins, 7, 9, 2);
  ASSERT_TRUE(r.valid);
  EXPECT_LT((r.ray_ref - r.ray_src).norm(), 1e-12);
  EXPECT_NEAR(r.ray_angle, 0.0, 1e-7);
  EXPECT_NEAR(r.ray_ref.norm(), 1.0, 1e-12);
  // Same view: dot is the squared norm of the reference descriptor.
  const auto v = rig.features[0].vector_at(7, 9);
  EXPECT_NEAR(r.dot, dot_affinity(v, v), 1e-9);
}

TEST(Metadata, DepthNormalisationEndpoints) {
  Rig rig;
  const DepthBins bins = make_log_bins({0.5, 8.0}, 6);
  const MetadataRecord first = compute_metadata(rig.frames[0], rig.frames[0], rig.features[0], rig.features[0], bins, 10, 10, 0);
  const MetadataRecord last = compute_metadata(rig.frames[0], rig.frames[0], rig.features[0], rig.features[0], bins, 10, 10, 5);
  EXPECT_EQ(first.depth_ref_norm, 0.0);
  EXPECT_EQ(last.depth_ref_norm, 1.0);
}

TEST(Metadata, RayAngleFromBaseline) {
  const Intrinsics k{50.0, 50.0, 16.0, 12.0, 33, 25};
  const double b = 0.1, d = 1.0;
  const CameraFrame ref("r", k, RigidPose::identity());
  const CameraFrame src("s", k, RigidPose::from_translation(Vec3(-b, 0, 0)));
  FeatureMap f(4, 33, 25, 1);
  const DepthBins bins({0.5, d, 2.0});
  const MetadataRecord r = compute_metadata(ref, src, f, f, bins, 16, 12, 1);
  ASSERT_TRUE(r.valid);
  EXPECT_NEAR(r.ray_angle, std::atan(b / d), 1e-12);
  EXPECT_NEAR(r.ray_angle, 0.09967, 1e-5);
  EXPECT_NEAR(r.ray_src.norm(), 1.0, 1e-12);
}

TEST(Metadata, InvalidCorrespondenceIsZeroed) {
  const Intrinsics k{50.0, 50.0, 16.0, 12.0, 33, 25};
  const CameraFrame ref("r", k, RigidPose::identity());
  const CameraFrame src("s", k, RigidPose::from_translation(Vec3(0, 0, 3)));
  FeatureMap f = random_features(4, 33, 25, 3);
  const MetadataRecord r = compute_metadata(ref, src, f, f, DepthBins({0.5, 1.0, 2.0}), 16, 12, 1);
  EXPECT_FALSE(r.valid);
  EXPECT_EQ(r.dot, 0.0);
  EXPECT_EQ(r.ray_ref, Vec3::Zero());
  EXPECT_EQ(r.ray_src, Vec3::Zero());
  EXPECT_EQ(r.depth_ref_norm, 0.0);
  EXPECT_EQ(r.ray_angle, 0.0);
  for (double x : r.mlp_input()) EXPECT_EQ(x, 0.0);
}

TEST(Metadata, IndexErrors) {
  Rig rig;
  const DepthBins bins({1.0, 2.0});
  EXPECT_THROW(compute_metadata(rig.frames[0], rig.frames[1], rig.features[0], rig.features[1], bins, 32, 0, 0),
               ArgumentError);
  EXPECT_THROW(compute_metadata(rig.frames[0], rig.frames[1], rig.features[0], rig.features[1], bins, 0, 0, 2),
               ArgumentError);
}

TEST(NormalizeMetadata, MaxScaling) {
  const std::vector<double> p{0.1, 0.2};
  const std::vector<double> n = normalized_pose_distances(p);
  EXPECT_DOUBLE_EQ(n[0], 0.5);
  EXPECT_DOUBLE_EQ(n[1], 1.0);
  EXPECT_EQ(normalized_pose_distances(std::vector<double>{0.7})[0], 1.0);
  EXPECT_EQ(normalized_pose_distances(std::vector<double>{0.0})[0], 0.0);
  EXPECT_THROW(normalized_pose_distances(std::vector<double>{}), ArgumentError);

  std::vector<std::vector<MetadataRecord>> recs(2, std::vector<MetadataRecord>(3));
  recs[0][0].valid = recs[1][2].valid = true;
  normalize_metadata(recs, p);
  EXPECT_DOUBLE_EQ(recs[0][0].pose_dist_norm, 0.5);
  EXPECT_DOUBLE_EQ(recs[1][2].pose_dist_norm, 1.0);
  EXPECT_EQ(recs[0][1].pose_dist_norm, 0.0);  // invalid records stay zero
}

TEST(NormalizeMetadata, ScaleInvariantFields) {
  const double lambda = 100.0;
  Rig a(1.0), b(lambda);
  const DepthBins bins_a = make_log_bins({0.3, 6.0}, 8);
  std::vector<double> scaled(bins_a.values);
  for (double& x : scaled) x *= lambda;
  const DepthBins bins_b(scaled);
  const std::vector<CameraFrame> src_a(a.frames.begin() + 1, a.frames.end());
  const std::vector<CameraFrame> src_b(b.frames.begin() + 1, b.frames.end());
  const auto pa = normalized_pose_distances(scale_free_pose_distances(a.frames[0], src_a));
  const auto pb = normalized_pose_distances(scale_free_pose_distances(b.frames[0], src_b));
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa[i], pb[i], 1e-6);
  int checked = 0;
  for (std::size_t i = 1; i < a.frames.size(); ++i)
    for (int k = 0; k < bins_a.count(); ++k)
      for (int v = 0; v < 24; v += 3)
        for (int u = 0; u < 32; u += 3) {
          const MetadataRecord ra = compute_metadata(a.frames[0], a.frames[i], a.features[0], a.features[i], bins_a, u, v, k);
          const MetadataRecord rb = compute_metadata(b.frames[0], b.frames[i], b.features[0], b.features[i], bins_b, u, v, k);
          ASSERT_EQ(ra.valid, rb.valid);
          const auto xa = ra.mlp_input(), xb = rb.mlp_input();
          for (std::size_t q = 0; q < xa.size(); ++q) EXPECT_NEAR(xa[q], xb[q], 1e-6);
          checked += ra.valid;
        }
  EXPECT_GT(checked, 100);
}

TEST(Mlp, ZeroNetwork) {
  MlpWeights w;
  w.layers.push_back({3, 2, std::vector<double>(6, 0.0), {0.0, 0.0}, Activation::kRelu});
  const std::vector<double> out = mlp_forward(w, std::vector<double>{1, -2, 3});
  EXPECT_EQ(out, (std::vector<double>{0.0, 0.0}));
}

TEST(Mlp, SingleReluLayer) {
  MlpWeights w;
  w.layers.push_back({2, 2, {1, 0, 0, 1}, {1, -1}, Activation::kRelu});
  const std::vector<double> x{2, 0.5};
  const std::vector<double> out = mlp_forward(w, x);
  EXPECT_EQ(out[0], std::max(0.0, x[0] + 1));
  EXPECT_EQ(out[1], std::max(0.0, x[1] - 1));
}

TEST(Mlp, IdentityPassthrough) {
  MlpWeights w;
  const std::vector<double> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
  w.layers.push_back({3, 3, eye, {0, 0, 0}, Activation::kNone});
  w.layers.push_back({3, 3, eye, {0, 0, 0}, Activation::kNone});
  const std::vector<double> x{0.25, -7, 3.5};
  EXPECT_EQ(mlp_forward(w, x), x);
}

TEST(Mlp, DimensionMismatch) {
  MlpWeights w;
  w.layers.push_back({2, 2, {1, 0, 0, 1}, {0, 0}, Activation::kNone});
  EXPECT_THROW(mlp_forward(w, std::vector<double>{1, 2, 3}), ArgumentError);
  MlpWeights bad;
  bad.layers.push_back({2, 3, std::vector<double>(6, 0.0), {0, 0, 0}, Activation::kNone});
  bad.layers.push_back({2, 2, std::vector<double>(4, 0.0), {0, 0}, Activation::kNone});
  EXPECT_THROW(bad.validate(0), ConfigError);
  MlpWeights head;
  head.layers.push_back({2, 3, std::vector<double>(6, 0.0), {0, 0, 0}, Activation::kNone});
  EXPECT_THROW(head.validate(2), ConfigError);
}

TEST(AggregateViews, Examples) {
  const std::vector<ScoreWeight> one{{0.7, -12.0}};
  EXPECT_EQ(aggregate_views(one), 0.7);
  const std::vector<ScoreWeight> equal{{2, 0.3}, {4, 0.3}};
  EXPECT_DOUBLE_EQ(aggregate_views(equal), 3.0);
  const std::vector<ScoreWeight> skew{{2, 0.0}, {4, std::log(3.0)}};
  const double p0 = 1.0 / (1.0 + 3.0), p1 = 3.0 / (1.0 + 3.0);
  EXPECT_NEAR(aggregate_views(skew), p0 * 2 + p1 * 4, 1e-12);
  EXPECT_THROW(aggregate_views(std::vector<ScoreWeight>{}), ArgumentError);
}

TEST(AggregateViews, ConvexAndNormalised) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 30.0);
  for (int t = 0; t < 2000; ++t) {
    std::vector<ScoreWeight> v(1 + t % 9);
    for (auto& x : v) x = {n(rng), n(rng)};
    const double a = aggregate_views(v);
    double lo = v[0].score, hi = v[0].score;
    for (const auto& x : v) lo = std::min(lo, x.score), hi = std::max(hi, x.score);
    EXPECT_GE(a, lo - 1e-9 * std::abs(lo));
    EXPECT_LE(a, hi + 1e-9 * std::abs(hi));
    double s = 0.0;
    for (double p : softmax_weights(v)) s += p;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(CostVolume, DuplicatesAndPermutations) {
  Rig rig;
  const DepthBins bins = make_log_bins({0.3, 6.0}, 12);
  ScorerConfig dot;
  ScorerConfig mlp;
  mlp.mode = ScorerMode::kMlp;
  mlp.mlp = random_mlp(5);
  for (const ScorerConfig* sc : {&dot, &mlp}) {
    const std::vector<CameraFrame> src(rig.frames.begin() + 1, rig.frames.end());
    const std::vector<FeatureMap> fs(rig.features.begin() + 1, rig.features.end());
    const CostVolume base = build_cost_volume(rig.frames[0], src, rig.features[0], fs, bins, *sc);
    const std::vector<CameraFrame> psrc{src[2], src[0], src[1]};
    const std::vector<FeatureMap> pfs{fs[2], fs[0], fs[1]};
    const CostVolume perm = build_cost_volume(rig.frames[0], psrc, rig.features[0], pfs, bins, *sc);
    ASSERT_EQ(base.scores.size(), perm.scores.size());
    for (std::size_t i = 0; i < base.scores.size(); ++i) {
      EXPECT_NEAR(base.scores[i], perm.scores[i], 1e-6);
      EXPECT_EQ(base.coverage[i], perm.coverage[i]);
    }

    const std::vector<CameraFrame> one{src[0]};
    const std::vector<FeatureMap> f1{fs[0]};
    const CostVolume single = build_cost_volume(rig.frames[0], one, rig.features[0], f1, bins, *sc);
    const std::vector<CameraFrame> many(4, src[0]);
    const std::vector<FeatureMap> fm(4, fs[0]);
    const CostVolume dup = build_cost_volume(rig.frames[0], many, rig.features[0], fm, bins, *sc);
    for (std::size_t i = 0; i < single.scores.size(); ++i) EXPECT_NEAR(single.scores[i], dup.scores[i], 1e-6);
  }
}

TEST(CostVolume, EmptyCellsGetEmptyScore) {
  const Intrinsics k{50.0, 50.0, 16.0, 12.0, 33, 25};
  const CameraFrame ref("r", k, RigidPose::identity());
  const CameraFrame src("s", k, RigidPose::from_translation(Vec3(-0.5, 0, 0)));
  const FeatureMap f = random_features(4, 33, 25, 6);
  ScorerConfig sc;
  sc.empty_score = -3.5;
  const std::vector<CameraFrame> srcs{src};
  const std::vector<FeatureMap> fs{f};
  const CostVolume cv = build_cost_volume(ref, srcs, f, fs, DepthBins({0.5, 1.0, 2.0}), sc);
  int empty = 0;
  for (std::size_t i = 0; i < cv.scores.size(); ++i)
    if (cv.coverage[i] == 0) {
      EXPECT_EQ(cv.scores[i], -3.5);
      ++empty;
    } else {
      EXPECT_TRUE(std::isfinite(cv.scores[i]));
    }
  EXPECT_GT(empty, 0);
}

TEST(CostVolume, ConfigurationErrors) {
  Rig rig;
  const std::vector<CameraFrame> src{rig.frames[1]};
  const std::vector<FeatureMap> fs{rig.features[1]};
  const DepthBins bins({1.0, 2.0});
  ScorerConfig no_weights;
  no_weights.mode = ScorerMode::kMlp;
  EXPECT_THROW(build_cost_volume(rig.frames[0], src, rig.features[0], fs, bins, no_weights), ConfigError);
  ScorerConfig wrong;
  wrong.mode = ScorerMode::kMlp;
  wrong.mlp = MlpWeights{};
  wrong.mlp->layers.push_back({13, 2, std::vector<double>(26, 0.1), {0, 0}, Activation::kNone});
  EXPECT_THROW(build_cost_volume(rig.frames[0], src, rig.features[0], fs, bins, wrong), ConfigError);
  EXPECT_THROW(build_cost_volume(rig.frames[0], std::vector<CameraFrame>{}, rig.features[0],
                                 std::vector<FeatureMap>{}, bins, ScorerConfig{}),
               ArgumentError);
  FeatureMap other_scale = rig.features[1];
  other_scale.scale = 2;
  const std::vector<FeatureMap> bad{other_scale};
  EXPECT_THROW(build_cost_volume(rig.frames[0], src, rig.features[0], bad, bins, ScorerConfig{}), ArgumentError);
}

TEST(CostVolume, SameResultForAnyThreadCount) {
  Rig rig;
  const std::vector<CameraFrame> src(rig.frames.begin() + 1, rig.frames.end());
  const std::vector<FeatureMap> fs(rig.features.begin() + 1, rig.features.end());
  const DepthBins bins = make_log_bins({0.3, 6.0}, 16);
  const int before = num_threads();
  set_num_threads(1);
  const CostVolume a = build_cost_volume(rig.frames[0], src, rig.features[0], fs, bins, ScorerConfig{});
  set_num_threads(4);
  const CostVolume b = build_cost_volume(rig.frames[0], src, rig.features[0], fs, bins, ScorerConfig{});
  set_num_threads(before);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.coverage, b.coverage);
}

TEST(CostVolume, PlaneArgmaxPicksNearestBin) {
  const Scene s = synth_scene(SynthKind::kPlane, 2, 21);
  const FeatureMap f0 = extract_census_features(s.frames[0].image);
  const FeatureMap f1 = extract_census_features(s.frames[1].image);
  // Seven log bins over [1, 4]; the middle one is 2.0.
  const DepthBins bins = make_log_bins({1.0, 4.0}, 7);
  const std::vector<CameraFrame> src{s.frames[1]};
  const std::vector<FeatureMap> fs{f1};
  const CostVolume cv = build_cost_volume(s.frames[0], src, f0, fs, bins, ScorerConfig{});
  const DepthMap gt = sample_depth_grid(*s.frames[0].gt_depth, f0.scale);
  int total = 0, hit = 0;
  for (int v = 0; v < cv.height; ++v)
    for (int u = 0; u < cv.width; ++u) {
      if (!gt.is_valid(u, v) || cv.cover(0, v, u) == 0) continue;
      int best = 0;
      for (int k = 1; k < bins.count(); ++k)
        if (cv.score(k, v, u) > cv.score(best, v, u)) best = k;
      int nearest = 0;
      for (int k = 1; k < bins.count(); ++k)
        if (std::abs(std::log(bins[k] / gt.at(u, v))) < std::abs(std::log(bins[nearest] / gt.at(u, v)))) nearest = k;
      hit += best == nearest;
      ++total;
    }
  ASSERT_GT(total, 1000);
  EXPECT_GE(static_cast<double>(hit) / total, 0.95) << hit << "/" << total;
}
