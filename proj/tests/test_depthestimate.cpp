#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mvsa/depthestimate.hpp"
#include "mvsa/evaluation.hpp"
#include "mvsa/pipeline.hpp"
#include "test_support.hpp"

using namespace mvsa;

namespace {

CostVolume volume_with(const DepthBins& bins, int w, int h) {
  CostVolume cv;
  cv.bins = bins;
  cv.width = w;
  cv.height = h;
  cv.scores.assign(static_cast<std::size_t>(bins.count()) * w * h, 0.0);
  cv.coverage.assign(cv.scores.size(), 1);
  return cv;
}

std::vector<CameraFrame> sources_of(const Scene& s, std::size_t ref) {
  std::vector<CameraFrame> out;
  for (std::size_t i = 0; i < s.frames.size(); ++i)
    if (i != ref) out.push_back(s.frames[i]);
  return out;
}

}  // namespace

TEST(SoftArgmin, HardArgmaxLimit) {
  const DepthBins bins = make_log_bins({0.5, 20.0}, 16);
  const double t = 0.1;
  CostVolume cv = volume_with(bins, 3, 2);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& s : cv.scores) s = u(rng);
  std::vector<int> winner(6);
  for (int p = 0; p < 6; ++p) {
    winner[p] = static_cast<int>(rng() % 16);
    cv.scores[cv.index(winner[p], p / 3, p % 3)] = 1.0 + 50.0 * t;
  }
  // Runner-up is at most 1.0, so the gap is >= 50 T.
  const DepthMap d = soft_argmin_depth(cv, t);
  for (int p = 0; p < 6; ++p) {
    const double want = bins[winner[p]];
    EXPECT_NEAR(d.at(p % 3, p / 3), want, 1e-6 * want);
  }
}

TEST(SoftArgmin, UniformScoresGiveGeometricMean) {
  const DepthBins bins({1.0, 4.0});
  const CostVolume cv = volume_with(bins, 2, 2);
  const DepthMap d = soft_argmin_depth(cv, 0.7);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) EXPECT_NEAR(d.at(x, y), std::sqrt(1.0 * 4.0), 1e-12);
}

TEST(SoftArgmin, EqualBinsRejectedUpstream) { EXPECT_THROW(DepthBins({2.0, 2.0}), ArgumentError); }

TEST(SoftArgmin, UncoveredPixelsInvalidAndOutputWithinBins) {
  const DepthBins bins = make_log_bins({0.2, 30.0}, 9);
  CostVolume cv = volume_with(bins, 5, 4);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 3.0);
  for (double& s : cv.scores) s = n(rng);
  for (int k = 0; k < 9; ++k) cv.coverage[cv.index(k, 1, 2)] = 0;
  const DepthMap d = soft_argmin_depth(cv, 0.05);
  EXPECT_FALSE(d.is_valid(2, 1));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      if (x == 2 && y == 1) continue;
      ASSERT_TRUE(d.is_valid(x, y));
      EXPECT_GE(d.at(x, y), bins.front());
      EXPECT_LE(d.at(x, y), bins.back());
    }
  EXPECT_THROW(soft_argmin_depth(cv, 0.0), ArgumentError);
}

TEST(SigmoidLogDepth, Examples) {
  const RangeEstimate r{1.0, 100.0};
  EXPECT_NEAR(sigmoid_log_depth(0.0, r), std::exp(0.5 * std::log(100.0)), 1e-12);
  EXPECT_NEAR(sigmoid_log_depth(40.0, r), 100.0, 1e-9 * 100.0);
  EXPECT_NEAR(sigmoid_log_depth(-40.0, r), 1.0, 1e-9);
}

TEST(SigmoidLogDepth, InverseRoundTrip) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  const RangeEstimate r{0.3, 75.0};
  for (int i = 0; i < 5000; ++i) {
    const double d = r.d_min * std::pow(r.d_max / r.d_min, u(rng));
    EXPECT_NEAR(sigmoid_log_depth(logit_from_depth(d, r), r), d, 1e-9 * d);
  }
  EXPECT_THROW(logit_from_depth(r.d_min, r), DomainError);
  EXPECT_THROW(logit_from_depth(80.0, r), DomainError);
}

TEST(SigmoidLogDepth, StrictlyMonotoneAndBounded) {
  const RangeEstimate r{2.0, 9.0};
  double prev = 0.0;
  for (int i = 0; i <= 2000; ++i) {
    const double x = -15.0 + 30.0 * i / 2000.0;
    const double d = sigmoid_log_depth(x, r);
    EXPECT_GT(d, r.d_min);
    EXPECT_LT(d, r.d_max);
    if (i > 0) EXPECT_GT(d, prev);
    prev = d;
  }
}

TEST(PerturbRange, ZeroAmplitudeIsIdentity) {
  const RangeEstimate r{0.7, 12.0};
  const RangeEstimate p = perturb_range(r, 99, PerturbConfig{0.0});
  EXPECT_EQ(p.d_min, r.d_min);
  EXPECT_EQ(p.d_max, r.d_max);
}

TEST(PerturbRange, AlwaysWidens) {
  const RangeEstimate r{0.7, 12.0};
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const RangeEstimate p = perturb_range(r, seed);
    EXPECT_LE(p.d_min, r.d_min);
    EXPECT_GE(p.d_max, r.d_max);
    EXPECT_GE(p.d_min, r.d_min / 2.0);
    EXPECT_LE(p.d_max, r.d_max * 2.0);
  }
}

TEST(PerturbRange, SeededGoldenValue) {
  const RangeEstimate p = perturb_range({1.0, 10.0}, 42);
  EXPECT_DOUBLE_EQ(p.d_min, 0.59248250813024661);
  EXPECT_DOUBLE_EQ(p.d_max, 15.572832691135499);
  const RangeEstimate q = perturb_range({1.0, 10.0}, 42);
  EXPECT_EQ(p.d_min, q.d_min);
  EXPECT_EQ(p.d_max, q.d_max);
}

TEST(RefineRange, PadsTheValidSpan) {
  DepthMap d(3, 1);
  d.set(0, 0, 2.0);
  d.set(1, 0, 8.0);
  d.invalidate(2, 0);
  const RangeEstimate r = refine_range(d, 0.05);
  const double pad = std::max(0.05 * std::log(4.0), std::log(1.05));
  EXPECT_NEAR(r.d_min, 2.0 * std::exp(-pad), 1e-12);
  EXPECT_NEAR(r.d_max, 8.0 * std::exp(pad), 1e-12);
  DepthMap none(2, 2);
  EXPECT_THROW(refine_range(none, 0.05), PipelineError);
}

TEST(Cascade, PlaneSceneRefinementImproves) {
  const Scene s = synth_scene(SynthKind::kPlane, 5, 7);
  const std::size_t ref = 2;
  const std::vector<CameraFrame> src = sources_of(s, ref);
  std::vector<FeatureMap> fs;
  for (const auto& f : src) fs.push_back(extract_census_features(f.image));
  const FeatureMap fr = extract_census_features(s.frames[ref].image);
  CascadeConfig cfg;
  cfg.temperature = 0.03;
  const CascadeResult r = cascaded_depth(s.frames[ref], src, fr, fs, ScorerConfig{}, cfg);
  ASSERT_EQ(r.passes.size(), 2u);

  const RangeEstimate p1 = r.passes[0].range, p2 = r.passes[1].range;
  const double pad = std::max(cfg.margin_frac * std::log(p1.d_max / p1.d_min), std::log1p(cfg.margin_frac));
  EXPECT_GE(p2.d_min, p1.d_min * std::exp(-pad));
  EXPECT_LE(p2.d_max, p1.d_max * std::exp(pad));

  const DepthMap gt = sample_depth_grid(*s.frames[ref].gt_depth, fr.scale);
  const double rel1 = abs_rel_map(r.passes[0].depth, gt).mean;
  const double rel2 = abs_rel_map(r.passes[1].depth, gt).mean;
  EXPECT_LE(rel2, rel1);
  EXPECT_LT(rel2, 0.02);
  EXPECT_EQ(r.depth.depth, r.passes[1].depth.depth);
}

TEST(Cascade, ZeroBaselineUsesFallbackRange) {
  const Scene s = synth_scene(SynthKind::kPlane, 3, 8);
  const CameraFrame& ref = s.frames[1];
  const CameraFrame same("twin", ref.intrinsics, ref.world_from_camera, ref.image);
  const FeatureMap f = extract_census_features(ref.image);
  const std::vector<CameraFrame> src{same};
  const std::vector<FeatureMap> fs{f};
  const CascadeResult r = cascaded_depth(ref, src, f, fs, ScorerConfig{}, CascadeConfig{});
  EXPECT_EQ(r.passes[0].range.d_min, 0.25);
  EXPECT_EQ(r.passes[0].range.d_max, 100.0);
  EXPECT_GT(r.depth.count_valid(), 0u);
}

TEST(Cascade, NoMatchableContent) {
  const Intrinsics k{50.0, 50.0, 16.0, 12.0, 33, 25};
  const CameraFrame ref("r", k, RigidPose::identity());
  RigidPose away;
  away.rotation = test::rot_axis(Vec3::UnitY(), 3.14159);
  away.translation = Vec3(0.2, 0, 0);
  const CameraFrame src("s", k, away);
  FeatureMap f(4, 33, 25, 1);
  const std::vector<CameraFrame> srcs{src};
  const std::vector<FeatureMap> fs{f};
  try {
    cascaded_depth(ref, srcs, f, fs, ScorerConfig{}, CascadeConfig{});
    FAIL() << "expected PipelineError";
  } catch (const PipelineError& e) {
    EXPECT_NE(std::string(e.what()).find("no matchable content"), std::string::npos);
  }
}

TEST(Cascade, Deterministic) {
  const Scene s = synth_scene(SynthKind::kTwoPlanes, 3, 9);
  const std::vector<CameraFrame> src = sources_of(s, 1);
  std::vector<FeatureMap> fs;
  for (const auto& f : src) fs.push_back(extract_census_features(f.image));
  const FeatureMap fr = extract_census_features(s.frames[1].image);
  CascadeConfig cfg;
  cfg.bins = 24;
  const CascadeResult a = cascaded_depth(s.frames[1], src, fr, fs, ScorerConfig{}, cfg);
  const CascadeResult b = cascaded_depth(s.frames[1], src, fr, fs, ScorerConfig{}, cfg);
  EXPECT_EQ(a.depth.depth, b.depth.depth);
  EXPECT_EQ(a.depth.valid, b.depth.valid);
}

TEST(DefaultTemperature, InverseSqrtChannels) {
  EXPECT_DOUBLE_EQ(default_temperature(48), 1.0 / std::sqrt(48.0));
  EXPECT_THROW(default_temperature(0), ArgumentError);
}
