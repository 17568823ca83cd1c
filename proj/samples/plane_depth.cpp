// Depth for the central view of a synthetic textured plane, two passes.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <vector>

#include "mvsa/pipeline.hpp"

int main(int argc, char** argv) {
  const int frames = argc > 1 ? std::atoi(argv[1]) : 5;
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 7;
  mvsa::PipelineConfig cfg;
  cfg.temperature = argc > 3 ? std::atof(argv[3]) : 0.03;
  const mvsa::Scene scene = mvsa::synth_scene(mvsa::SynthKind::kPlane, frames, seed);
  const int c = frames / 2;

  std::vector<mvsa::TupleSpec> tuples(1);
  tuples[0].reference = scene.frames[c].id;
  for (int i = 0; i < frames; ++i)
    if (i != c) tuples[0].sources.push_back(scene.frames[i].id);

  const auto t0 = std::chrono::steady_clock::now();
  const mvsa::DepthRunResult run = mvsa::run_depth(scene, tuples, cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (run.failures() > 0) {
    std::printf("failed: %s\n", run.outcomes[0].error.c_str());
    return 1;
  }
  const auto& res = *run.outcomes[0].result;
  for (std::size_t p = 0; p < res.passes.size(); ++p) {
    const mvsa::DepthMap gt = mvsa::sample_depth_grid(*scene.frames[c].gt_depth, res.passes[p].depth.scale);
    std::printf("pass %zu  range [%.4f, %.4f]  abs_rel %.5f  tau %.2f\n", p + 1, res.passes[p].range.d_min,
                res.passes[p].range.d_max, mvsa::abs_rel_map(res.passes[p].depth, gt).mean,
                mvsa::inlier_ratio(res.passes[p].depth, gt));
  }
  std::printf("%.2f s\n", secs);
  return 0;
}
