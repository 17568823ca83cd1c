// Fuses ground-truth renders of a sphere and reports distance to the
// analytic surface.
#include <cmath>
#include <cstdio>

#include "mvsa/pipeline.hpp"
#include "mvsa/ply.hpp"

int main(int argc, char** argv) {
  const mvsa::SynthConfig cfg;
  const mvsa::Scene scene = mvsa::synth_scene(mvsa::SynthKind::kSphere, 12, 1, cfg);
  mvsa::TsdfConfig tc;
  tc.voxel_size = 0.04;
  tc.max_fuse_depth = 3.5;
  mvsa::TsdfVolume vol(tc);
  mvsa::fuse_ground_truth(vol, scene);
  const mvsa::TriangleMesh mesh = mvsa::extract_mesh(vol);

  double sum = 0.0, worst = 0.0;
  for (const mvsa::Vec3& v : mesh.vertices) {
    const double e = std::abs((v - cfg.target).norm() - cfg.sphere_radius);
    sum += e;
    worst = std::max(worst, e);
  }
  std::printf("%zu vertices, %zu triangles, mean radial error %.5f, max %.5f\n", mesh.vertices.size(),
              mesh.triangles.size(), sum / mesh.vertices.size(), worst);
  if (argc > 1) mvsa::save_ply(argv[1], mesh);
  return 0;
}
