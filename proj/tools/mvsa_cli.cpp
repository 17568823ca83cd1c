// mvsa command-line front end.
//
// Exit codes: 0 success, 1 some tuples failed, 2 configuration or format error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mvsa/evaluation.hpp"
#include "mvsa/fusion.hpp"
#include "mvsa/parallel.hpp"
#include "mvsa/pipeline.hpp"
#include "mvsa/ply.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kPartial = 1;
constexpr int kConfig = 2;

struct SynthArgs {
  std::string kind = "plane";
  int frames = 5;
  std::string out;
  std::uint64_t seed = 0;
  int width = 640;
  int height = 480;
};

struct TupleArgs {
  std::string scene;
  std::string mode = "pose";
  std::string out;
  std::size_t max_sources = 8;
};

struct DepthArgs {
  std::string scene;
  std::string tuples;
  std::string config;
  std::string out;
};

struct FuseArgs {
  std::string scene;
  std::string depth_dir;
  std::string config;
  double voxel = 0.04;
  double max_depth = 3.5;
  std::string out;
  bool gt = false;
  bool ascii = false;
};

struct EvalDepthArgs {
  std::string pred_dir;
  std::string scene;
  std::string report;
};

struct EvalMeshArgs {
  std::string pred;
  std::string gt;
  bool swap = false;
  std::size_t samples = 200000;
  double thresh = 0.05;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  mvsa::SynthConfig cfg;
  cfg.width = a.width;
  cfg.height = a.height;
  const mvsa::SynthKind kind = mvsa::parse_synth_kind(a.kind);
  mvsa::Scene s = mvsa::synth_scene(kind, a.frames, a.seed, cfg);
  const std::string manifest = mvsa::write_scene(s, a.out);
  if (kind == mvsa::SynthKind::kSphere)
    mvsa::save_ply((std::filesystem::path(a.out) / "gt_mesh.ply").string(),
                   mvsa::uv_sphere(cfg.target, cfg.sphere_radius));
  std::cout << "wrote " << s.frames.size() << " frames, manifest " << manifest << "\n";
  return kOk;
}

int cmd_tuples(const TupleArgs& a) {
  const mvsa::Scene s = mvsa::load_scene(a.scene);
  mvsa::TupleSelection sel;
  if (a.mode == "pose") {
    mvsa::PoseTupleConfig cfg;
    cfg.max_sources = a.max_sources;
    sel = mvsa::select_tuples_pose(s.frames, cfg);
  } else if (a.mode == "overlap") {
    mvsa::OverlapTupleConfig cfg;
    cfg.max_sources = a.max_sources;
    sel = mvsa::select_tuples_overlap(s.frames, cfg);
  } else {
    throw mvsa::ConfigError("--mode must be pose or overlap");
  }
  mvsa::save_tuples(a.out, sel);
  std::cout << sel.tuples.size() << " tuples, " << sel.omitted.size() << " references without candidates\n";
  return kOk;
}

int cmd_depth(const DepthArgs& a) {
  const mvsa::Scene s = mvsa::load_scene(a.scene);
  const mvsa::TupleSelection sel = mvsa::load_tuples(a.tuples);
  const mvsa::PipelineConfig cfg = a.config.empty() ? mvsa::PipelineConfig{} : mvsa::load_pipeline_config(a.config);
  const mvsa::DepthRunResult r = mvsa::run_depth(s, sel.tuples, cfg, a.out);
  for (const auto& o : r.outcomes)
    if (!o.ok) std::cerr << "tuple '" << o.reference << "' failed: " << o.error << "\n";
  if (r.report) std::cout << mvsa::depth_report_table(*r.report);
  std::cout << r.outcomes.size() - r.failures() << "/" << r.outcomes.size() << " tuples succeeded\n";
  return r.failures() > 0 ? kPartial : kOk;
}

int cmd_fuse(const FuseArgs& a) {
  const mvsa::Scene s = mvsa::load_scene(a.scene);
  mvsa::TsdfConfig tc;
  if (!a.config.empty()) tc = mvsa::load_pipeline_config(a.config).tsdf();
  tc.voxel_size = a.voxel;
  tc.max_fuse_depth = a.max_depth;
  mvsa::TsdfVolume vol(tc);
  std::size_t n = 0;
  if (a.gt) {
    n = mvsa::fuse_ground_truth(vol, s);
  } else {
    if (a.depth_dir.empty()) throw mvsa::ConfigError("fuse: --depth-dir is required unless --gt is given");
    n = mvsa::fuse_depth_dir(vol, s, a.depth_dir);
  }
  if (n == 0) throw mvsa::DataError("fuse: no depth maps found to integrate");
  const mvsa::TriangleMesh mesh = mvsa::extract_mesh(vol);
  mvsa::save_ply(a.out, mesh, a.ascii ? mvsa::PlyFormat::kAscii : mvsa::PlyFormat::kBinaryLittleEndian);
  std::cout << "fused " << n << " depth maps into " << vol.block_count() << " blocks; mesh has "
            << mesh.vertices.size() << " vertices, " << mesh.triangles.size() << " triangles\n";
  return kOk;
}

int cmd_eval_depth(const EvalDepthArgs& a) {
  const mvsa::Scene s = mvsa::load_scene(a.scene);
  const mvsa::DepthReport r = mvsa::evaluate_depth_dir(s, a.pred_dir);
  std::cout << mvsa::depth_report_table(r);
  if (!a.report.empty()) mvsa::detail::write_json_file(a.report, mvsa::depth_report_to_json(r));
  return kOk;
}

int cmd_eval_mesh(const EvalMeshArgs& a) {
  const mvsa::TriangleMesh pred = mvsa::load_ply(a.pred);
  const mvsa::TriangleMesh gt = mvsa::load_ply(a.gt);
  mvsa::MeshEvalConfig cfg;
  cfg.samples = a.samples;
  cfg.thresh = a.thresh;
  cfg.seed = a.seed;
  cfg.swap_acc_comp = a.swap;
  const mvsa::MeshReport r = mvsa::evaluate_mesh(pred, gt, cfg);
  const nlohmann::json j = {{"accuracy", r.distances.accuracy}, {"completion", r.distances.completion},
                            {"chamfer", r.distances.chamfer},   {"precision", r.fscore.precision},
                            {"recall", r.fscore.recall},        {"fscore", r.fscore.fscore},
                            {"thresh", a.thresh},               {"samples", a.samples}};
  std::cout << j.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view stereo depth estimation, fusion and evaluation"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = runtime default)")->check(CLI::NonNegativeNumber);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "render a synthetic scene with ground-truth depth");
  synth->add_option("--kind", sa.kind, "plane, sphere or two-planes")->capture_default_str();
  synth->add_option("--frames", sa.frames, "number of views")->capture_default_str();
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--seed", sa.seed, "texture seed")->capture_default_str();
  synth->add_option("--width", sa.width)->capture_default_str();
  synth->add_option("--height", sa.height)->capture_default_str();

  TupleArgs ta;
  auto* tuples = app.add_subcommand("tuples", "select reference/source tuples");
  tuples->add_option("--scene", ta.scene, "scene manifest")->required();
  tuples->add_option("--mode", ta.mode, "pose or overlap")->capture_default_str();
  tuples->add_option("--out", ta.out, "tuples JSON")->required();
  tuples->add_option("--max-sources", ta.max_sources)->capture_default_str();

  DepthArgs da;
  auto* depth = app.add_subcommand("depth", "estimate depth for every tuple");
  depth->add_option("--scene", da.scene, "scene manifest")->required();
  depth->add_option("--tuples", da.tuples, "tuples JSON")->required();
  depth->add_option("--config", da.config, "pipeline config JSON");
  depth->add_option("--out", da.out, "output directory")->required();

  FuseArgs fa;
  auto* fuse = app.add_subcommand("fuse", "fuse depth maps into a TSDF and extract a mesh");
  fuse->add_option("--scene", fa.scene, "scene manifest")->required();
  fuse->add_option("--depth-dir", fa.depth_dir, "directory of <id>.mvsd depth maps");
  fuse->add_option("--config", fa.config, "pipeline config JSON (fusion section)");
  fuse->add_option("--voxel", fa.voxel)->capture_default_str();
  fuse->add_option("--max-depth", fa.max_depth)->capture_default_str();
  fuse->add_option("--out", fa.out, "output PLY")->required();
  fuse->add_flag("--gt", fa.gt, "fuse the scene's ground-truth depth instead");
  fuse->add_flag("--ascii", fa.ascii, "write ASCII PLY");

  EvalDepthArgs ea;
  auto* eval_depth = app.add_subcommand("eval-depth", "abs-rel and inlier ratio against ground truth");
  eval_depth->add_option("--pred-dir", ea.pred_dir)->required();
  eval_depth->add_option("--scene", ea.scene)->required();
  eval_depth->add_option("--report", ea.report, "JSON report path");

  EvalMeshArgs ma;
  auto* eval_mesh = app.add_subcommand("eval-mesh", "accuracy, completion, chamfer and F-score");
  eval_mesh->add_option("--pred", ma.pred)->required();
  eval_mesh->add_option("--gt", ma.gt)->required();
  eval_mesh->add_flag("--swap-acc-comp", ma.swap, "use the pred->gt accuracy convention");
  eval_mesh->add_option("--samples", ma.samples)->capture_default_str();
  eval_mesh->add_option("--thresh", ma.thresh)->capture_default_str();
  eval_mesh->add_option("--seed", ma.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  if (threads > 0) mvsa::set_num_threads(threads);

  try {
    if (*synth) return cmd_synth(sa);
    if (*tuples) return cmd_tuples(ta);
    if (*depth) return cmd_depth(da);
    if (*fuse) return cmd_fuse(fa);
    if (*eval_depth) return cmd_eval_depth(ea);
    if (*eval_mesh) return cmd_eval_mesh(ma);
  } catch (const mvsa::PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPartial;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kConfig;
}
