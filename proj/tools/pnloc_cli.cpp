// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

// pnloc command-line driver: scene generation, adaptation training,
// rendering, localization, evaluation, score sweeps and ablations.

#include "pnloc/adaptation.hpp"
#include "pnloc/eval.hpp"
#include "pnloc/io.hpp"
#include "pnloc/scene.hpp"
#include "pnloc/scene_files.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace pnloc;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out_dir = "out";
};

struct SceneFlags {
  std::string kind = "room";
  std::size_t points = 5000;
  std::string descriptors = "position-hash";
  double descriptor_noise = 0;
  int queries = 10;
  int references = 8;
  int width = 64;
  int height = 0;  // 0: same as width
  double focal = 0;  // 0: 0.875 x width
  int samples_per_ray = 256;
  unsigned open_faces = 0;
  bool structured_reliability = false;
  std::size_t max_keypoints = 200;

  void add(CLI::App* app) {
    app->add_option("--kind", kind, "room, spheres or blobs")->capture_default_str();
    app->add_option("--points", points, "point count")->capture_default_str();
    app->add_option("--descriptors", descriptors, "position-hash or random-orthogonal")->capture_default_str();
    app->add_option("--descriptor-noise", descriptor_noise, "per-dimension sigma on query descriptors")
        ->capture_default_str();
    app->add_option("--queries", queries, "query views")->capture_default_str();
    app->add_option("--references", references, "reference poses")->capture_default_str();
    app->add_option("--width", width, "image width")->capture_default_str();
    app->add_option("--height", height, "image height (default: width)");
    app->add_option("--focal", focal, "focal length in pixels (default 0.875 x width)");
    app->add_option("--samples-per-ray", samples_per_ray, "volume samples per ray")->capture_default_str();
    app->add_option("--open-faces", open_faces, "room faces left open, bitmask -x,+x,-y,+y,-z,+z")
        ->capture_default_str();
    app->add_flag("--structured-reliability", structured_reliability,
                  "spatially varying point scores with matching descriptor noise");
    app->add_option("--max-keypoints", max_keypoints, "synthetic detector keypoints per query")
        ->capture_default_str();
  }

  SyntheticSceneConfig config(std::uint64_t seed) const {
    SyntheticSceneConfig c;
    c.kind = parse_scene_kind(kind);
    c.point_count = points;
    c.descriptors = parse_descriptor_scheme(descriptors);
    c.descriptor_noise = descriptor_noise;
    c.seed = seed;
    c.query_count = queries;
    c.reference_count = references;
    const double f = focal > 0 ? focal : 0.875 * width;
    const int h = height > 0 ? height : width;
    c.camera = {f, f, width / 2.0 - 0.5, h / 2.0 - 0.5, width, h};
    c.samples_per_ray = samples_per_ray;
    c.open_faces = open_faces;
    c.structured_reliability = structured_reliability;
    c.max_keypoints = max_keypoints;
    return c;
  }
};

struct PipelineFlags {
  int refine_iters = 250;
  std::size_t refine_samples = 2048;
  double lr = 1e-3;
  int rerender_every = 0;
  bool no_blank_mask = false;
  bool photometric = false;
  bool no_refine = false;
  double score_threshold = 0.7;
  double near = 0;  // 0: keep the scene's value
  double far = 0;

  void add(CLI::App* app, bool modes = true) {
    app->add_option("--refine-iters", refine_iters, "refinement iterations")->capture_default_str();
    app->add_option("--refine-samples", refine_samples, "warping samples per round")->capture_default_str();
    app->add_option("--lr", lr, "refinement learning rate")->capture_default_str();
    app->add_option("--rerender-every", rerender_every, "re-render the reference every k iterations (0: once)")
        ->capture_default_str();
    app->add_option("--score-threshold", score_threshold, "minimum point score for matching")->capture_default_str();
    app->add_option("--near", near, "ray near bound override");
    app->add_option("--far", far, "ray far bound override");
    if (modes) {
      app->add_flag("--no-blank-mask", no_blank_mask, "sample blank reference pixels too");
      app->add_flag("--photometric-baseline", photometric, "refine with the photometric baseline");
      app->add_flag("--no-refine", no_refine, "stop after the structure stage");
    }
  }

  PipelineConfig config(const Globals& g) const {
    PipelineConfig c;
    c.seed = g.seed;
    c.threads = g.threads;
    c.match.score_threshold = score_threshold;
    c.refine.iterations = refine_iters;
    c.refine.n_samples = refine_samples;
    c.refine.optimizer.learning_rate = lr;
    c.refine.rerender_every = rerender_every;
    c.refine.use_blank_mask = !no_blank_mask;
    c.photometric.iterations = refine_iters;
    c.photometric.optimizer.learning_rate = lr;
    c.method = no_refine ? RefineMethod::None : photometric ? RefineMethod::Photometric : RefineMethod::Warping;
    c.refine.validate();
    return c;
  }

  void apply_bounds(SceneBundle& bundle) const {
    if (near > 0) bundle.render.sampler.near = near;
    if (far > 0) bundle.render.sampler.far = far;
    bundle.render.sampler.validate();
  }
};

fs::path out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / name;
}

template <typename Fn>
void write_stream(const fs::path& path, Fn&& fn) {
  std::ostringstream os;
  fn(os);
  write_text(path, os.str());
}

void write_run_outputs(const Globals& g, const std::vector<LocalizationResult>& results,
                       const PipelineConfig& config, double diameter, const std::string& title) {
  const auto metrics = compute_metrics(results, config, diameter, title);
  write_stream(out_path(g, "results.csv"), [&](std::ostream& os) { write_results_csv(os, results); });
  write_stream(out_path(g, "timings.csv"), [&](std::ostream& os) { write_timings_csv(os, results); });
  auto j = metrics_json(metrics);
  j["config"] = to_json(config);
  write_text(out_path(g, "metrics.json"), j.dump(2) + "\n");
  const std::vector<MetricsReport> reports{metrics};
  write_stream(out_path(g, "report.md"), [&](std::ostream& os) { write_report_md(os, reports, title, config); });
  std::cout << title << ": " << metrics.queries << " queries, " << metrics.failures << " failed, median "
            << metrics.median_translation_m << " m / " << metrics.median_rotation_deg << " deg, recall "
            << metrics.recall << ", scaled recall " << metrics.scaled_recall << "\n";
}

/// Query image beside the render at the estimated pose.
void save_side_by_side(const fs::path& path, const ImageD& query, const ImageD& render) {
  ImageD out(query.width() * 2, query.height(), 3);
  for (int y = 0; y < query.height(); ++y)
    for (int x = 0; x < query.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        out.at(x, y, c) = query.at(x, y, c);
        out.at(x + query.width(), y, c) = render.at(x, y, c);
      }
  save_png(path, out);
}

void save_renders(const Globals& g, const SceneBundle& bundle, const std::vector<LocalizationResult>& results) {
  const auto dir = out_path(g, "renders");
  fs::create_directories(dir);
  for (const auto& r : results) {
    const auto pose = r.final_pose();
    if (!pose) continue;
    const auto& q = bundle.queries[r.query_id];
    const auto view = render_view(bundle.field, q.camera, *pose, bundle.render, bundle.head);
    save_side_by_side(dir / (query_stem(r.query_id) + "_compare.png"), q.image, view.color);
  }
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pnloc: point-field visual localization toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();

  // build-scene
  SceneFlags build_flags;
  auto* build = app.add_subcommand("build-scene", "generate a synthetic scene directory");
  build_flags.add(build);

  // train-adapt
  SceneFlags train_flags;
  int train_steps = 200;
  double train_lr = 1e-3;
  std::string model_out;
  auto* train = app.add_subcommand("train-adapt", "fit the adaptation MLP on a synthetic scene");
  train_flags.add(train);
  train->add_option("--steps", train_steps, "optimizer steps")->capture_default_str();
  train->add_option("--train-lr", train_lr, "learning rate")->capture_default_str();
  train->add_option("--out", model_out, "model path (default <out-dir>/model.pnml)");

  // render
  std::string render_scene, render_pose, render_pose_file, render_camera;
  auto* render = app.add_subcommand("render", "render a scene directory at a pose");
  render->add_option("--scene-dir", render_scene, "directory written by build-scene")->required();
  render->add_option("--pose", render_pose, "\"qw qx qy qz tx ty tz\" (world-to-camera)");
  render->add_option("--pose-file", render_pose_file, "file holding a pose line");
  render->add_option("--camera", render_camera, "\"fx fy cx cy width height\" (default: scene camera)");
  PipelineFlags render_bounds;
  render->add_option("--near", render_bounds.near, "ray near bound override");
  render->add_option("--far", render_bounds.far, "ray far bound override");
  int render_spr = 0;
  render->add_option("--samples-per-ray", render_spr, "override samples per ray");

  // localize
  std::string loc_scene;
  bool loc_save_renders = false;
  PipelineFlags loc_flags;
  auto* localize = app.add_subcommand("localize", "localize the queries of a scene directory");
  localize->add_option("--scene-dir", loc_scene, "directory written by build-scene")->required();
  localize->add_flag("--save-renders", loc_save_renders, "write query/render side-by-side PNGs");
  loc_flags.add(localize);

  // eval
  SceneFlags eval_scene;
  PipelineFlags eval_flags;
  bool eval_save_renders = false;
  auto* eval = app.add_subcommand("eval", "generate a scene and evaluate the pipeline on it");
  eval_scene.add(eval);
  eval_flags.add(eval);
  eval->add_flag("--save-renders", eval_save_renders, "write query/render side-by-side PNGs");

  // sweep-score
  SceneFlags sweep_scene;
  PipelineFlags sweep_flags;
  std::string thresholds = "0,0.3,0.5,0.7,0.8";
  int sweep_repeats = 3;
  auto* sweep = app.add_subcommand("sweep-score", "matching time and recall across score thresholds");
  sweep_scene.add(sweep);
  sweep_flags.add(sweep);
  sweep->add_option("--thresholds", thresholds, "comma-separated S_t values")->capture_default_str();
  sweep->add_option("--timing-repeats", sweep_repeats, "matching passes per threshold (best is kept)")
      ->capture_default_str();

  // ablate
  SceneFlags ablate_scene;
  PipelineFlags ablate_flags;
  std::string modes = "no_refine,no_blank_mask,photometric_baseline,full";
  auto* ablate_cmd = app.add_subcommand("ablate", "compare refinement variants on one scene");
  ablate_scene.add(ablate_cmd);
  ablate_flags.add(ablate_cmd, false);
  ablate_cmd->add_option("--modes", modes, "comma-separated modes")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*build) {
      const auto bundle = generate_scene(build_flags.config(g.seed));
      fs::create_directories(g.out_dir);
      save_scene_dir(bundle, g.out_dir);
      std::cout << "scene: " << bundle.field.size() << " points, " << bundle.queries.size()
                << " queries, diameter " << bundle.diameter() << " m -> " << g.out_dir << "\n";
    } else if (*train) {
      auto c = train_flags.config(g.seed);
      c.query_count = 0;
      const auto bundle = generate_scene(c);
      auto model = AdaptationModel::for_field(bundle.field, bundle.config.feature_dim, kDefaultAdaptationHidden,
                                              derive_seed(g.seed, 11));
      TrainConfig tc;
      tc.steps = train_steps;
      tc.learning_rate = train_lr;
      tc.seed = derive_seed(g.seed, 12);
      const auto result = train_adaptation(model, TrainingSet{bundle.field, bundle.point_colors}, bundle.head, tc);
      const fs::path path = model_out.empty() ? out_path(g, "model.pnml") : fs::path(model_out);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      save_model(path, model);
      save_point_field(out_path(g, "field_adapted.pnpf"), apply_adaptation(bundle.field, model));
      write_stream(out_path(g, "train_trace.csv"), [&](std::ostream& os) {
        os << "step,loss\n" << std::setprecision(17);
        for (std::size_t i = 0; i < result.loss_trace.size(); ++i) os << i << ',' << result.loss_trace[i] << '\n';
      });
      std::cout << "trained " << train_steps << " steps, final loss " << result.final_loss << " -> " << path.string()
                << "\n";
    } else if (*render) {
      auto bundle = load_scene_dir(render_scene);
      render_bounds.apply_bounds(bundle);
      if (render_spr > 0) bundle.render.sampler.n_samples = render_spr;
      Pose pose;
      if (!render_pose.empty()) {
        pose = parse_pose(render_pose);
      } else if (!render_pose_file.empty()) {
        pose = parse_pose(read_text(render_pose_file));
      } else {
        require(!bundle.queries.empty(), "no --pose given and the scene has no queries");
        pose = bundle.queries.front().gt_pose;
      }
      const Camera cam = render_camera.empty() ? bundle.config.camera : parse_camera(render_camera);
      bundle.render.threads = g.threads;
      const auto view = render_view(bundle.field, cam, pose, bundle.render, bundle.head);
      save_image(out_path(g, "render.pnim"), view.color);
      save_png(out_path(g, "render.png"), view.color);
      save_depth(out_path(g, "depth.pndp"), view.depth);
      save_mask(out_path(g, "valid.pnmk"), view.valid);
      std::cout << "rendered " << cam.width << "x" << cam.height << ", valid fraction " << view.valid_fraction()
                << "\n";
    } else if (*localize) {
      auto bundle = load_scene_dir(loc_scene);
      loc_flags.apply_bounds(bundle);
      const auto config = loc_flags.config(g);
      const auto results = run_pipeline(bundle, config);
      write_run_outputs(g, results, config, bundle.diameter(), "localize");
      if (loc_save_renders) save_renders(g, bundle, results);
    } else if (*eval) {
      auto bundle = generate_scene(eval_scene.config(g.seed));
      eval_flags.apply_bounds(bundle);
      const auto config = eval_flags.config(g);
      const auto results = run_pipeline(bundle, config);
      write_run_outputs(g, results, config, bundle.diameter(), "eval");
      if (eval_save_renders) save_renders(g, bundle, results);
    } else if (*sweep) {
      auto bundle = generate_scene(sweep_scene.config(g.seed));
      sweep_flags.apply_bounds(bundle);
      const auto config = sweep_flags.config(g);
      const auto ts = parse_list(thresholds);
      const auto rows = sweep_score_threshold(bundle, ts, config, sweep_repeats);
      write_stream(out_path(g, "sweep.csv"), [&](std::ostream& os) { write_sweep_csv(os, rows); });
      write_stream(out_path(g, "sweep_timings.csv"), [&](std::ostream& os) { write_sweep_timings_csv(os, rows); });
      std::vector<MetricsReport> reports;
      for (const auto& r : rows) reports.push_back(r.metrics);
      write_stream(out_path(g, "report.md"), [&](std::ostream& os) {
        write_report_md(os, reports, "score sweep", config);
        os << "\n| S_t | candidates | matching s (all queries) |\n|---|---|---|\n";
        for (const auto& r : rows) os << "| " << r.threshold << " | " << r.candidates << " | " << r.match_seconds << " |\n";
      });
      for (const auto& r : rows) {
        std::cout << "S_t=" << r.threshold << ": " << r.candidates << " candidates, matching " << r.match_seconds
                  << " s, recall " << r.metrics.recall << "\n";
      }
    } else if (*ablate_cmd) {
      auto bundle = generate_scene(ablate_scene.config(g.seed));
      ablate_flags.apply_bounds(bundle);
      const auto base = ablate_flags.config(g);
      std::vector<AblationMode> list;
      std::stringstream ss(modes);
      std::string m;
      while (std::getline(ss, m, ',')) list.push_back(parse_ablation_mode(m));
      const auto runs = ablate(bundle, base, list);
      write_stream(out_path(g, "ablation.csv"), [&](std::ostream& os) { write_ablation_csv(os, runs); });
      nlohmann::json j = nlohmann::json::array();
      std::vector<MetricsReport> reports;
      for (const auto& r : runs) {
        j.push_back(metrics_json(r.metrics));
        reports.push_back(r.metrics);
        write_stream(out_path(g, std::string("results_") + to_string(r.mode) + ".csv"),
                     [&](std::ostream& os) { write_results_csv(os, r.results); });
      }
      write_text(out_path(g, "ablation.json"), j.dump(2) + "\n");
      write_stream(out_path(g, "ablation_timings.csv"), [&](std::ostream& os) {
        os << "mode,wall_seconds\n";
        for (const auto& r : runs) os << to_string(r.mode) << ',' << r.wall_seconds << '\n';
      });
      write_stream(out_path(g, "report.md"), [&](std::ostream& os) {
        write_report_md(os, reports, "ablation", base);
        os << "\n| mode | wall s |\n|---|---|\n";
        for (const auto& r : runs) os << "| " << to_string(r.mode) << " | " << r.wall_seconds << " |\n";
      });
      for (const auto& r : runs) {
        std::cout << to_string(r.mode) << ": median " << r.metrics.median_translation_m << " m / "
                  << r.metrics.median_rotation_deg << " deg, wall " << r.wall_seconds << " s\n";
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
