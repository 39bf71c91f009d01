// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pnloc/eval.hpp"
#include "pnloc/scene_files.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "test_util.hpp"

namespace pnloc {
namespace {

constexpr double kPi = 3.14159265358979323846;

// Independent oracle: angle of the relative unit quaternion, folded over
// the double cover.
double quaternion_angle_deg(const Pose& a, const Pose& b) {
  const Eigen::Quaterniond qa(a.rotation), qb(b.rotation);
  const double d = std::abs(qa.normalized().dot(qb.normalized()));
  return 2.0 * std::acos(std::min(1.0, d)) * 180.0 / kPi;
}

SyntheticSceneConfig smoke_scene() {
  SyntheticSceneConfig c;
  c.point_count = 2000;
  c.seed = 7;
  c.query_count = 10;
  c.reference_count = 0;
  return c;
}

const SceneBundle& smoke_bundle() {
  static const SceneBundle bundle = generate_scene(smoke_scene());
  return bundle;
}

TEST(RotationError, KnownAngles) {
  const Pose a;
  EXPECT_EQ(rotation_error_deg(a, a), 0.0);
  Pose b;
  b.rotation = Eigen::AngleAxisd(kPi / 2, Vec3::UnitZ()).toRotationMatrix();
  EXPECT_NEAR(rotation_error_deg(a, b), 90.0, 1e-12);
  b.rotation = Eigen::AngleAxisd(kPi, Vec3::UnitX()).toRotationMatrix();
  EXPECT_NEAR(rotation_error_deg(a, b), 180.0, 1e-9);
}

TEST(RotationError, MatchesQuaternionOracle) {
  CounterRng rng(31);
  for (int i = 0; i < 1000; ++i) {
    const Pose a = testing::random_pose(rng, 3.1), b = testing::random_pose(rng, 3.1);
    const double got = rotation_error_deg(a, b);
    EXPECT_NEAR(got, quaternion_angle_deg(a, b), 1e-9 * 180 / kPi * 1e3) << i;
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 180.0);
  }
  // Away from 0 and 180 degrees acos is well conditioned: check tightly.
  for (int i = 0; i < 1000; ++i) {
    const Pose a = testing::random_pose(rng, 3.1);
    Pose b = a;
    b.rotation = Eigen::AngleAxisd(rng.uniform(0.1, 3.0), testing::random_unit(rng)).toRotationMatrix() * a.rotation;
    EXPECT_NEAR(rotation_error_deg(a, b), quaternion_angle_deg(a, b), 1e-9) << i;
  }
}

TEST(RotationError, ClampsRoundOff) {
  Pose a;
  a.rotation = Mat3::Identity() * (1 + 1e-15);
  EXPECT_EQ(rotation_error_deg(a, Pose{}), 0.0);
}

TEST(TranslationError, UsesCameraCenters) {
  const Pose a = look_at(Vec3(1, 2, 3), Vec3(0, 0, 0));
  const Pose b = look_at(Vec3(1, 2, 3.5), Vec3(4, 0, 0));
  EXPECT_NEAR(translation_error(a, b), 0.5, 1e-12);
}

TEST(Metrics, MediansSkipFailuresAndRecallCountsThem) {
  std::vector<ErrorRow> rows = {
      {0, "ok", true, 0.01, 1.0},
      {1, "ok", true, 0.03, 3.0},
      {2, "NoMatches", false},
      {3, "ok", true, 0.20, 0.5},
      {4, "ok", true, 0.02, 7.0},
  };
  PipelineConfig config;
  const auto m = compute_metrics(rows, config, 10.0);
  EXPECT_EQ(m.queries, 5u);
  EXPECT_EQ(m.successes, 4u);
  EXPECT_EQ(m.failures, 1u);
  EXPECT_DOUBLE_EQ(m.median_translation_m, 0.025);
  EXPECT_DOUBLE_EQ(m.median_rotation_deg, 2.0);
  EXPECT_DOUBLE_EQ(m.recall, 2.0 / 5.0);
  // Scaled thresholds: 0.05 m and 0.1 deg.
  EXPECT_DOUBLE_EQ(m.scaled_recall, 0.0);
  rows[0].rotation_deg = 0.05;
  EXPECT_DOUBLE_EQ(compute_metrics(rows, config, 10.0).scaled_recall, 1.0 / 5.0);
}

TEST(Metrics, NoSuccessesGiveNullMedians) {
  std::vector<ErrorRow> rows = {{0, "NoConsensus", false}};
  const auto j = metrics_json(compute_metrics(rows, PipelineConfig{}, 1.0));
  EXPECT_TRUE(j["median_translation_m"].is_null());
  EXPECT_EQ(j["failures"], 1);
}

TEST(Metrics, ConfigHashTracksConfig) {
  PipelineConfig a, b;
  EXPECT_EQ(config_hash(to_json(a)), config_hash(to_json(b)));
  b.refine.iterations = 100;
  EXPECT_NE(config_hash(to_json(a)), config_hash(to_json(b)));
  EXPECT_EQ(config_hash(to_json(a)).size(), 16u);
}

TEST(Pipeline, SmokeSceneLocalizesEveryQuery) {
  const auto start = std::chrono::steady_clock::now();
  const auto& bundle = smoke_bundle();
  const auto results = run_pipeline(bundle, PipelineConfig{});
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto m = compute_metrics(results, PipelineConfig{}, bundle.diameter());
  for (const auto& r : results) EXPECT_EQ(r.status, "ok") << "query " << r.query_id;
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_LT(seconds, 60.0);
}

TEST(Pipeline, WithoutRefinementEqualsStructureStage) {
  const auto& bundle = smoke_bundle();
  PipelineConfig off;
  off.method = RefineMethod::None;
  const auto a = run_pipeline(bundle, off);
  const auto b = run_pipeline(bundle, PipelineConfig{});
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t q = 0; q < a.size(); ++q) {
    ASSERT_TRUE(a[q].stage1 && b[q].stage1);
    EXPECT_FALSE(a[q].refined.has_value());
    EXPECT_EQ(a[q].final_pose()->rotation, b[q].stage1->rotation);
    EXPECT_EQ(a[q].final_pose()->translation, b[q].stage1->translation);
  }
}

TEST(Pipeline, RerunGivesIdenticalOutputs) {
  const auto& bundle = smoke_bundle();
  PipelineConfig config;
  config.refine.iterations = 40;
  std::string csv[2], json[2];
  for (int k = 0; k < 2; ++k) {
    const auto results = run_pipeline(bundle, config);
    std::ostringstream os;
    write_results_csv(os, results);
    csv[k] = os.str();
    json[k] = metrics_json(compute_metrics(results, config, bundle.diameter())).dump(2);
  }
  EXPECT_EQ(csv[0], csv[1]);
  EXPECT_EQ(json[0], json[1]);
  // Worker count does not change the outcome.
  config.threads = 3;
  std::ostringstream os;
  write_results_csv(os, run_pipeline(bundle, config));
  EXPECT_EQ(os.str(), csv[0]);
}

TEST(SceneDir, RoundTripKeepsEverythingLocalizationReads) {
  const auto& bundle = smoke_bundle();
  const auto dir = std::filesystem::temp_directory_path() / "pnloc_eval_test_scene";
  std::filesystem::remove_all(dir);
  save_scene_dir(bundle, dir);
  const auto loaded = load_scene_dir(dir);

  EXPECT_EQ(to_json(loaded.config), to_json(bundle.config));
  ASSERT_EQ(loaded.field.size(), bundle.field.size());
  for (std::size_t i = 0; i < bundle.field.size(); i += 97) {
    for (int d = 0; d < 3; ++d)
      EXPECT_EQ(loaded.field.positions()[i][d], double(float(bundle.field.positions()[i][d])));
    EXPECT_EQ(loaded.field.scores()[i], double(float(bundle.field.scores()[i])));
  }
  EXPECT_EQ(loaded.render.sampler.n_samples, bundle.render.sampler.n_samples);
  EXPECT_EQ(loaded.render.sampler.near, bundle.render.sampler.near);
  EXPECT_EQ(loaded.render.sampler.far, bundle.render.sampler.far);
  EXPECT_NEAR(loaded.head.kernel_width, bundle.head.kernel_width, 1e-15);
  EXPECT_NEAR(loaded.head.density_bias, bundle.head.density_bias, 1e-12);
  ASSERT_EQ(loaded.queries.size(), bundle.queries.size());
  for (std::size_t q = 0; q < bundle.queries.size(); ++q) {
    EXPECT_LT((loaded.queries[q].gt_pose.rotation - bundle.queries[q].gt_pose.rotation).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(translation_error(loaded.queries[q].gt_pose, bundle.queries[q].gt_pose), 1e-9);
    EXPECT_EQ(loaded.queries[q].descriptors.width(), bundle.queries[q].descriptors.width());
  }
  // The reloaded scene still localizes, and deterministically.
  PipelineConfig config;
  config.refine.iterations = 40;
  std::ostringstream a, b;
  const auto results = run_pipeline(loaded, config);
  write_results_csv(a, results);
  write_results_csv(b, run_pipeline(loaded, config));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(compute_metrics(results, config, loaded.diameter()).recall, 1.0);
  std::filesystem::remove_all(dir);
}

TEST(Pipeline, ReportRegeneratesFromCsvAndIgnoresQueryOrder) {
  const auto& bundle = smoke_bundle();
  PipelineConfig config;
  config.refine.iterations = 40;
  auto results = run_pipeline(bundle, config);
  const auto live = metrics_json(compute_metrics(results, config, bundle.diameter())).dump();
  std::stringstream csv;
  write_results_csv(csv, results);
  const auto rows = read_results_csv(csv);
  EXPECT_EQ(metrics_json(compute_metrics(rows, config, bundle.diameter())).dump(), live);
  std::reverse(results.begin(), results.end());
  std::swap(results[1], results[4]);
  EXPECT_EQ(metrics_json(compute_metrics(results, config, bundle.diameter())).dump(), live);
}

TEST(Pipeline, FailuresAreCapturedPerQuery) {
  auto bundle = generate_scene(smoke_scene());
  bundle.queries[2].descriptors.data.data().assign(bundle.queries[2].descriptors.data.data().size(), 0.0f);
  PipelineConfig config;
  config.method = RefineMethod::None;
  const auto results = run_pipeline(bundle, config);
  EXPECT_EQ(results[2].status, "NoMatches");
  EXPECT_FALSE(results[2].final_pose().has_value());
  EXPECT_EQ(results[3].status, "ok");
  EXPECT_EQ(compute_metrics(results, config, bundle.diameter()).failures, 1u);
}

TEST(Ablation, ModesMapToConfigs) {
  PipelineConfig base;
  base.refine.iterations = 77;
  EXPECT_EQ(ablation_config(base, AblationMode::NoRefine).method, RefineMethod::None);
  EXPECT_FALSE(ablation_config(base, AblationMode::NoBlankMask).refine.use_blank_mask);
  const auto photo = ablation_config(base, AblationMode::PhotometricBaseline);
  EXPECT_EQ(photo.method, RefineMethod::Photometric);
  EXPECT_EQ(photo.photometric.iterations, 77);
  EXPECT_EQ(ablation_config(base, AblationMode::Full).method, RefineMethod::Warping);
  EXPECT_EQ(parse_ablation_mode("no_blank_mask"), AblationMode::NoBlankMask);
  EXPECT_THROW(parse_ablation_mode("nope"), Error);
}

TEST(ScoreSweep, ZeroThresholdMatchesUnfilteredRunAndCountsShrink) {
  auto c = smoke_scene();
  c.structured_reliability = true;
  c.query_count = 4;
  const auto bundle = generate_scene(c);
  PipelineConfig config;
  config.method = RefineMethod::None;
  const std::vector<double> thresholds = {0.0, 0.3, 0.5, 0.7, 0.9};
  const auto rows = sweep_score_threshold(bundle, thresholds, config, 1);
  ASSERT_EQ(rows.size(), thresholds.size());
  EXPECT_EQ(rows[0].candidates, bundle.field.size());
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LT(rows[i].candidates, rows[i - 1].candidates);

  PipelineConfig unfiltered = config;
  unfiltered.match.score_threshold = 0;
  const auto base = run_pipeline(bundle, unfiltered);
  auto baseline = compute_metrics(base, unfiltered, bundle.diameter(), rows[0].metrics.label);
  baseline.config_hash = rows[0].metrics.config_hash;
  EXPECT_EQ(metrics_json(rows[0].metrics).dump(), metrics_json(baseline).dump());
}

// ---------------------------------------------------------------- photometric baseline

TEST(PhotometricBaseline, GroundTruthInitStays) {
  const auto& bundle = smoke_bundle();
  const auto& q = bundle.queries[0];
  RenderSettings rs = bundle.render;
  rs.sampler.seed = q.render_seed;
  PhotometricConfig pc;
  pc.iterations = 10;
  const auto r = photometric_refine_baseline(bundle.field, bundle.head, rs, q.image, q.camera, q.gt_pose, pc);
  EXPECT_EQ(r.status, RefineStatus::Ok);
  EXPECT_LT(rotation_error_deg(r.pose, q.gt_pose), 1e-4);
  EXPECT_LT(translation_error(r.pose, q.gt_pose), 1e-4 * bundle.diameter());
  EXPECT_EQ(r.trace.size(), 11u);
}

TEST(PhotometricBaseline, ImprovesPerturbedPoseAndFlagsDivergence) {
  const auto& bundle = smoke_bundle();
  const auto& q = bundle.queries[1];
  CounterRng rng(3);
  Se3Tangent xi;
  xi << testing::random_unit(rng) * (1.0 * kPi / 180), testing::random_unit(rng) * 0.02;
  const Pose init = se3_exp(xi) * q.gt_pose;
  PhotometricConfig pc;
  pc.iterations = 60;
  const auto r = photometric_refine_baseline(bundle.field, bundle.head, bundle.render, q.image, q.camera, init, pc);
  EXPECT_LE(r.trace[static_cast<std::size_t>(r.best_iter)].loss, r.trace.front().loss);

  pc.optimizer.learning_rate = 2.0;
  pc.iterations = 20;
  const auto d = photometric_refine_baseline(bundle.field, bundle.head, bundle.render, q.image, q.camera, init, pc);
  EXPECT_EQ(d.status, RefineStatus::Diverged);
}

}  // namespace
}  // namespace pnloc
