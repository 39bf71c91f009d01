// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pnloc/warp.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <set>
#include <sstream>

#include "box_room.hpp"
#include "test_util.hpp"

namespace pnloc {
namespace {

constexpr double kPi = 3.14159265358979323846;

Camera room_camera() { return testing::test_camera(64, 64, 56); }

Pose perturb(const Pose& pose, CounterRng& rng, double angle_rad, double translation) {
  Se3Tangent xi;
  xi << testing::random_unit(rng) * angle_rad, testing::random_unit(rng) * translation;
  return se3_exp(xi) * pose;
}

ImageD constant_image(int w, int h, double v) { return ImageD(w, h, 3, v); }

RenderedView flat_reference(int w, int h, double depth, double color) {
  RenderedView r;
  r.camera = testing::test_camera(w, h, w);
  r.color = ImageD(w, h, 3, color);
  r.depth = ImageD(w, h, 1, depth);
  r.valid = Mask(w, h, 1, 1);
  return r;
}

TEST(WarpPixel, IdentityIsExact) {
  CounterRng rng(3);
  const Camera cam = testing::test_camera(640, 480, 500);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const Pose pose = testing::random_pose(rng);
    const Vec2 p(rng.uniform(0, 639), rng.uniform(0, 479));
    const double depth = rng.uniform(kDefaultDepthMin, 20);
    worst = std::max(worst, (warp_pixel(p, depth, pose, pose, cam) - p).norm());
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(WarpPixel, ForwardMotionScalesAboutPrincipalPoint) {
  const Camera cam = testing::test_camera(100, 100, 80);
  const double depth = 4.0, forward = 1.0;
  Pose moved;
  moved.translation = Vec3(0, 0, -forward);
  const Vec2 c(cam.cx, cam.cy);
  for (const Vec2& p : {Vec2(10, 20), Vec2(90, 50), Vec2(50, 50), Vec2(3.5, 97.25)}) {
    const Vec2 out = warp_pixel(p, depth, Pose{}, moved, cam);
    EXPECT_LT((out - (c + (p - c) * depth / (depth - forward))).norm(), 1e-9);
  }
}

TEST(WarpPixel, MatchesStepByStepComposition) {
  CounterRng rng(11);
  const Camera cam = testing::test_camera(320, 240, 300);
  for (int i = 0; i < 200; ++i) {
    const Pose render = testing::random_pose(rng);
    const Pose candidate = perturb(render, rng, 0.2, 0.3);
    const Vec2 p(rng.uniform(0, 319), rng.uniform(0, 239));
    const double depth = rng.uniform(1, 5);
    const Vec3 in_render = backproject(cam, p, depth);
    const Vec3 world = render.rotation.transpose() * (in_render - render.translation);
    const Vec3 in_candidate = candidate.rotation * world + candidate.translation;
    if (in_candidate.z() <= 1e-12) continue;
    const Vec2 expect(cam.fx * in_candidate.x() / in_candidate.z() + cam.cx,
                      cam.fy * in_candidate.y() / in_candidate.z() + cam.cy);
    EXPECT_LT((warp_pixel(p, depth, render, candidate, cam) - expect).norm(), 1e-7);
  }
}

TEST(WarpPixel, ComposesThroughIntermediatePose) {
  // Fronto-parallel plane z = 3 in the world: depths along the chain are
  // the plane depths in each frame.
  CounterRng rng(5);
  const Camera cam = testing::test_camera(200, 200, 180);
  for (int i = 0; i < 100; ++i) {
    const Pose render{};
    const Pose a = perturb(render, rng, 0.05, 0.2);
    const Pose b = perturb(render, rng, 0.05, 0.2);
    const Vec2 p(rng.uniform(20, 180), rng.uniform(20, 180));
    const double depth = 3.0;
    const Vec2 pa = warp_pixel(p, depth, render, a, cam);
    const double depth_a = a(render.inverse()(backproject(cam, p, depth))).z();
    const Vec2 direct = warp_pixel(p, depth, render, b, cam);
    const Vec2 chained = warp_pixel(pa, depth_a, a, b, cam);
    EXPECT_LT((direct - chained).norm(), 1e-6);
  }
}

TEST(WarpPixel, BehindCameraThrows) {
  const Camera cam = testing::test_camera(10, 10, 10);
  Pose back;
  back.translation = Vec3(0, 0, -5);
  EXPECT_THROW(
      {
        try {
          warp_pixel(Vec2(5, 5), 2.0, Pose{}, back, cam);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), ErrorCode::BehindCamera);
          throw;
        }
      },
      Error);
  EXPECT_FALSE(try_warp_pixel(Vec2(5, 5), 2.0, Pose{}, back, cam).has_value());
}

TEST(SelectValidSamples, AllBlankIsTooFewValid) {
  const auto ref = flat_reference(16, 16, 0.0, 0.5);
  try {
    select_valid_samples(ref, 10, 1);
    FAIL() << "expected TooFewValid";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewValid);
  }
}

TEST(SelectValidSamples, RecordedFixtureSequence) {
  const auto ref = flat_reference(32, 32, 1.0, 0.5);
  const auto s = select_valid_samples(ref, 4, 2024);
  const std::vector<Vec2> recorded{Vec2(29, 19), Vec2(3, 3), Vec2(17, 9), Vec2(22, 3)};
  ASSERT_EQ(s.size(), recorded.size());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s[i], recorded[i]) << i;
  EXPECT_EQ(select_valid_samples(ref, 4, 2024), s);
}

TEST(SelectValidSamples, OnlyValidDistinctPixels) {
  auto ref = flat_reference(40, 30, 1.0, 0.5);
  CounterRng rng(8);
  for (auto& d : ref.depth.data()) d = rng.uniform() < 0.4 ? rng.uniform(0, 0.0099) : rng.uniform(0.01, 3);
  Mask mask(40, 30, 1, 1);
  for (int x = 0; x < 10; ++x)
    for (int y = 0; y < 30; ++y) mask.at(x, y) = 0;
  const auto s = select_valid_samples(ref, 300, 9, kDefaultDepthMin, &mask);
  ASSERT_EQ(s.size(), 300u);
  std::set<std::pair<int, int>> seen;
  for (const auto& p : s) {
    const int x = static_cast<int>(p.x()), y = static_cast<int>(p.y());
    EXPECT_GE(ref.depth.at(x, y), 0.01);
    EXPECT_GE(x, 10);
    EXPECT_TRUE(seen.insert({x, y}).second);
  }
  // Asking for more than exist returns every eligible pixel.
  const auto all = select_valid_samples(ref, 1u << 20, 9, kDefaultDepthMin, &mask);
  std::size_t eligible = 0;
  for (int y = 0; y < 30; ++y)
    for (int x = 10; x < 40; ++x) eligible += ref.depth.at(x, y) >= 0.01;
  EXPECT_EQ(all.size(), eligible);
}

TEST(WarpingLoss, ZeroAtRenderPoseWithSelfQuery) {
  const testing::BoxRoom room;
  const Camera cam = room_camera();
  const auto ref = room.render(cam, testing::box_room_pose());
  WarpProblem problem{ref.color, ref, select_valid_samples(ref, 512, 1)};
  const auto eval = warping_loss(problem, ref.render_pose);
  EXPECT_EQ(eval.loss, 0.0);
  EXPECT_EQ(eval.contributing, 512u);
  EXPECT_EQ(warping_loss_gradient(problem, ref.render_pose).norm(), 0.0);
}

TEST(WarpingLoss, TexturelessIsZeroEverywhere) {
  auto ref = flat_reference(32, 32, 2.0, 0.3);
  WarpProblem problem{constant_image(32, 32, 0.3), ref, select_valid_samples(ref, 100, 4)};
  CounterRng rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto eval = warping_loss(problem, perturb(Pose{}, rng, 0.05, 0.1));
    EXPECT_LT(eval.loss, 1e-15);  // bilinear weights sum to 1 up to rounding
  }
}

TEST(WarpingLoss, HandBuiltFourSamples) {
  // Identity pose, so each sample reads the query at its own pixel.
  auto ref = flat_reference(8, 8, 1.0, 0.0);
  ImageD query(8, 8, 3, 0.0);
  ref.color.at(1, 1, 0) = 0.5;                     // |(0.5,0,0) - 0| = 0.5
  query.at(2, 3, 1) = 0.3, query.at(2, 3, 2) = 0.4;  // 0.5
  query.at(4, 4, 0) = 1.0, ref.color.at(4, 4, 0) = 1.0;  // 0
  query.at(6, 5, 0) = 0.2, query.at(6, 5, 1) = 0.2, query.at(6, 5, 2) = 0.1;  // 0.3
  WarpProblem problem{query, ref, {Vec2(1, 1), Vec2(2, 3), Vec2(4, 4), Vec2(6, 5)}};
  const auto eval = warping_loss(problem, Pose{});
  EXPECT_NEAR(eval.loss, (0.5 + 0.5 + 0.0 + 0.3) / 4, 1e-15);
  ASSERT_EQ(eval.residuals.size(), 4u);
  EXPECT_NEAR(eval.residuals[3], 0.3, 1e-15);
}

TEST(WarpingLoss, DroppedSamplesAreCountedNotSummed) {
  auto ref = flat_reference(8, 8, 1.0, 0.0);
  ImageD query(8, 8, 3, 0.0);
  query.at(4, 3, 0) = 0.6;
  Pose shifted;
  shifted.translation = Vec3(0.5, 0, 0);  // +4 px in x
  WarpProblem problem{query, ref, {Vec2(6, 3), Vec2(7, 3), Vec2(0, 3)}};
  // (6,3) -> (10,3) out, (7,3) -> (11,3) out, (0,3) -> (4,3) in.
  const auto eval = warping_loss(problem, shifted);
  EXPECT_EQ(eval.contributing, 1u);
  EXPECT_EQ(eval.dropped, 2u);
  EXPECT_NEAR(eval.loss, 0.6, 1e-15);
  EXPECT_TRUE(std::isnan(eval.residuals[0]));

  Pose away;
  away.translation = Vec3(100, 0, 0);
  try {
    warping_loss(problem, away);
    FAIL() << "expected NoContributingSamples";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoContributingSamples);
  }
}

TEST(WarpingLoss, BlankMaskDecomposition) {
  testing::BoxRoom room;
  room.open_faces = 1u << 3;  // the wall in front is missing
  const Camera cam = room_camera();
  const Pose truth = look_at(Vec3(0.05, -0.15, 0.02), Vec3(0.6, 0.85, 0.1));
  const auto ref = room.render(cam, truth);
  const auto query = room.render(cam, perturb(truth, *std::make_unique<CounterRng>(4), 0.02, 0.03));
  std::size_t blank = 0;
  for (auto v : ref.valid.data()) blank += v == 0;
  ASSERT_GT(blank, 200u);

  const auto masked = select_valid_samples(ref, 1u << 20, 0);
  const auto all = select_valid_samples(ref, 1u << 20, 0, kDefaultDepthMin, nullptr, false);
  ASSERT_EQ(all.size(), ref.valid.data().size());
  WarpProblem with{query.color, ref, masked};
  WarpProblem without{query.color, ref, all};
  const auto a = warping_loss(with, truth);
  const auto b = warping_loss(without, truth);
  const auto sum = [](const WarpEvaluation& e) { return e.loss * static_cast<double>(e.contributing); };
  double blank_part = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int x = static_cast<int>(all[i].x()), y = static_cast<int>(all[i].y());
    if (ref.valid.at(x, y) == 0 && !std::isnan(b.residuals[i])) blank_part += b.residuals[i];
  }
  EXPECT_GT(blank_part, 0);
  EXPECT_NEAR(sum(b), sum(a) + blank_part, 1e-9 * sum(b));
  EXPECT_GE(sum(b), sum(a));
}

/// Warped positions of the samples at `pose` keep at least `margin` px
/// away from integer grid lines, so finite differences stay in one cell.
std::vector<Vec2> off_boundary(const WarpProblem& problem, const Pose& pose, double margin) {
  std::vector<Vec2> keep;
  for (const auto& p : problem.samples) {
    const double d = problem.reference.depth.at(static_cast<int>(p.x()), static_cast<int>(p.y()));
    const auto q = try_warp_pixel(p, d, problem.reference.render_pose, pose, problem.camera());
    if (!q) continue;
    const double fx = q->x() - std::floor(q->x()), fy = q->y() - std::floor(q->y());
    if (fx > margin && fx < 1 - margin && fy > margin && fy < 1 - margin) keep.push_back(p);
  }
  return keep;
}

TEST(WarpingLossGradient, MatchesFiniteDifferences) {
  const testing::BoxRoom room;
  const Camera cam = room_camera();
  CounterRng rng(77);
  double worst = 0;
  for (int config = 0; config < 100; ++config) {
    const Pose truth = testing::box_room_pose(rng.uniform(-kPi, kPi));
    const auto ref = room.render(cam, perturb(truth, rng, 0.03, 0.05));
    const auto query = room.render(cam, truth);
    WarpProblem problem{query.color, ref, select_valid_samples(ref, 256, rng.below(1000))};
    const Pose at = perturb(ref.render_pose, rng, 0.01, 0.02);
    problem.samples = off_boundary(problem, at, 0.02);
    ASSERT_GT(problem.samples.size(), 50u);
    const Vec6 analytic = warping_loss_gradient(problem, at);
    Vec6 numeric;
    const double h = 1e-6;
    for (int d = 0; d < 6; ++d) {
      Vec6 e = Vec6::Zero();
      e[d] = h;
      numeric[d] = (warping_loss(problem, se3_exp(e) * at).loss - warping_loss(problem, se3_exp(-e) * at).loss) /
                   (2 * h);
    }
    const double rel = (analytic - numeric).norm() / std::max(analytic.norm(), numeric.norm());
    worst = std::max(worst, rel);
  }
  EXPECT_LT(worst, 2e-3);
}

TEST(WarpingLossGradient, ScalesWithContrast) {
  testing::BoxRoom room;
  const Camera cam = room_camera();
  CounterRng rng(12);
  const Pose truth = testing::box_room_pose(0.3);
  const Pose render = perturb(truth, rng, 0.02, 0.04);
  const auto ref = room.render(cam, render);
  const auto query = room.render(cam, truth);
  room.contrast = 2.0;
  const auto ref2 = room.render(cam, render);
  const auto query2 = room.render(cam, truth);
  const auto samples = select_valid_samples(ref, 500, 3);
  const Pose at = perturb(render, rng, 0.005, 0.01);
  const Vec6 g1 = warping_loss_gradient(WarpProblem{query.color, ref, samples}, at);
  const Vec6 g2 = warping_loss_gradient(WarpProblem{query2.color, ref2, samples}, at);
  EXPECT_LT((g2 - 2.0 * g1).norm(), 1e-9 * g1.norm());
}

TEST(RefinePose, GroundTruthInitDoesNotDrift) {
  const testing::BoxRoom room;
  const Camera cam = room_camera();
  const Pose truth = testing::box_room_pose(0.4);
  const auto ref = room.render(cam, truth);
  const auto result = refine_pose(ref.color, ref, RefineConfig{}, truth);
  EXPECT_EQ(result.status, RefineStatus::Ok);
  EXPECT_LT(testing::rotation_error_rad(result.pose, truth), 1e-6);
  EXPECT_LT((result.pose.inverse().translation - truth.inverse().translation).norm(), 1e-6);
  EXPECT_EQ(result.trace.size(), 251u);
}

TEST(RefinePose, RecoversPerturbedPoses) {
  const testing::BoxRoom room;
  const Camera cam = room_camera();
  const double diameter = room.diameter();
  CounterRng rng(2026);
  int good = 0;
  const int trials = 50;
  for (int trial = 0; trial < trials; ++trial) {
    const Pose truth = testing::box_room_pose(rng.uniform(-kPi, kPi), room.scale);
    const Pose init = perturb(truth, rng, 2.0 * kPi / 180, 0.05 * diameter);
    const auto query = room.render(cam, truth);
    const auto ref = room.render(cam, init);
    RefineConfig config;
    config.seed = static_cast<std::uint64_t>(trial);
    const auto result = refine_pose(query.color, ref, config, init);
    const double rot = testing::rotation_error_rad(result.pose, truth) * 180 / kPi;
    const double trans = (result.pose.inverse().translation - truth.inverse().translation).norm() / diameter;
    good += rot < 0.05 && trans < 1e-3;
  }
  EXPECT_GE(good, 45) << good << "/" << trials;
}

TEST(RefinePose, BestSoFarEnvelopeAndTraceCsv) {
  const testing::BoxRoom room;
  const Camera cam = room_camera();
  CounterRng rng(6);
  const Pose truth = testing::box_room_pose(1.0);
  const Pose init = perturb(truth, rng, 0.02, 0.05);
  const auto result = refine_pose(room.render(cam, truth).color, room.render(cam, init), RefineConfig{}, init);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& row : result.trace) best = std::min(best, row.loss);
  EXPECT_EQ(result.trace[static_cast<std::size_t>(result.best_iter)].loss, best);
  EXPECT_LT(best, result.trace.front().loss);
  std::ostringstream os;
  write_trace_csv(os, result.trace);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "iter,loss,rot_step_norm,trans_step_norm");
}

TEST(RefinePose, StatusFlagsReturnInitialPose) {
  const auto blank = flat_reference(16, 16, 0.0, 0.0);
  Pose init;
  init.translation = Vec3(0.1, 0.2, 0.3);
  const auto r = refine_pose(constant_image(16, 16, 0.0), blank, RefineConfig{}, init);
  EXPECT_EQ(r.status, RefineStatus::TooFewValid);
  EXPECT_EQ(r.pose.translation, init.translation);

  const auto flat = flat_reference(16, 16, 1.0, 0.0);
  Pose far_away;
  far_away.translation = Vec3(100, 0, 0);
  const auto r2 = refine_pose(constant_image(16, 16, 0.0), flat, RefineConfig{}, far_away);
  EXPECT_EQ(r2.status, RefineStatus::NoContributingSamples);
}

TEST(RefinePose, RerenderEveryKCallsRenderer) {
  const testing::BoxRoom room;
  const Camera cam = room_camera();
  CounterRng rng(9);
  const Pose truth = testing::box_room_pose(-0.5);
  const Pose init = perturb(truth, rng, 0.02, 0.04);
  RefineConfig config;
  config.iterations = 100;
  config.rerender_every = 25;
  int calls = 0;
  const auto result = refine_pose(room.render(cam, truth).color, room.render(cam, init), config, init,
                                  std::nullopt, [&](const Pose& p) {
                                    ++calls;
                                    return room.render(cam, p);
                                  });
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(result.renders, 4);
  EXPECT_LT(testing::rotation_error_rad(result.pose, truth), testing::rotation_error_rad(init, truth));
  config.rerender_every = 10;
  EXPECT_THROW(refine_pose(room.render(cam, truth).color, room.render(cam, init), config, init), Error);
}

}  // namespace
}  // namespace pnloc
