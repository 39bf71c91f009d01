// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"
#include "pnloc/geometry.hpp"
#include "pnloc/image.hpp"
#include "pnloc/mlp.hpp"
#include "pnloc/parallel.hpp"
#include "pnloc/renderer.hpp"
#include "pnloc/rng.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

namespace pnloc {

inline constexpr double kDefaultDepthMin = 0.01;
inline constexpr std::size_t kMinValidSamples = 64;
inline constexpr double kSnapTolerancePx = 1e-9;
// Refinement stops when the loss exceeds 10x its initial value and this
// absolute level (mean color distance).
inline constexpr double kDivergenceFloor = 0.05;

/// Reference pixel p at z-depth `depth` seen from `render_pose`, projected
/// into a camera at `candidate_pose`. nullopt when the point lands behind
/// the candidate camera.
inline std::optional<Vec2> try_warp_pixel(const Vec2& p, double depth, const Pose& render_pose,
                                          const Pose& candidate_pose, const Camera& camera) {
  const Vec3 world = render_pose.inverse()(backproject(camera, p, depth));
  return try_project(camera, candidate_pose(world));
}

/// Throws BehindCamera when the warped point is not in front of the camera.
inline Vec2 warp_pixel(const Vec2& p, double depth, const Pose& render_pose, const Pose& candidate_pose,
                       const Camera& camera) {
  const auto out = try_warp_pixel(p, depth, render_pose, candidate_pose, camera);
  if (!out) throw Error(ErrorCode::BehindCamera, "warped point is behind the candidate camera");
  return *out;
}

/// Draws up to n distinct pixels uniformly by rejection: a pixel is kept
/// when its rendered depth is >= depth_min (unless the blank mask is
/// disabled) and the optional mask is set. When n covers every eligible
/// pixel, all of them are returned in row-major order.
/// Throws TooFewValid when fewer than 64 pixels are eligible.
inline std::vector<Vec2> select_valid_samples(const RenderedView& reference, std::size_t n,
                                              std::uint64_t seed, double depth_min = kDefaultDepthMin,
                                              const Mask* mask = nullptr, bool use_blank_mask = true) {
  const int w = reference.depth.width(), h = reference.depth.height();
  auto eligible = [&](int x, int y) {
    if (use_blank_mask && !(reference.depth.at(x, y) >= depth_min)) return false;
    return !mask || mask->at(x, y) != 0;
  };
  std::size_t count = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) count += eligible(x, y);
  if (count < kMinValidSamples) {
    throw Error(ErrorCode::TooFewValid,
                "only " + std::to_string(count) + " valid reference pixels (need 64)");
  }
  std::vector<Vec2> out;
  if (n >= count) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (eligible(x, y)) out.emplace_back(x, y);
    return out;
  }
  CounterRng rng(seed);
  std::unordered_set<std::uint64_t> taken;
  const auto total = static_cast<std::uint64_t>(w) * static_cast<std::uint64_t>(h);
  while (out.size() < n) {
    const std::uint64_t idx = rng.below(total);
    const int x = static_cast<int>(idx % static_cast<std::uint64_t>(w));
    const int y = static_cast<int>(idx / static_cast<std::uint64_t>(w));
    if (!eligible(x, y) || !taken.insert(idx).second) continue;
    out.emplace_back(x, y);
  }
  return out;
}

/// Everything the warping objective needs: the query image, the rendered
/// reference and the sampled reference pixels.
struct WarpProblem {
  WarpProblem() = default;
  WarpProblem(ImageD query_image, RenderedView ref, std::vector<Vec2> sample_pixels,
              std::optional<Mask> mask = std::nullopt)
      : query(std::move(query_image)), reference(std::move(ref)), samples(std::move(sample_pixels)),
        query_mask(std::move(mask)) {}

  ImageD query;  // H x W x 3
  RenderedView reference;
  std::vector<Vec2> samples;
  std::optional<Mask> query_mask;
  double depth_floor = 1e-6;  // depth used for blank pixels when they are sampled

  const Camera& camera() const { return reference.camera; }

  void validate() const {
    const auto& cam = reference.camera;
    if (!query.same_shape(cam.width, cam.height) || query.channels() != 3 ||
        !reference.color.same_shape(cam.width, cam.height) ||
        (query_mask && !query_mask->same_shape(cam.width, cam.height))) {
      throw Error(ErrorCode::DimensionMismatch, "warp problem images must match the camera");
    }
  }
};

/// Per-sample precomputation: the world point and the reference color.
struct WarpAnchor {
  Vec3 world = Vec3::Zero();
  Vec3 color = Vec3::Zero();
};

inline std::vector<WarpAnchor> warp_anchors(const WarpProblem& problem) {
  const auto& ref = problem.reference;
  const Pose cam_to_world = ref.render_pose.inverse();
  std::vector<WarpAnchor> out(problem.samples.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Vec2& p = problem.samples[i];
    double color[3];
    double depth;
    if (!try_bilinear_sample(ref.color, p, color) || !try_bilinear_sample(ref.depth, p, &depth)) {
      throw Error(ErrorCode::OutOfBounds, "sample pixel outside the reference");
    }
    out[i].world = cam_to_world(backproject(ref.camera, p, std::max(depth, problem.depth_floor)));
    out[i].color = Vec3(color[0], color[1], color[2]);
  }
  return out;
}

struct WarpEvaluation {
  double loss = 0;
  Vec6 gradient = Vec6::Zero();
  std::vector<double> residuals;  // per sample; NaN when dropped
  std::size_t contributing = 0;
  std::size_t dropped = 0;  // out of bounds, behind the camera or masked
};

namespace detail {

struct SampleTerm {
  double residual = 0;
  Vec6 gradient = Vec6::Zero();
  bool used = false;
};

inline SampleTerm warp_sample(const WarpAnchor& a, const Pose& pose, const Camera& cam,
                              const ImageD& query, const Mask* mask, bool want_gradient,
                              const Vec3& pivot) {
  SampleTerm t;
  const Vec3 x = pose(a.world);
  if (x.z() <= kMinProjectDepth) return t;
  Vec2 px(cam.fx * x.x() / x.z() + cam.cx, cam.fy * x.y() / x.z() + cam.cy);
  // Round-off from the world round trip is snapped away, so an unmoved
  // camera reads exactly the sampled pixel.
  for (int k = 0; k < 2; ++k) {
    const double r = std::round(px[k]);
    if (std::abs(px[k] - r) < kSnapTolerancePx) px[k] = r;
  }
  double val[3], gx[3], gy[3];
  if (!try_bilinear_sample_with_gradient(query, px, val, gx, gy)) return t;
  if (mask) {
    const int mx = static_cast<int>(std::lround(px.x())), my = static_cast<int>(std::lround(px.y()));
    if (mask->at(mx, my) == 0) return t;
  }
  const Vec3 e = Vec3(val[0], val[1], val[2]) - a.color;
  t.used = true;
  t.residual = e.norm();
  if (!want_gradient || t.residual == 0) return t;
  // d|e| / d xi = e^T / |e| * dI/dpx * dpx/dX * [-[X]x, I]
  Eigen::Matrix<double, 3, 2> jimg;
  for (int c = 0; c < 3; ++c) jimg.row(c) << gx[c], gy[c];
  Eigen::Matrix<double, 2, 3> dpi;
  dpi << cam.fx / x.z(), 0, -cam.fx * x.x() / (x.z() * x.z()),
      0, cam.fy / x.z(), -cam.fy * x.y() / (x.z() * x.z());
  Eigen::Matrix<double, 3, 6> dx;
  dx << -hat(x - pivot), Mat3::Identity();
  t.gradient = ((e / t.residual).transpose() * jimg * dpi * dx).transpose();
  return t;
}

}  // namespace detail

/// Mean over contributing samples of |C(q, W(p)) - C(q_r, p)|_2 and,
/// optionally, its gradient with respect to a left-multiplied tangent
/// increment. Throws NoContributingSamples when every sample is dropped.
inline WarpEvaluation evaluate_warp(const WarpProblem& problem, std::span<const WarpAnchor> anchors,
                                    const Pose& pose, bool want_gradient, int threads = 1,
                                    const Vec3& pivot = Vec3::Zero()) {
  const auto& cam = problem.camera();
  const Mask* mask = problem.query_mask ? &*problem.query_mask : nullptr;
  std::vector<detail::SampleTerm> terms(anchors.size());
  parallel_for(anchors.size(), threads, [&](std::size_t i) {
    terms[i] = detail::warp_sample(anchors[i], pose, cam, problem.query, mask, want_gradient, pivot);
  });
  WarpEvaluation out;
  out.residuals.resize(anchors.size());
  for (std::size_t i = 0; i < terms.size(); ++i) {
    out.residuals[i] = terms[i].used ? terms[i].residual : std::numeric_limits<double>::quiet_NaN();
    out.contributing += terms[i].used;
  }
  out.dropped = anchors.size() - out.contributing;
  if (out.contributing == 0) {
    throw Error(ErrorCode::NoContributingSamples, "no warped sample landed inside the query");
  }
  const double inv = 1.0 / static_cast<double>(out.contributing);
  out.loss = inv * pairwise_sum<double>(0, terms.size(), 0.0, [&](std::size_t i) { return terms[i].residual; });
  if (want_gradient) {
    out.gradient = inv * pairwise_sum<Vec6>(0, terms.size(), Vec6::Zero(),
                                            [&](std::size_t i) { return terms[i].gradient; });
  }
  return out;
}

inline WarpEvaluation warping_loss(const WarpProblem& problem, const Pose& candidate) {
  problem.validate();
  const auto anchors = warp_anchors(problem);
  return evaluate_warp(problem, anchors, candidate, false);
}

inline Vec6 warping_loss_gradient(const WarpProblem& problem, const Pose& candidate) {
  problem.validate();
  const auto anchors = warp_anchors(problem);
  return evaluate_warp(problem, anchors, candidate, true).gradient;
}

enum class RefineStatus { Ok, TooFewValid, NoContributingSamples, Diverged };

inline const char* to_string(RefineStatus s) {
  switch (s) {
    case RefineStatus::Ok: return "ok";
    case RefineStatus::TooFewValid: return "too_few_valid";
    case RefineStatus::NoContributingSamples: return "no_contributing_samples";
    case RefineStatus::Diverged: return "diverged";
  }
  return "unknown";
}

struct RefineConfig {
  std::size_t n_samples = 2048;
  int iterations = 250;
  Adam::Options optimizer{};  // lr 1e-3, betas (0.9, 0.999)
  double depth_min = kDefaultDepthMin;
  int rerender_every = 0;  // 0: render once
  bool use_blank_mask = true;
  // Rotation increments turn about the centroid of the sampled points
  // instead of the camera center.
  bool pivot_at_centroid = true;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    require(optimizer.learning_rate > 0, "learning rate must be positive");
    require(iterations >= 1, "refinement needs at least one iteration");
    require(depth_min > 0, "depth_min must be positive");
    require(rerender_every >= 0, "rerender_every must be non-negative");
  }
};

struct TraceRow {
  int iter = 0;
  double loss = 0;
  double rot_step_norm = 0;
  double trans_step_norm = 0;
};

struct RefineResult {
  Pose pose;
  RefineStatus status = RefineStatus::Ok;
  std::vector<TraceRow> trace;
  int best_iter = 0;
  int renders = 0;  // reference renders performed, the initial one included
};

inline void write_trace_csv(std::ostream& os, std::span<const TraceRow> trace) {
  os << "iter,loss,rot_step_norm,trans_step_norm\n";
  os.precision(17);
  for (const auto& r : trace) os << r.iter << ',' << r.loss << ',' << r.rot_step_norm << ',' << r.trans_step_norm << '\n';
}

/// Camera-frame increment exp(xi) applied about `pivot`: x -> c + exp(xi)(x - c).
inline Pose pivoted_step(const Se3Tangent& xi, const Vec3& pivot) {
  const Pose e = se3_exp(xi);
  return Pose{e.rotation, e.translation + pivot - e.rotation * pivot};
}

/// Renders a reference view at a pose; supplied when rerender_every > 0.
using ReferenceRenderer = std::function<RenderedView(const Pose&)>;

/// First-order refinement of the pose against a once-rendered reference.
/// Row k of the trace holds the loss at iterate k and the step taken from
/// it; the iterate with the lowest loss is returned. With rerender_every > 0
/// the reference is re-rendered at the current iterate every k steps and the
/// best-iterate bookkeeping restarts on the new objective.
inline RefineResult refine_pose(const ImageD& query, const RenderedView& reference,
                                const RefineConfig& config, const Pose& init,
                                const std::optional<Mask>& query_mask = std::nullopt,
                                const ReferenceRenderer& rerender = {}) {
  config.validate();
  require(config.rerender_every == 0 || static_cast<bool>(rerender),
          "re-rendering needs a reference renderer");
  RefineResult result;
  result.pose = init;
  result.renders = 1;
  WarpProblem problem{query, reference, {}, query_mask};
  problem.validate();
  std::vector<WarpAnchor> anchors;
  Vec3 centroid = Vec3::Zero();
  auto prepare = [&](std::uint64_t round) {
    problem.samples = select_valid_samples(problem.reference, config.n_samples,
                                           derive_seed(config.seed, round), config.depth_min, nullptr,
                                           config.use_blank_mask);
    anchors = warp_anchors(problem);
    centroid = pairwise_sum<Vec3>(0, anchors.size(), Vec3::Zero(), [&](std::size_t i) { return anchors[i].world; }) /
               static_cast<double>(anchors.size());
  };
  try {
    prepare(0);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::TooFewValid) throw;
    result.status = RefineStatus::TooFewValid;
    return result;
  }

  Adam adam(6, config.optimizer);
  Pose pose = init;
  double best = std::numeric_limits<double>::infinity();
  double initial = 0;
  for (int k = 0; k <= config.iterations; ++k) {
    if (config.rerender_every > 0 && k > 0 && k < config.iterations && k % config.rerender_every == 0) {
      problem.reference = rerender(pose);
      ++result.renders;
      try {
        prepare(static_cast<std::uint64_t>(k));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::TooFewValid) throw;
        result.status = RefineStatus::TooFewValid;
        return result;
      }
      best = std::numeric_limits<double>::infinity();
    }
    WarpEvaluation eval;
    Vec3 pivot;
    try {
      pivot = config.pivot_at_centroid ? pose(centroid) : Vec3::Zero();
      eval = evaluate_warp(problem, anchors, pose, k < config.iterations, config.threads, pivot);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoContributingSamples) throw;
      result.status = RefineStatus::NoContributingSamples;
      return result;
    }
    if (k == 0) initial = eval.loss;
    TraceRow row{k, eval.loss, 0, 0};
    if (eval.loss < best) {
      best = eval.loss;
      result.pose = pose;
      result.best_iter = k;
    }
    if (!std::isfinite(eval.loss) || (eval.loss > 10 * initial && eval.loss > kDivergenceFloor)) {
      result.trace.push_back(row);
      result.status = RefineStatus::Diverged;
      return result;
    }
    if (k < config.iterations) {
      const Vec6 step = adam.step(eval.gradient);
      row.rot_step_norm = step.head<3>().norm();
      row.trans_step_norm = step.tail<3>().norm();
      pose = pivoted_step(step, pivot) * pose;
    }
    result.trace.push_back(row);
  }
  return result;
}

/// Pose refinement that re-renders at every iteration and differentiates
/// the photometric error numerically (central differences over the six
/// tangent coordinates). Exists as the slow comparison point for the
/// warping objective.
struct PhotometricConfig {
  int iterations = 250;
  Adam::Options optimizer{};
  std::size_t n_rays = 64;
  double fd_step = 1e-3;
  std::uint64_t seed = 0;
};

struct PhotometricResult {
  Pose pose;
  RefineStatus status = RefineStatus::Ok;
  std::vector<TraceRow> trace;
  int best_iter = 0;
  long renders = 0;  // pixel-subset renders performed
};

inline PhotometricResult photometric_refine_baseline(const PointField& field, const RadianceHead& head,
                                                     const RenderSettings& settings, const ImageD& query,
                                                     const Camera& camera, const Pose& init,
                                                     const PhotometricConfig& config) {
  require(config.iterations >= 1 && config.n_rays >= 1 && config.fd_step > 0,
          "invalid photometric baseline config");
  require(query.same_shape(camera.width, camera.height) && query.channels() == 3,
          "query must match the camera");
  CounterRng rng(config.seed);
  std::vector<Vec2> pixels;
  const auto total = static_cast<std::uint64_t>(camera.width) * static_cast<std::uint64_t>(camera.height);
  std::unordered_set<std::uint64_t> taken;
  while (pixels.size() < std::min<std::uint64_t>(config.n_rays, total)) {
    const auto idx = rng.below(total);
    if (!taken.insert(idx).second) continue;
    pixels.emplace_back(static_cast<double>(idx % static_cast<std::uint64_t>(camera.width)),
                        static_cast<double>(idx / static_cast<std::uint64_t>(camera.width)));
  }
  PhotometricResult result;
  result.pose = init;
  auto loss_at = [&](const Pose& pose) {
    ++result.renders;
    const auto px = render_pixels(field, camera, pose, pixels, settings, head);
    double sum = 0;
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      const int x = static_cast<int>(pixels[i].x()), y = static_cast<int>(pixels[i].y());
      sum += (px[i].color - Vec3(query.at(x, y, 0), query.at(x, y, 1), query.at(x, y, 2))).norm();
    }
    return sum / static_cast<double>(pixels.size());
  };
  Adam adam(6, config.optimizer);
  Pose pose = init;
  double best = std::numeric_limits<double>::infinity(), initial = 0;
  for (int k = 0; k <= config.iterations; ++k) {
    const double loss = loss_at(pose);
    if (k == 0) initial = loss;
    TraceRow row{k, loss, 0, 0};
    if (loss < best) {
      best = loss;
      result.pose = pose;
      result.best_iter = k;
    }
    if (!std::isfinite(loss) || (loss > 10 * initial && loss > kDivergenceFloor)) {
      result.trace.push_back(row);
      result.status = RefineStatus::Diverged;
      return result;
    }
    if (k < config.iterations) {
      Vec6 grad;
      for (int d = 0; d < 6; ++d) {
        Vec6 e = Vec6::Zero();
        e[d] = config.fd_step;
        grad[d] = (loss_at(se3_exp(e) * pose) - loss_at(se3_exp(-e) * pose)) / (2 * config.fd_step);
      }
      const Vec6 step = adam.step(grad);
      row.rot_step_norm = step.head<3>().norm();
      row.trans_step_norm = step.tail<3>().norm();
      pose = se3_exp(step) * pose;
    }
    result.trace.push_back(row);
  }
  return result;
}

}  // namespace pnloc
