// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"
#include "pnloc/geometry.hpp"
#include "pnloc/point_field.hpp"
#include "pnloc/rng.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <span>
#include <tuple>
#include <vector>

namespace pnloc {

struct Keypoint {
  Vec2 pixel = Vec2::Zero();
  VecX descriptor;
};

struct Correspondence {
  Vec2 query_pixel = Vec2::Zero();
  Vec3 world_point = Vec3::Zero();
  double similarity = 0;
  std::uint32_t keypoint = 0;  // index into the query keypoints
  std::uint32_t point_id = 0;  // id in the unfiltered field
};

struct MatchConfig {
  double score_threshold = 0.7;
  double similarity_floor = 0.8;
  bool mutual_check = true;
  std::size_t block_size = 4096;  // points per similarity block
};

struct MatchResult {
  std::vector<Correspondence> matches;
  std::size_t candidate_count = 0;  // points that survived score filtering
  bool fell_back = false;           // AllFiltered: matched against every point
};

/// Builds keypoints from a descriptor map: detected pixels with their lifted
/// descriptors.
inline std::vector<Keypoint> keypoints_from_map(const DescriptorMap& map, std::size_t max_count) {
  const auto pixels = detect_keypoints(map, max_count);
  const auto descs = lift_descriptors(map, pixels);
  std::vector<Keypoint> out;
  out.reserve(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (descs[i]) out.push_back({pixels[i], *descs[i]});
  }
  return out;
}

/// Cosine-similarity matching of keypoints against points with S >= S_t.
/// Each keypoint takes its most similar point (ties: lowest index); matches
/// below the similarity floor are dropped, and with the mutual check a match
/// survives only if the keypoint is also the point's best keypoint.
/// Throws NoMatches when fewer than 4 matches survive.
inline MatchResult match_features(std::span<const Keypoint> query, const PointField& field,
                                  const MatchConfig& config = {}) {
  require(!field.empty(), "matching needs a non-empty field");
  require(config.block_size >= 1, "match block size must be positive");
  const int fa = field.descriptor_dim();
  MatchResult result;

  std::vector<Eigen::Index> cols;
  for (Eigen::Index i = 0; i < field.scores().size(); ++i) {
    if (field.scores()[i] >= config.score_threshold) cols.push_back(i);
  }
  if (cols.empty()) {
    result.fell_back = true;
    cols.resize(field.size());
    std::iota(cols.begin(), cols.end(), Eigen::Index{0});
  }
  result.candidate_count = cols.size();

  const auto m = static_cast<Eigen::Index>(query.size());
  MatX q(fa, m);
  for (Eigen::Index k = 0; k < m; ++k) {
    require(query[k].descriptor.size() == fa, "keypoint descriptor dimension mismatch");
    q.col(k) = query[k].descriptor;
  }

  std::vector<double> best_sim(m, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> best_col(m, 0);
  std::vector<Eigen::Index> point_best(cols.size(), -1);
  MatX block;
  MatX sims;
  for (std::size_t start = 0; start < cols.size() && m > 0; start += config.block_size) {
    const std::size_t len = std::min(config.block_size, cols.size() - start);
    block.resize(fa, static_cast<Eigen::Index>(len));
    for (std::size_t j = 0; j < len; ++j) {
      block.col(static_cast<Eigen::Index>(j)) = field.descriptors().col(cols[start + j]);
    }
    sims.noalias() = q.transpose() * block;  // m x len
    for (std::size_t j = 0; j < len; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      Eigen::Index arg = 0;
      double best = sims(0, jj);
      for (Eigen::Index k = 1; k < m; ++k) {
        if (sims(k, jj) > best) {
          best = sims(k, jj);
          arg = k;
        }
      }
      point_best[start + j] = arg;
      for (Eigen::Index k = 0; k < m; ++k) {
        if (sims(k, jj) > best_sim[k]) {
          best_sim[k] = sims(k, jj);
          best_col[k] = start + j;
        }
      }
    }
  }

  for (Eigen::Index k = 0; k < m; ++k) {
    if (!(best_sim[k] >= config.similarity_floor)) continue;
    if (config.mutual_check && point_best[best_col[k]] != k) continue;
    const auto idx = cols[best_col[k]];
    result.matches.push_back({query[k].pixel, field.positions()[idx], best_sim[k],
                              static_cast<std::uint32_t>(k), field.ids()[idx]});
  }
  if (result.matches.size() < 4) {
    throw Error(ErrorCode::NoMatches,
                "only " + std::to_string(result.matches.size()) + " matches survived (need 4)");
  }
  return result;
}

/// Pixel distance between the observation and the projected world point;
/// +infinity when the point is not in front of the camera.
inline double reprojection_residual(const Pose& pose, const Correspondence& c, const Camera& camera) {
  const auto px = try_project(camera, pose(c.world_point));
  if (!px) return std::numeric_limits<double>::infinity();
  return (*px - c.query_pixel).norm();
}

struct TotalError {
  double sum = 0;
  std::size_t excluded = 0;  // correspondences behind the camera
};

inline TotalError total_error(const Pose& pose, std::span<const Correspondence> corrs,
                              const Camera& camera) {
  TotalError out;
  for (const auto& c : corrs) {
    const double r = reprojection_residual(pose, c, camera);
    if (std::isinf(r)) {
      ++out.excluded;
    } else {
      out.sum += r;
    }
  }
  return out;
}

namespace detail {

// Rigid transform mapping world points onto camera points (least squares).
inline Pose kabsch(std::span<const Vec3> world, std::span<const Vec3> cam) {
  Vec3 mw = Vec3::Zero(), mc = Vec3::Zero();
  for (std::size_t i = 0; i < world.size(); ++i) {
    mw += world[i];
    mc += cam[i];
  }
  mw /= static_cast<double>(world.size());
  mc /= static_cast<double>(cam.size());
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < world.size(); ++i) h += (world[i] - mw) * (cam[i] - mc).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  Pose p;
  p.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  p.translation = mc - p.rotation * mw;
  return p;
}

// Real roots of a4 x^4 + ... + a0 via the companion matrix, Newton-polished.
inline std::vector<double> real_quartic_roots(const std::array<double, 5>& a) {
  std::vector<double> roots;
  if (std::abs(a[4]) < 1e-14 * (std::abs(a[0]) + std::abs(a[1]) + std::abs(a[2]) + std::abs(a[3]))) {
    return roots;
  }
  Eigen::Matrix4d comp = Eigen::Matrix4d::Zero();
  for (int i = 0; i < 4; ++i) comp(0, i) = -a[3 - i] / a[4];
  for (int i = 1; i < 4; ++i) comp(i, i - 1) = 1;
  Eigen::EigenSolver<Eigen::Matrix4d> es(comp, false);
  auto eval = [&](double x) { return (((a[4] * x + a[3]) * x + a[2]) * x + a[1]) * x + a[0]; };
  auto deriv = [&](double x) { return ((4 * a[4] * x + 3 * a[3]) * x + 2 * a[2]) * x + a[1]; };
  for (int i = 0; i < 4; ++i) {
    const std::complex<double> z = es.eigenvalues()[i];
    if (std::abs(z.imag()) > 1e-3 * std::max(1.0, std::abs(z.real()))) continue;
    double x = z.real();
    double fx = std::abs(eval(x));
    for (int it = 0; it < 8 && fx > 0; ++it) {
      const double d = deriv(x);
      if (d == 0) break;
      const double next = x - eval(x) / d;
      const double fn = std::abs(eval(next));
      if (!(fn < fx)) break;  // near a double root Newton can overshoot
      x = next;
      fx = fn;
    }
    roots.push_back(x);
  }
  return roots;
}

}  // namespace detail

/// Minimal absolute pose from three world points and their unit bearings
/// (camera frame). Grunert's quartic; every returned pose maps each world
/// point onto its bearing ray. Throws DegenerateConfiguration for collinear
/// or coincident inputs.
inline std::vector<Pose> solve_p3p_bearings(const std::array<Vec3, 3>& world,
                                            const std::array<Vec3, 3>& bearing) {
  const Vec3 e1 = world[1] - world[0], e2 = world[2] - world[0];
  const double scale = std::max({e1.norm(), e2.norm(), 1e-300});
  if (e1.cross(e2).norm() <= 1e-10 * scale * scale) {
    throw Error(ErrorCode::DegenerateConfiguration, "P3P world points are collinear or coincident");
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      if (bearing[i].cross(bearing[j]).norm() < 1e-12) {
        throw Error(ErrorCode::DegenerateConfiguration, "P3P bearings coincide");
      }
    }
  }
  const double a2 = (world[1] - world[2]).squaredNorm();
  const double b2 = (world[0] - world[2]).squaredNorm();
  const double c2 = (world[0] - world[1]).squaredNorm();
  const double ca = bearing[1].dot(bearing[2]);
  const double cb = bearing[0].dot(bearing[2]);
  const double cg = bearing[0].dot(bearing[1]);

  const double amc = (a2 - c2) / b2, apc = (a2 + c2) / b2;
  const double a_b = a2 / b2, c_b = c2 / b2, bmc = (b2 - c2) / b2, bma = (b2 - a2) / b2;
  std::array<double, 5> coeff;
  coeff[4] = (amc - 1) * (amc - 1) - 4 * c_b * ca * ca;
  coeff[3] = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c_b * ca * ca * cb);
  coeff[2] = 2 * (amc * amc - 1 + 2 * amc * amc * cb * cb + 2 * bmc * ca * ca -
                  4 * apc * ca * cb * cg + 2 * bma * cg * cg);
  coeff[1] = 4 * (-amc * (1 + amc) * cb + 2 * a_b * cg * cg * cb - (1 - apc) * ca * cg);
  coeff[0] = (1 + amc) * (1 + amc) - 4 * a_b * cg * cg;

  std::vector<Pose> out;
  std::vector<Vec3> seen;
  for (double v : detail::real_quartic_roots(coeff)) {
    if (!(v > 0)) continue;
    const double q = 1 + v * v - 2 * v * cb;
    if (!(q > 0)) continue;
    const double s1 = std::sqrt(b2 / q);
    // u from the (1, 2) side: u^2 - 2 u cos(gamma) + 1 - c^2 / s1^2 = 0. Both
    // roots are tried because a double root in v can hide two solutions.
    const double disc = cg * cg - 1 + c2 / (s1 * s1);
    if (disc < -1e-6) continue;
    const double root = std::sqrt(std::max(disc, 0.0));
    for (double u : {cg - root, cg + root}) {
      if (!(u > 0)) continue;
      const double e1 = s1 * s1 * (u * u + v * v - 2 * u * v * ca) - a2;
      if (std::abs(e1) > 1e-4 * a2) continue;
      Vec3 s(s1, u * s1, v * s1);
      // Newton polish on the three law-of-cosines equations.
      Vec3 f;
      for (int it = 0; it < 6; ++it) {
        f << s[1] * s[1] + s[2] * s[2] - 2 * s[1] * s[2] * ca - a2,
            s[0] * s[0] + s[2] * s[2] - 2 * s[0] * s[2] * cb - b2,
            s[0] * s[0] + s[1] * s[1] - 2 * s[0] * s[1] * cg - c2;
        Mat3 j;
        j << 0, 2 * s[1] - 2 * s[2] * ca, 2 * s[2] - 2 * s[1] * ca,
            2 * s[0] - 2 * s[2] * cb, 0, 2 * s[2] - 2 * s[0] * cb,
            2 * s[0] - 2 * s[1] * cg, 2 * s[1] - 2 * s[0] * cg, 0;
        const Vec3 step = j.fullPivLu().solve(f);
        if (!step.allFinite()) break;
        s -= step;
      }
      f << s[1] * s[1] + s[2] * s[2] - 2 * s[1] * s[2] * ca - a2,
          s[0] * s[0] + s[2] * s[2] - 2 * s[0] * s[2] * cb - b2,
          s[0] * s[0] + s[1] * s[1] - 2 * s[0] * s[1] * cg - c2;
      if (!(s.minCoeff() > 0) || f.cwiseAbs().maxCoeff() > 1e-8 * std::max({a2, b2, c2})) continue;
      bool dup = false;
      for (const auto& prev : seen) dup |= (prev - s).norm() < 1e-6 * s.norm();
      if (dup) continue;
      seen.push_back(s);
      const std::array<Vec3, 3> cam{s[0] * bearing[0], s[1] * bearing[1], s[2] * bearing[2]};
      out.push_back(detail::kabsch(world, cam));
    }
  }
  return out;
}

/// P3P from three correspondences; keeps only poses that reproject all three
/// within 1e-6 px.
inline std::vector<Pose> solve_p3p(std::span<const Correspondence> corrs, const Camera& camera) {
  require(corrs.size() == 3, "P3P takes exactly three correspondences");
  std::array<Vec3, 3> world, bearing;
  for (int i = 0; i < 3; ++i) {
    world[i] = corrs[i].world_point;
    bearing[i] = pixel_direction(camera, corrs[i].query_pixel);
  }
  std::vector<Pose> out;
  for (const auto& pose : solve_p3p_bearings(world, bearing)) {
    bool ok = true;
    for (const auto& c : corrs) ok &= reprojection_residual(pose, c, camera) <= 1e-6;
    if (ok) out.push_back(pose);
  }
  return out;
}

struct RansacConfig {
  int max_iterations = 20000;
  double inlier_threshold_px = 3.0;
  std::size_t min_inliers = 12;
  std::uint64_t seed = 0;
  double early_exit_confidence = 0.9999;
  bool refine = true;

  void validate() const {
    require(max_iterations >= 1, "RANSAC needs at least one iteration");
    require(inlier_threshold_px > 0, "inlier threshold must be positive");
    require(early_exit_confidence > 0 && early_exit_confidence <= 1, "confidence must lie in (0, 1]");
  }
};

struct PoseEstimate {
  Pose pose;
  std::vector<bool> inlier_flags;  // per input correspondence
  std::size_t inlier_count = 0;
  double mean_inlier_residual_px = 0;
  int iterations_used = 0;
};

namespace detail {

inline std::size_t count_inliers(const Pose& pose, std::span<const Correspondence> corrs,
                                 const Camera& camera, double threshold) {
  std::size_t n = 0;
  for (const auto& c : corrs) n += reprojection_residual(pose, c, camera) <= threshold;
  return n;
}

// Robust cost: Cauchy with scale s, sum s^2/2 log(1 + (r/s)^2).
inline double cauchy_cost(const Pose& pose, std::span<const Correspondence> corrs,
                          const Camera& camera, double s) {
  double cost = 0;
  for (const auto& c : corrs) {
    const double r = reprojection_residual(pose, c, camera);
    if (std::isinf(r)) return std::numeric_limits<double>::infinity();
    cost += 0.5 * s * s * std::log1p((r / s) * (r / s));
  }
  return cost;
}

// Levenberg-Marquardt with Cauchy IRLS weights on left-multiplied tangent
// increments.
inline Pose refine_reprojection(Pose pose, std::span<const Correspondence> corrs,
                                const Camera& camera, double scale, int iterations = 50) {
  double lambda = 1e-4;
  double cost = cauchy_cost(pose, corrs, camera, scale);
  for (int it = 0; it < iterations; ++it) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Vec6 g = Vec6::Zero();
    for (const auto& c : corrs) {
      const Vec3 x = pose(c.world_point);
      if (x.z() <= 1e-12) continue;
      const Vec2 r = project(camera, x) - c.query_pixel;
      const double w = 1.0 / (1.0 + r.squaredNorm() / (scale * scale));
      Eigen::Matrix<double, 2, 3> dpi;
      dpi << camera.fx / x.z(), 0, -camera.fx * x.x() / (x.z() * x.z()),
          0, camera.fy / x.z(), -camera.fy * x.y() / (x.z() * x.z());
      Eigen::Matrix<double, 3, 6> dx;
      dx << -hat(x), Mat3::Identity();
      const Eigen::Matrix<double, 2, 6> j = dpi * dx;
      h.noalias() += w * j.transpose() * j;
      g.noalias() += w * j.transpose() * r;
    }
    bool improved = false;
    for (int attempt = 0; attempt < 10; ++attempt) {
      Eigen::Matrix<double, 6, 6> damped = h;
      damped.diagonal() += lambda * (h.diagonal().array() + 1e-12).matrix();
      const Vec6 step = -damped.ldlt().solve(g);
      if (!step.allFinite()) break;
      const Pose candidate = se3_exp(step) * pose;
      const double c2 = cauchy_cost(candidate, corrs, camera, scale);
      if (c2 < cost) {
        const double rel = (cost - c2) / std::max(cost, 1e-300);
        pose = candidate;
        cost = c2;
        lambda = std::max(lambda * 0.3, 1e-12);
        improved = true;
        if (rel < 1e-15 || step.norm() < 1e-15) return pose;
        break;
      }
      lambda *= 10;
    }
    if (!improved) break;
  }
  return pose;
}

}  // namespace detail

/// Hypothesize-and-verify absolute pose. Samples are drawn as indices into
/// the correspondences sorted canonically, so the result does not depend on
/// input order. Throws NoConsensus when the best hypothesis has fewer than
/// min_inliers inliers.
inline PoseEstimate ransac_pnp(std::span<const Correspondence> corrs, const Camera& camera,
                               const RansacConfig& config = {}) {
  config.validate();
  const std::size_t n = corrs.size();
  if (n < 4) throw Error(ErrorCode::NoMatches, "RANSAC needs at least 4 correspondences");

  // Work on a canonically sorted copy so every floating-point reduction is
  // independent of the caller's ordering.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) {
    const auto& c = corrs[i];
    return std::make_tuple(c.query_pixel.x(), c.query_pixel.y(), c.world_point.x(), c.world_point.y(),
                           c.world_point.z(), c.similarity);
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  std::vector<Correspondence> sorted(n);
  for (std::size_t i = 0; i < n; ++i) sorted[i] = corrs[order[i]];

  const double thr = config.inlier_threshold_px;
  std::size_t best_count = 0;
  Pose best_pose;
  int iterations = 0;
  std::array<Correspondence, 3> sample;
  for (int it = 0; it < config.max_iterations; ++it) {
    ++iterations;
    CounterRng rng(derive_seed(config.seed, static_cast<std::uint64_t>(it)));
    std::array<std::size_t, 3> idx{};
    for (int k = 0; k < 3; ++k) {
      bool fresh = false;
      while (!fresh) {
        idx[k] = static_cast<std::size_t>(rng.below(n));
        fresh = true;
        for (int j = 0; j < k; ++j) fresh &= idx[j] != idx[k];
      }
      sample[k] = sorted[idx[k]];
    }
    std::vector<Pose> candidates;
    try {
      candidates = solve_p3p(sample, camera);
    } catch (const Error&) {
      continue;
    }
    bool updated = false;
    for (const auto& pose : candidates) {
      const auto count = detail::count_inliers(pose, sorted, camera, thr);
      if (count > best_count) {
        best_count = count;
        best_pose = pose;
        updated = true;
      }
    }
    if (updated && config.early_exit_confidence < 1) {
      const double w = double(best_count) / double(n);
      const double p_fail = 1 - w * w * w;
      if (p_fail <= 0) break;
      const double needed = std::log(1 - config.early_exit_confidence) / std::log(p_fail);
      if (iterations >= needed) break;
    }
  }
  if (best_count < config.min_inliers) {
    throw Error(ErrorCode::NoConsensus, "best hypothesis has " + std::to_string(best_count) +
                                            " inliers (need " + std::to_string(config.min_inliers) + ")");
  }

  Pose pose = best_pose;
  if (config.refine) {
    for (int round = 0; round < 2; ++round) {
      std::vector<Correspondence> inliers;
      for (const auto& c : sorted) {
        if (reprojection_residual(pose, c, camera) <= thr) inliers.push_back(c);
      }
      const Pose refined = detail::refine_reprojection(pose, inliers, camera, thr);
      if (detail::count_inliers(refined, sorted, camera, thr) >= inliers.size()) pose = refined;
    }
  }

  PoseEstimate est;
  est.pose = pose;
  est.iterations_used = iterations;
  est.inlier_flags.resize(n);
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = reprojection_residual(pose, sorted[i], camera);
    est.inlier_flags[order[i]] = r <= thr;
    if (r <= thr) {
      ++est.inlier_count;
      sum += r;
    }
  }
  est.mean_inlier_residual_px = est.inlier_count ? sum / double(est.inlier_count) : 0.0;
  if (est.inlier_count < config.min_inliers) {
    throw Error(ErrorCode::NoConsensus, "refined pose keeps too few inliers");
  }
  return est;
}

}  // namespace pnloc
