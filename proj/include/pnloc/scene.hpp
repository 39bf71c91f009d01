// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"
#include "pnloc/geometry.hpp"
#include "pnloc/image.hpp"
#include "pnloc/point_field.hpp"
#include "pnloc/renderer.hpp"
#include "pnloc/rng.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pnloc {

enum class SceneKind { CheckerboardRoom, TexturedSpheres, RandomBlobs };
enum class DescriptorScheme { PositionHash, RandomOrthogonal };

inline std::string_view to_string(SceneKind k) {
  switch (k) {
    case SceneKind::CheckerboardRoom: return "room";
    case SceneKind::TexturedSpheres: return "spheres";
    case SceneKind::RandomBlobs: return "blobs";
  }
  return "unknown";
}

inline std::string_view to_string(DescriptorScheme s) {
  return s == DescriptorScheme::PositionHash ? "position-hash" : "random-orthogonal";
}

inline SceneKind parse_scene_kind(std::string_view s) {
  if (s == "room") return SceneKind::CheckerboardRoom;
  if (s == "spheres") return SceneKind::TexturedSpheres;
  if (s == "blobs") return SceneKind::RandomBlobs;
  throw Error(ErrorCode::InvalidArgument, "unknown scene kind '" + std::string(s) + "'");
}

inline DescriptorScheme parse_descriptor_scheme(std::string_view s) {
  if (s == "position-hash") return DescriptorScheme::PositionHash;
  if (s == "random-orthogonal") return DescriptorScheme::RandomOrthogonal;
  throw Error(ErrorCode::InvalidArgument, "unknown descriptor scheme '" + std::string(s) + "'");
}

// Room faces, used as bits of SyntheticSceneConfig::open_faces.
enum RoomFace : unsigned {
  kFaceWestX = 1u << 0,
  kFaceEastX = 1u << 1,
  kFaceSouthY = 1u << 2,
  kFaceNorthY = 1u << 3,
  kFaceFloor = 1u << 4,
  kFaceCeiling = 1u << 5,
};

struct SyntheticSceneConfig {
  SceneKind kind = SceneKind::CheckerboardRoom;
  std::size_t point_count = 5000;
  DescriptorScheme descriptors = DescriptorScheme::PositionHash;
  double descriptor_noise = 0.0;  // per-dimension sigma on query descriptors
  std::uint64_t seed = 0;

  int descriptor_dim = kDefaultDescriptorDim;
  int feature_dim = kDefaultFeatureDim;
  Camera camera{56, 56, 31.5, 31.5, 64, 64};
  int query_count = 10;
  int reference_count = 8;
  int samples_per_ray = 256;
  double kernel_width_factor = 0.5;  // radiance kernel width / mean point spacing
  double peak_optical_depth = 1.0;   // peak density times the sample step

  // Room only: half extents and faces left out (blank in renders).
  Vec3 room_half_extent{1.0, 1.0, 0.75};
  unsigned open_faces = 0;

  // Synthetic detector on the query images.
  std::size_t max_keypoints = 200;
  double keypoint_noise_px = 1.0;

  // Spatially varying reliability: point scores follow a smooth field and
  // low-score points get extra descriptor noise in the queries.
  bool structured_reliability = false;
  double unreliable_noise = 0.2;

  void validate() const {
    require(point_count >= 100, "scenes need at least 100 points");
    require(descriptor_noise >= 0 && keypoint_noise_px >= 0 && unreliable_noise >= 0,
            "noise levels must be non-negative");
    require(descriptor_dim >= 2 && feature_dim >= 3, "descriptor_dim >= 2 and feature_dim >= 3");
    require(query_count >= 0 && reference_count >= 0, "view counts must be non-negative");
    require(samples_per_ray >= 2, "samples_per_ray must be >= 2");
    camera.validate();
  }
};

struct SceneQuery {
  Camera camera;
  Pose gt_pose;  // world-to-camera
  std::uint64_t render_seed = 0;
  ImageD image;  // H x W x 3
  DescriptorMap descriptors;
  std::optional<Mask> mask;
  // Field index of the point behind each keypoint pixel (row-major order of
  // non-zero map pixels); lets tests check matches.
  std::vector<std::uint32_t> keypoint_points;
};

struct SceneBundle {
  SyntheticSceneConfig config;
  PointField field;
  std::vector<Vec3> point_colors;  // generating color per point
  std::vector<double> reliability;  // in [0, 1]
  RadianceHead head;
  RenderSettings render;
  std::vector<Pose> reference_poses;
  std::vector<SceneQuery> queries;
  std::uint32_t descriptor_attempts = 1;

  double diameter() const { return field.scene_diameter(); }
};

namespace detail {

struct SurfacePoint {
  Vec3 position;
  Vec3 color;
};

inline Vec3 checker_color(const Vec3& x, int face) {
  static constexpr std::array<std::array<double, 6>, 6> kPalette{{
      {0.85, 0.25, 0.20, 0.95, 0.80, 0.45},
      {0.20, 0.45, 0.85, 0.90, 0.90, 0.80},
      {0.25, 0.70, 0.30, 0.75, 0.30, 0.70},
      {0.95, 0.60, 0.15, 0.25, 0.25, 0.30},
      {0.55, 0.55, 0.55, 0.15, 0.35, 0.35},
      {0.90, 0.85, 0.95, 0.40, 0.20, 0.55},
  }};
  const double square = 0.25;
  const int parity = static_cast<int>(std::floor(x.x() / square) + std::floor(x.y() / square) +
                                      std::floor(x.z() / square)) &
                     1;
  const auto& p = kPalette[static_cast<std::size_t>(face)];
  const Vec3 base = parity ? Vec3(p[0], p[1], p[2]) : Vec3(p[3], p[4], p[5]);
  const double shade = 0.85 + 0.15 * std::sin(2.1 * x.x() + 1.3 * x.y() + 1.7 * x.z());
  return (base * shade).cwiseMax(0.02).cwiseMin(0.98);
}

// Jittered grid over the closed faces, sized so the total is close to n.
inline std::vector<SurfacePoint> room_points(const SyntheticSceneConfig& c, CounterRng& rng) {
  const Vec3 h = c.room_half_extent;
  struct Face {
    int axis;
    double sign;
  };
  const std::array<Face, 6> faces{{{0, -1}, {0, 1}, {1, -1}, {1, 1}, {2, -1}, {2, 1}}};
  double total_area = 0;
  std::array<double, 6> area{};
  for (int f = 0; f < 6; ++f) {
    if ((c.open_faces >> f) & 1u) continue;
    const int a = faces[f].axis;
    area[f] = 4 * h[(a + 1) % 3] * h[(a + 2) % 3];
    total_area += area[f];
  }
  require(total_area > 0, "room needs at least one closed face");
  const double spacing = std::sqrt(total_area / static_cast<double>(c.point_count));
  std::vector<SurfacePoint> out;
  for (int f = 0; f < 6; ++f) {
    if (area[f] == 0) continue;
    const int a = faces[f].axis, u = (a + 1) % 3, v = (a + 2) % 3;
    const int nu = std::max(1, static_cast<int>(std::lround(2 * h[u] / spacing)));
    const int nv = std::max(1, static_cast<int>(std::lround(2 * h[v] / spacing)));
    for (int i = 0; i < nu; ++i) {
      for (int j = 0; j < nv; ++j) {
        Vec3 x;
        x[a] = faces[f].sign * h[a];
        x[u] = -h[u] + (i + 0.5 + 0.6 * (rng.uniform() - 0.5)) * 2 * h[u] / nu;
        x[v] = -h[v] + (j + 0.5 + 0.6 * (rng.uniform() - 0.5)) * 2 * h[v] / nv;
        out.push_back({x, checker_color(x, f)});
      }
    }
  }
  return out;
}

inline std::vector<SurfacePoint> sphere_points(const SyntheticSceneConfig& c, CounterRng& rng) {
  struct Sphere {
    Vec3 center;
    double radius;
    Vec3 a, b;
  };
  const std::array<Sphere, 3> spheres{{
      {Vec3(-0.45, 0.0, 0.0), 0.35, Vec3(0.9, 0.3, 0.2), Vec3(0.2, 0.3, 0.8)},
      {Vec3(0.40, 0.25, 0.05), 0.30, Vec3(0.2, 0.8, 0.3), Vec3(0.9, 0.9, 0.3)},
      {Vec3(0.10, -0.45, -0.05), 0.25, Vec3(0.8, 0.4, 0.8), Vec3(0.3, 0.2, 0.2)},
  }};
  double total = 0;
  for (const auto& s : spheres) total += s.radius * s.radius;
  std::vector<SurfacePoint> out;
  for (const auto& s : spheres) {
    const auto n = static_cast<std::size_t>(std::lround(static_cast<double>(c.point_count) * s.radius *
                                                        s.radius / total));
    // Fibonacci sphere with a random twist.
    const double twist = rng.uniform(0, 2 * std::numbers::pi);
    for (std::size_t i = 0; i < n; ++i) {
      const double z = 1 - (2.0 * static_cast<double>(i) + 1) / static_cast<double>(n);
      const double r = std::sqrt(std::max(0.0, 1 - z * z));
      const double phi = twist + static_cast<double>(i) * std::numbers::pi * (3 - std::sqrt(5.0));
      const Vec3 dir(r * std::cos(phi), r * std::sin(phi), z);
      const double lat = std::asin(z), lon = std::atan2(dir.y(), dir.x());
      const double stripes = 0.5 + 0.5 * std::sin(6 * lon) * std::cos(5 * lat);
      out.push_back({s.center + s.radius * dir, s.a * stripes + s.b * (1 - stripes)});
    }
  }
  return out;
}

inline std::vector<SurfacePoint> blob_points(const SyntheticSceneConfig& c, CounterRng& rng) {
  const int blobs = 12;
  std::vector<Vec3> centers, colors;
  for (int b = 0; b < blobs; ++b) {
    centers.emplace_back(rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7), rng.uniform(-0.4, 0.4));
    colors.emplace_back(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9));
  }
  std::vector<SurfacePoint> out;
  for (std::size_t i = 0; i < c.point_count; ++i) {
    const auto b = static_cast<std::size_t>(rng.below(blobs));
    const Vec3 x = centers[b] + 0.12 * Vec3(rng.normal(), rng.normal(), rng.normal());
    const Vec3 col = (colors[b] + 0.08 * Vec3(rng.normal(), rng.normal(), rng.normal())).cwiseMax(0.02).cwiseMin(0.98);
    out.push_back({x, col});
  }
  return out;
}

inline std::uint64_t position_key(const Vec3& x) {
  // Quantized to 1e-6 m so the key survives f32 round trips of nearby values.
  std::uint64_t h = 0x243F6A8885A308D3ull;
  for (int k = 0; k < 3; ++k) {
    const auto q = static_cast<std::int64_t>(std::llround(x[k] * 1e6));
    h = mix64(h ^ static_cast<std::uint64_t>(q));
  }
  return h;
}

inline VecX gaussian_unit(CounterRng& rng, int dim) {
  VecX v(dim);
  for (int k = 0; k < dim; ++k) v[k] = rng.normal();
  return v / v.norm();
}

inline std::vector<VecX> make_descriptors(std::span<const SurfacePoint> pts, DescriptorScheme scheme, int dim,
                                          std::uint64_t seed) {
  std::vector<VecX> out(pts.size());
  if (scheme == DescriptorScheme::PositionHash) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      CounterRng rng(derive_seed(seed, position_key(pts[i].position)));
      out[i] = gaussian_unit(rng, dim);
    }
    return out;
  }
  // Consecutive blocks of `dim` points get the columns of one random
  // orthogonal matrix.
  for (std::size_t start = 0; start < pts.size(); start += static_cast<std::size_t>(dim)) {
    CounterRng rng(derive_seed(seed, start));
    MatX g(dim, dim);
    for (int j = 0; j < dim; ++j)
      for (int i = 0; i < dim; ++i) g(i, j) = rng.normal();
    Eigen::HouseholderQR<MatX> qr(g);
    const MatX q = qr.householderQ();
    for (std::size_t j = 0; j < static_cast<std::size_t>(dim) && start + j < pts.size(); ++j) {
      out[start + j] = q.col(static_cast<Eigen::Index>(j));
    }
  }
  return out;
}

// Fraction of distinct-point pairs with cosine similarity >= 0.8: every
// pair for small sets, 2e6 sampled pairs otherwise.
inline double similar_pair_fraction(std::span<const VecX> d, std::uint64_t seed) {
  const std::size_t n = d.size();
  if (n < 2) return 0;
  if (n <= 6000) {
    const auto dim = d.front().size();
    MatX m(dim, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) m.col(static_cast<Eigen::Index>(i)) = d[i];
    std::size_t bad = 0;
    const Eigen::Index block = 512;
    for (Eigen::Index s = 0; s < m.cols(); s += block) {
      const Eigen::Index len = std::min(block, m.cols() - s);
      const MatX sims = m.middleCols(s, len).transpose() * m;
      for (Eigen::Index r = 0; r < len; ++r)
        for (Eigen::Index c = s + r + 1; c < m.cols(); ++c) bad += sims(r, c) >= 0.8;
    }
    return static_cast<double>(bad) / (static_cast<double>(n) * static_cast<double>(n - 1) / 2);
  }
  CounterRng rng(seed);
  const std::size_t draws = 2'000'000;
  std::size_t bad = 0;
  for (std::size_t k = 0; k < draws; ++k) {
    const auto i = rng.below(n), j = rng.below(n);
    if (i == j) continue;
    bad += d[i].dot(d[j]) >= 0.8;
  }
  return static_cast<double>(bad) / static_cast<double>(draws);
}

inline double reliability_field(const Vec3& x) {
  const double v = std::sin(12.4 * x.x() + 0.7) * std::cos(9.2 * x.y() - 0.4) + 0.6 * std::sin(16.8 * x.z() + 7.6 * x.x());
  return 1.0 / (1.0 + std::exp(-4.0 * (v - 0.35)));
}

inline Pose interior_pose(const SyntheticSceneConfig& c, CounterRng& rng) {
  const Vec3 h = c.room_half_extent;
  const Vec3 eye(rng.uniform(-0.5, 0.5) * h.x(), rng.uniform(-0.5, 0.5) * h.y(), rng.uniform(-0.3, 0.3) * h.z());
  const double yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const double pitch = rng.uniform(-0.3, 0.3);
  const Vec3 dir(std::cos(pitch) * std::sin(yaw), std::cos(pitch) * std::cos(yaw), std::sin(pitch));
  return look_at(eye, eye + dir);
}

inline Pose orbit_pose(CounterRng& rng) {
  const double yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const double elev = rng.uniform(-0.4, 0.6);
  const double r = rng.uniform(2.2, 2.8);
  const Vec3 eye(r * std::cos(elev) * std::sin(yaw), r * std::cos(elev) * std::cos(yaw), r * std::sin(elev));
  const Vec3 target(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
  return look_at(eye, target);
}

}  // namespace detail

/// Synthetic detector output for one rendered query: field points that are
/// visible (projected depth agrees with the rendered depth) are projected
/// with pixel noise, rounded into a sparse descriptor map, and given a
/// noisy copy of their descriptor. The nearest point wins each pixel.
inline DescriptorMap synthetic_query_descriptors(const PointField& field, std::span<const double> reliability,
                                                 const RenderedView& view, const SyntheticSceneConfig& config,
                                                 std::uint64_t seed, std::vector<std::uint32_t>* point_of_pixel = nullptr) {
  const Camera& cam = view.camera;
  const int w = cam.width, h = cam.height;
  const double tolerance = std::max(0.05, 3 * field.mean_spacing());
  std::vector<std::int64_t> owner(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), -1);
  std::vector<double> owner_z(owner.size(), std::numeric_limits<double>::infinity());
  CounterRng rng(seed);
  std::vector<std::uint32_t> candidates;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const Vec3 xc = view.render_pose(field.positions()[i]);
    const auto px = try_project(cam, xc);
    if (!px || !cam.contains(*px)) continue;
    const int ix = static_cast<int>(std::lround(px->x())), iy = static_cast<int>(std::lround(px->y()));
    const double rendered = view.depth.at(ix, iy);
    if (!(rendered >= kDepthBlankThreshold) || std::abs(xc.z() - rendered) > tolerance) continue;
    candidates.push_back(static_cast<std::uint32_t>(i));
  }
  // Keep a seeded random subset of the visible points.
  for (std::size_t i = candidates.size(); i > 1; --i) {
    std::swap(candidates[i - 1], candidates[rng.below(i)]);
  }
  if (candidates.size() > config.max_keypoints) candidates.resize(config.max_keypoints);
  std::sort(candidates.begin(), candidates.end());

  DescriptorMap map;
  map.data = ImageF(w, h, field.descriptor_dim(), 0.0f);
  for (const auto i : candidates) {
    CounterRng prng(derive_seed(seed, 1 + static_cast<std::uint64_t>(i)));
    const Vec3 xc = view.render_pose(field.positions()[i]);
    Vec2 px = project(cam, xc);
    px += config.keypoint_noise_px * Vec2(prng.normal(), prng.normal());
    const int ix = static_cast<int>(std::lround(px.x())), iy = static_cast<int>(std::lround(px.y()));
    if (ix < 0 || iy < 0 || ix >= w || iy >= h) continue;
    const auto cell = static_cast<std::size_t>(iy) * static_cast<std::size_t>(w) + static_cast<std::size_t>(ix);
    if (xc.z() >= owner_z[cell]) continue;
    double sigma = config.descriptor_noise;
    if (config.structured_reliability && !reliability.empty()) sigma += config.unreliable_noise * (1 - reliability[i]);
    VecX d = field.descriptors().col(static_cast<Eigen::Index>(i));
    if (sigma > 0) {
      for (Eigen::Index k = 0; k < d.size(); ++k) d[k] += sigma * prng.normal();
      d /= d.norm();
    }
    float* out = map.data.pixel(ix, iy);
    for (Eigen::Index k = 0; k < d.size(); ++k) out[k] = static_cast<float>(d[k]);
    owner[cell] = i;
    owner_z[cell] = xc.z();
  }
  if (point_of_pixel) {
    point_of_pixel->clear();
    for (const auto o : owner)
      if (o >= 0) point_of_pixel->push_back(static_cast<std::uint32_t>(field.ids()[static_cast<std::size_t>(o)]));
  }
  return map;
}

/// Deterministic scene generation. Query images are rendered by the volume
/// renderer at their ground-truth poses with their stored seeds.
inline SceneBundle generate_scene(const SyntheticSceneConfig& config) {
  config.validate();
  SceneBundle bundle;
  bundle.config = config;
  CounterRng geometry_rng(derive_seed(config.seed, 1));
  std::vector<detail::SurfacePoint> pts;
  switch (config.kind) {
    case SceneKind::CheckerboardRoom: pts = detail::room_points(config, geometry_rng); break;
    case SceneKind::TexturedSpheres: pts = detail::sphere_points(config, geometry_rng); break;
    case SceneKind::RandomBlobs: pts = detail::blob_points(config, geometry_rng); break;
  }

  // Regenerate descriptors with a fresh sub-seed until at most 0.1% of
  // distinct pairs reach cosine similarity 0.8.
  std::vector<VecX> descriptors;
  for (std::uint32_t attempt = 0;; ++attempt) {
    require(attempt < 16, "could not draw distinct descriptors");
    const auto sub = derive_seed(config.seed, 100 + attempt);
    descriptors = detail::make_descriptors(pts, config.descriptors, config.descriptor_dim, sub);
    if (detail::similar_pair_fraction(descriptors, derive_seed(sub, 7)) <= 1e-3) {
      bundle.descriptor_attempts = attempt + 1;
      break;
    }
  }

  std::vector<NeuralPoint> points(pts.size());
  bundle.point_colors.resize(pts.size());
  bundle.reliability.assign(pts.size(), 1.0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    points[i].position = pts[i].position;
    points[i].descriptor = std::move(descriptors[i]);
    points[i].feature = color_feature(pts[i].color, config.feature_dim);
    bundle.point_colors[i] = pts[i].color;
    if (config.structured_reliability) {
      bundle.reliability[i] = detail::reliability_field(pts[i].position);
      points[i].score = bundle.reliability[i];
    }
  }
  bundle.field = build_field(points);

  const double spacing = bundle.field.mean_spacing();
  RenderSettings& rs = bundle.render;
  rs.sampler.near = 0.05;
  rs.sampler.far = 1.2 * bundle.field.scene_diameter() +
                   (config.kind == SceneKind::CheckerboardRoom ? 0.0 : 2.0);
  rs.sampler.n_samples = config.samples_per_ray;
  rs.sampler.mode = SamplingMode::Stratified;
  rs.sampler.seed = derive_seed(config.seed, 2);
  const double step = (rs.sampler.far - rs.sampler.near) / rs.sampler.n_samples;
  // A kernel narrower than the sample step lets stratified rays skip the
  // surface, so dense fields get at least one step of width.
  const double width = std::max(config.kernel_width_factor * spacing, step);
  bundle.head = RadianceHead::canonical(config.feature_dim, width, config.peak_optical_depth / step);

  CounterRng pose_rng(derive_seed(config.seed, 3));
  auto next_pose = [&] {
    return config.kind == SceneKind::CheckerboardRoom ? detail::interior_pose(config, pose_rng)
                                                      : detail::orbit_pose(pose_rng);
  };
  for (int r = 0; r < config.reference_count; ++r) bundle.reference_poses.push_back(next_pose());
  for (int q = 0; q < config.query_count; ++q) {
    SceneQuery query;
    query.camera = config.camera;
    query.gt_pose = next_pose();
    query.render_seed = derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(q));
    RenderSettings qs = rs;
    qs.sampler.seed = query.render_seed;
    const auto view = render_view(bundle.field, query.camera, query.gt_pose, qs, bundle.head);
    query.image = view.color;
    query.descriptors = synthetic_query_descriptors(bundle.field, bundle.reliability, view, config,
                                                    derive_seed(config.seed, 2000 + static_cast<std::uint64_t>(q)),
                                                    &query.keypoint_points);
    bundle.queries.push_back(std::move(query));
  }
  return bundle;
}

/// Re-renders query q of the bundle exactly as generate_scene did.
inline RenderedView rerender_query(const SceneBundle& bundle, std::size_t q) {
  RenderSettings qs = bundle.render;
  qs.sampler.seed = bundle.queries.at(q).render_seed;
  return render_view(bundle.field, bundle.queries[q].camera, bundle.queries[q].gt_pose, qs, bundle.head);
}

}  // namespace pnloc
