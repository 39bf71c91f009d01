// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"
#include "pnloc/geometry.hpp"
#include "pnloc/image.hpp"
#include "pnloc/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace pnloc {

inline constexpr int kDefaultDescriptorDim = 128;
inline constexpr int kDefaultFeatureDim = 8;
inline constexpr std::size_t kDefaultNeighborCount = 8;

struct NeuralPoint {
  Vec3 position = Vec3::Zero();
  VecX descriptor;  // scene-agnostic, unit norm
  VecX feature;     // render feature
  double confidence = 1.0;
  double score = 1.0;
};

class PointField;
inline PointField build_field(std::span<const NeuralPoint> points);
inline PointField filter_by_score(const PointField& field, double threshold);

/// Immutable neural point cloud with an exact spatial index.
///
/// Storage is column-per-point: descriptors() is F_a x N and features() is
/// F_r x N so matching can run as one dense product.
class PointField {
 public:
  PointField() = default;

  std::size_t size() const noexcept { return positions_.size(); }
  bool empty() const noexcept { return positions_.empty(); }
  int descriptor_dim() const noexcept { return static_cast<int>(descriptors_.rows()); }
  int feature_dim() const noexcept { return static_cast<int>(features_.rows()); }

  const std::vector<Vec3>& positions() const noexcept { return positions_; }
  const MatX& descriptors() const noexcept { return descriptors_; }
  const MatX& features() const noexcept { return features_; }
  const VecX& confidences() const noexcept { return confidences_; }
  const VecX& scores() const noexcept { return scores_; }
  /// Index of each point in the field it was originally built from.
  const std::vector<std::uint32_t>& ids() const noexcept { return ids_; }

  NeuralPoint point(std::size_t i) const {
    return {positions_[i], descriptors_.col(i), features_.col(i), confidences_[i], scores_[i]};
  }

  /// Axis-aligned bounding-box diagonal (the diameter of the box's
  /// circumscribed sphere); 1 for degenerate single-location fields.
  double scene_diameter() const noexcept { return diameter_; }
  Vec3 center() const noexcept { return center_; }
  /// Mean distance from each point to its nearest other point.
  double mean_spacing() const noexcept { return mean_spacing_; }
  /// Neighbor radius used when callers pass radius <= 0.
  double default_radius() const noexcept { return default_radius_; }

  const KdTree& index() const noexcept { return *index_; }

  void query_neighbors(const Vec3& x, std::size_t k, double radius,
                       std::vector<Neighbor>& out) const {
    index_->query(x, k, radius > 0 ? radius : default_radius_, out);
  }

  /// Same geometry, replaced render features and scores.
  PointField with_features_and_scores(MatX features, VecX scores) const {
    require(features.cols() == static_cast<Eigen::Index>(size()) &&
                scores.size() == static_cast<Eigen::Index>(size()),
            "feature/score count must match the field");
    PointField out = *this;
    out.features_ = std::move(features);
    out.scores_ = std::move(scores);
    return out;
  }

  friend PointField build_field(std::span<const NeuralPoint> points);
  friend PointField filter_by_score(const PointField& field, double threshold);

 private:
  void finalize();

  std::vector<Vec3> positions_;
  MatX descriptors_;
  MatX features_;
  VecX confidences_;
  VecX scores_;
  std::vector<std::uint32_t> ids_;
  double diameter_ = 1.0;
  Vec3 center_ = Vec3::Zero();
  double mean_spacing_ = 0.0;
  double default_radius_ = 1.0;
  std::shared_ptr<const KdTree> index_ = std::make_shared<KdTree>();
};

inline void PointField::finalize() {
  index_ = std::make_shared<KdTree>(std::span<const Vec3>(positions_));
  if (positions_.empty()) return;
  Vec3 lo = positions_.front(), hi = lo;
  for (const auto& p : positions_) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  center_ = 0.5 * (lo + hi);
  diameter_ = (hi - lo).norm();
  if (!(diameter_ > 0)) diameter_ = 1.0;

  double sum = 0.0;
  std::vector<Neighbor> nn;
  for (const auto& p : positions_) {
    index_->query(p, 2, std::numeric_limits<double>::infinity(), nn);
    if (nn.size() == 2) sum += nn[1].distance;
  }
  mean_spacing_ = positions_.size() > 1 ? sum / static_cast<double>(positions_.size()) : 0.0;
  default_radius_ = mean_spacing_ > 0 ? 2.0 * mean_spacing_ : diameter_;
}

/// Builds the field and its index. Throws EmptyCloud / NonFiniteCoordinate.
inline PointField build_field(std::span<const NeuralPoint> points) {
  if (points.empty()) throw Error(ErrorCode::EmptyCloud, "point field needs at least one point");
  const auto fa = points.front().descriptor.size();
  const auto fr = points.front().feature.size();
  PointField field;
  const auto n = static_cast<Eigen::Index>(points.size());
  field.positions_.reserve(points.size());
  field.descriptors_.resize(fa, n);
  field.features_.resize(fr, n);
  field.confidences_.resize(n);
  field.scores_.resize(n);
  field.ids_.resize(points.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = points[i];
    if (!p.position.allFinite()) {
      throw Error(ErrorCode::NonFiniteCoordinate, "point " + std::to_string(i) + " is not finite");
    }
    require(p.descriptor.size() == fa && p.feature.size() == fr,
            "all points must share descriptor and feature dimensions");
    require(fa == 0 || std::abs(p.descriptor.norm() - 1.0) <= 1e-6,
            "descriptor of point " + std::to_string(i) + " is not unit norm");
    require(p.confidence >= 0 && p.confidence <= 1 && p.score >= 0 && p.score <= 1,
            "confidence and score must lie in [0, 1]");
    field.positions_.push_back(p.position);
    field.descriptors_.col(i) = p.descriptor;
    field.features_.col(i) = p.feature;
    field.confidences_[i] = p.confidence;
    field.scores_[i] = p.score;
    field.ids_[i] = static_cast<std::uint32_t>(i);
  }
  field.finalize();
  return field;
}

/// Up to k neighbors of x within radius, nearest first. Empty is valid.
inline std::vector<Neighbor> query_neighbors(const PointField& field, const Vec3& x,
                                             std::size_t k, double radius) {
  std::vector<Neighbor> out;
  field.query_neighbors(x, k, radius, out);
  return out;
}

/// Points with score >= threshold, in original order, re-indexed.
/// Throws AllFiltered when nothing survives.
inline PointField filter_by_score(const PointField& field, double threshold) {
  require(threshold >= 0 && threshold <= 1, "score threshold must lie in [0, 1]");
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < field.scores_.size(); ++i) {
    if (field.scores_[i] >= threshold) keep.push_back(i);
  }
  if (keep.empty()) throw Error(ErrorCode::AllFiltered, "no point reaches the score threshold");
  PointField out;
  const auto n = static_cast<Eigen::Index>(keep.size());
  out.positions_.reserve(keep.size());
  out.descriptors_.resize(field.descriptors_.rows(), n);
  out.features_.resize(field.features_.rows(), n);
  out.confidences_.resize(n);
  out.scores_.resize(n);
  out.ids_.resize(keep.size());
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto i = keep[j];
    out.positions_.push_back(field.positions_[i]);
    out.descriptors_.col(j) = field.descriptors_.col(i);
    out.features_.col(j) = field.features_.col(i);
    out.confidences_[j] = field.confidences_[i];
    out.scores_[j] = field.scores_[i];
    out.ids_[j] = field.ids_[i];
  }
  out.finalize();
  return out;
}

/// Dense H x W x F_a descriptor image, optionally with a per-pixel
/// reliability score channel.
struct DescriptorMap {
  ImageF data;
  std::optional<ImageF> scores;

  int width() const noexcept { return data.width(); }
  int height() const noexcept { return data.height(); }
  int channels() const noexcept { return data.channels(); }
};

/// Sub-pixel descriptor lookup: per-channel bilinear interpolation followed
/// by re-normalization. Out-of-bounds (or zero) lookups yield nullopt.
inline std::vector<std::optional<VecX>> lift_descriptors(const DescriptorMap& map,
                                                         std::span<const Vec2> projections) {
  std::vector<std::optional<VecX>> out;
  out.reserve(projections.size());
  VecX buf(map.channels());
  for (const auto& px : projections) {
    if (!try_bilinear_sample(map.data, px, buf.data())) {
      out.emplace_back(std::nullopt);
      continue;
    }
    const double norm = buf.norm();
    if (!(norm > 1e-12)) {
      out.emplace_back(std::nullopt);
      continue;
    }
    out.emplace_back(buf / norm);
  }
  return out;
}

/// Pixels carrying a non-zero descriptor, strongest score first (row-major
/// order when the map has no score channel), at most max_count of them.
inline std::vector<Vec2> detect_keypoints(const DescriptorMap& map, std::size_t max_count) {
  struct Candidate {
    double score;
    int x, y;
  };
  std::vector<Candidate> cands;
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      const float* d = map.data.pixel(x, y);
      double n2 = 0;
      for (int c = 0; c < map.channels(); ++c) n2 += double(d[c]) * d[c];
      if (n2 <= 1e-12) continue;
      cands.push_back({map.scores ? double(map.scores->at(x, y)) : 1.0, x, y});
    }
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  if (cands.size() > max_count) cands.resize(max_count);
  std::vector<Vec2> out;
  out.reserve(cands.size());
  for (const auto& c : cands) out.emplace_back(c.x, c.y);
  return out;
}

/// Render-feature layout shared by the canonical radiance head: channels
/// 0..2 hold color logits, the remaining channels are free.
inline VecX color_feature(const Vec3& rgb, int feature_dim) {
  require(feature_dim >= 3, "render features need at least 3 channels");
  VecX f = VecX::Zero(feature_dim);
  for (int c = 0; c < 3; ++c) {
    const double v = std::clamp(rgb[c], 1e-3, 1.0 - 1e-3);
    f[c] = std::log(v / (1.0 - v));
  }
  return f;
}

/// One posed RGB-D reference image with its descriptor map.
struct PosedRgbdView {
  ImageD color;  // H x W x 3 in [0, 1]
  ImageD depth;  // H x W, z-depth in meters, 0 = unknown
  std::optional<Mask> mask;
  DescriptorMap descriptors;
  Camera camera;
  Pose pose;  // world-to-camera
};

struct ViewPoints {
  std::vector<NeuralPoint> points;
  std::vector<Vec3> observed_colors;
  std::vector<std::uint32_t> source_view;
};

/// Deterministic field construction: back-project every stride-th pixel with
/// valid depth (>= min_depth) and mask, attach the lifted descriptor and a
/// color-initialized render feature. Descriptor maps whose resolution
/// differs from the image are addressed in scaled pixel coordinates.
inline ViewPoints points_from_views(std::span<const PosedRgbdView> views, int stride,
                                    int feature_dim = kDefaultFeatureDim,
                                    double min_depth = 0.01) {
  require(stride >= 1, "stride must be >= 1");
  ViewPoints out;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const auto& view = views[v];
    require(view.depth.same_shape(view.color.width(), view.color.height()),
            "depth and color must share dimensions");
    const Pose cam_to_world = view.pose.inverse();
    const double sx = view.color.width() > 1 && view.descriptors.width() > 1
                          ? double(view.descriptors.width() - 1) / (view.color.width() - 1)
                          : 1.0;
    const double sy = view.color.height() > 1 && view.descriptors.height() > 1
                          ? double(view.descriptors.height() - 1) / (view.color.height() - 1)
                          : 1.0;
    for (int y = 0; y < view.color.height(); y += stride) {
      for (int x = 0; x < view.color.width(); x += stride) {
        const double d = view.depth.at(x, y);
        if (!(d >= min_depth)) continue;
        if (view.mask && view.mask->at(x, y) == 0) continue;
        const Vec2 px(x, y);
        const Vec2 dpx(x * sx, y * sy);
        auto desc = lift_descriptors(view.descriptors, std::span<const Vec2>(&dpx, 1)).front();
        if (!desc) continue;
        const Vec3 rgb(view.color.at(x, y, 0), view.color.at(x, y, 1), view.color.at(x, y, 2));
        NeuralPoint p;
        p.position = cam_to_world(backproject(view.camera, px, d));
        p.descriptor = std::move(*desc);
        p.feature = color_feature(rgb, feature_dim);
        out.points.push_back(std::move(p));
        out.observed_colors.push_back(rgb);
        out.source_view.push_back(static_cast<std::uint32_t>(v));
      }
    }
  }
  return out;
}

}  // namespace pnloc
