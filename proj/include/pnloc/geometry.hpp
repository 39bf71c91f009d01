// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"

#include <Eigen/LU>

#include <cmath>
#include <numbers>
#include <optional>

namespace pnloc {

/// Rigid transform. Every Pose in this library maps WORLD points into the
/// CAMERA frame: x_cam = rotation * x_world + translation. Camera-to-world
/// transforms are obtained with inverse().
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  Pose inverse() const {
    Pose out;
    out.rotation = rotation.transpose();
    out.translation = -(out.rotation * translation);
    return out;
  }

  /// (a * b)(x) == a(b(x)).
  Pose operator*(const Pose& rhs) const {
    Pose out;
    out.rotation = rotation * rhs.rotation;
    out.translation = rotation * rhs.translation + translation;
    return out;
  }

  Vec3 operator()(const Vec3& point) const { return rotation * point + translation; }

  /// Camera center in world coordinates when this is a world-to-camera pose.
  Vec3 center() const { return -(rotation.transpose() * translation); }

  /// Unit quaternion with w >= 0.
  Eigen::Quaterniond quaternion() const {
    Eigen::Quaterniond q(rotation);
    q.normalize();
    if (q.w() < 0) q.coeffs() *= -1.0;
    return q;
  }

  static Pose from_quaternion(double qw, double qx, double qy, double qz, const Vec3& t) {
    Eigen::Quaterniond q(qw, qx, qy, qz);
    require(q.norm() > 1e-12, "quaternion must be non-zero");
    q.normalize();
    return {q.toRotationMatrix(), t};
  }

  bool is_valid(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
  }
};

inline Pose compose(const Pose& a, const Pose& b) { return a * b; }
inline Vec3 transform(const Pose& pose, const Vec3& point) { return pose(point); }

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

namespace detail {

// Coefficients of the Rodrigues / SE(3) left-Jacobian series:
//   a = sin(t)/t, b = (1-cos t)/t^2, c = (t - sin t)/t^3.
struct RodriguesCoeffs {
  double a, b, c;
};

inline RodriguesCoeffs rodrigues_coeffs(double theta) {
  const double t2 = theta * theta;
  if (theta < 1e-3) {
    return {1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0};
  }
  const double s = std::sin(theta), c = std::cos(theta);
  return {s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta)};
}

}  // namespace detail

inline Mat3 so3_exp(const Vec3& w) {
  const auto k = detail::rodrigues_coeffs(w.norm());
  const Mat3 W = hat(w);
  return Mat3::Identity() + k.a * W + k.b * W * W;
}

/// Rotation angle in [0, pi], stable across the whole range.
inline double rotation_angle(const Mat3& r) {
  const double cos_t = 0.5 * (r.trace() - 1.0);
  const double sin_t = 0.5 * vee(r - r.transpose()).norm();
  return std::atan2(sin_t, cos_t);
}

/// Axis-angle vector of a rotation. Throws NearPiAmbiguity at angles within
/// 1e-6 of pi, where the axis sign is not recoverable.
inline Vec3 so3_log(const Mat3& r) {
  const Vec3 w = 0.5 * vee(r - r.transpose());  // sin(theta) * axis
  const double cos_t = 0.5 * (r.trace() - 1.0);
  const double theta = std::atan2(w.norm(), cos_t);
  if (theta >= std::numbers::pi - 1e-6) {
    throw Error(ErrorCode::NearPiAmbiguity, "rotation angle too close to pi for log");
  }
  if (theta < 1e-3) {
    const double t2 = theta * theta;
    return (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0) * w;
  }
  if (cos_t > -0.9) return (theta / std::sin(theta)) * w;
  // Near pi the antisymmetric part vanishes; read the axis from the symmetric part.
  const Mat3 b = 0.5 * (r + r.transpose()) - cos_t * Mat3::Identity();  // (1-cos) k k^T
  int j = 0;
  b.diagonal().maxCoeff(&j);
  Vec3 axis = b.col(j) / std::sqrt(b(j, j) * (1.0 - cos_t));
  axis.normalize();
  if (axis.dot(w) < 0) axis = -axis;
  return theta * axis;
}

/// Tangent vector (rotation part first, then translation part).
using Se3Tangent = Vec6;

inline Pose se3_exp(const Se3Tangent& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  const auto k = detail::rodrigues_coeffs(w.norm());
  const Mat3 W = hat(w);
  const Mat3 W2 = W * W;
  Pose out;
  out.rotation = Mat3::Identity() + k.a * W + k.b * W2;
  out.translation = (Mat3::Identity() + k.b * W + k.c * W2) * v;
  return out;
}

inline Se3Tangent se3_log(const Pose& pose) {
  const Vec3 w = so3_log(pose.rotation);
  const double theta = w.norm();
  const Mat3 W = hat(w);
  double d;
  if (theta < 1e-3) {
    const double t2 = theta * theta;
    d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    const auto k = detail::rodrigues_coeffs(theta);
    d = (1.0 - k.a / (2.0 * k.b)) / (theta * theta);
  }
  const Mat3 v_inv = Mat3::Identity() - 0.5 * W + d * W * W;
  Se3Tangent xi;
  xi << w, v_inv * pose.translation;
  return xi;
}

/// Pinhole intrinsics. Pixel (0,0) is the center of the top-left pixel.
struct Camera {
  double fx = 1, fy = 1, cx = 0.5, cy = 0.5;
  int width = 1, height = 1;

  void validate() const {
    require(fx > 0 && fy > 0, "camera focal lengths must be positive");
    require(cx > 0 && cx < width && cy > 0 && cy < height,
            "camera principal point must lie inside the image");
  }

  bool operator==(const Camera&) const = default;

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }

  bool contains(const Vec2& pixel) const {
    return pixel.x() >= 0 && pixel.y() >= 0 && pixel.x() <= width - 1 && pixel.y() <= height - 1;
  }
};

inline constexpr double kMinProjectDepth = 1e-12;

inline std::optional<Vec2> try_project(const Camera& camera, const Vec3& point_cam) noexcept {
  if (!(point_cam.z() > kMinProjectDepth)) return std::nullopt;
  return Vec2(camera.fx * point_cam.x() / point_cam.z() + camera.cx,
              camera.fy * point_cam.y() / point_cam.z() + camera.cy);
}

/// Pinhole projection; the result may fall outside the image.
inline Vec2 project(const Camera& camera, const Vec3& point_cam) {
  auto px = try_project(camera, point_cam);
  if (!px) throw Error(ErrorCode::NonPositiveDepth, "cannot project point with z <= 1e-12");
  return *px;
}

/// Inverse of project at z == depth.
inline Vec3 backproject(const Camera& camera, const Vec2& pixel, double depth) {
  if (!(depth > 0)) throw Error(ErrorCode::NonPositiveDepth, "backprojection depth must be > 0");
  return {(pixel.x() - camera.cx) / camera.fx * depth, (pixel.y() - camera.cy) / camera.fy * depth,
          depth};
}

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();

  Vec3 at(double t) const { return origin + t * direction; }
};

/// Unit viewing direction of a pixel in the camera frame.
inline Vec3 pixel_direction(const Camera& camera, const Vec2& pixel) {
  return Vec3((pixel.x() - camera.cx) / camera.fx, (pixel.y() - camera.cy) / camera.fy, 1.0)
      .normalized();
}

inline Ray ray_through_pixel(const Camera& camera, const Pose& cam_to_world, const Vec2& pixel) {
  return {cam_to_world.translation, cam_to_world.rotation * pixel_direction(camera, pixel)};
}

/// World-to-camera pose of a camera at `eye` looking at `target`; image y
/// points along -up.
inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) x = z.cross(Vec3::UnitX());
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 cam_to_world;
  cam_to_world.col(0) = x;
  cam_to_world.col(1) = y;
  cam_to_world.col(2) = z;
  Pose c2w{cam_to_world, eye};
  return c2w.inverse();
}

}  // namespace pnloc
