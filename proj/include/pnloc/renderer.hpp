// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"
#include "pnloc/geometry.hpp"
#include "pnloc/image.hpp"
#include "pnloc/parallel.hpp"
#include "pnloc/point_field.hpp"
#include "pnloc/rng.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace pnloc {

enum class SamplingMode { Stratified, Uniform };

struct RaySamplerConfig {
  double near = 0.05;
  double far = 6.5;
  int n_samples = 128;
  SamplingMode mode = SamplingMode::Stratified;
  std::uint64_t seed = 0;

  void validate() const {
    require(near > 0 && near < far, "sampler needs 0 < near < far");
    require(n_samples >= 2, "sampler needs at least two samples");
  }
};

/// Sample distances for one ray. Uniform mode spans [near, far] inclusive;
/// stratified mode draws one point per equal-width bin from the stream
/// derive_seed(config.seed, stream).
inline void sample_ray(const RaySamplerConfig& config, std::uint64_t stream,
                       std::vector<double>& out) {
  out.resize(config.n_samples);
  const double span = config.far - config.near;
  if (config.mode == SamplingMode::Uniform) {
    for (int k = 0; k < config.n_samples; ++k) {
      out[k] = config.near + span * k / (config.n_samples - 1);
    }
    out.back() = config.far;
    return;
  }
  CounterRng rng(derive_seed(config.seed, stream));
  const double width = span / config.n_samples;
  for (int k = 0; k < config.n_samples; ++k) {
    out[k] = config.near + (k + rng.uniform()) * width;
  }
}

inline std::vector<double> sample_ray(const RaySamplerConfig& config, std::uint64_t stream = 0) {
  config.validate();
  std::vector<double> out;
  sample_ray(config, stream, out);
  return out;
}

struct RadianceSample {
  double t = 0;
  double sigma = 0;
  Vec3 color = Vec3::Zero();
};

inline constexpr int kAppearanceDim = 8;

/// Per-reference-image appearance latents.
struct AppearanceTable {
  int dim = kAppearanceDim;
  std::vector<VecX> codes;

  const VecX* find(std::optional<std::size_t> id) const {
    if (!id || *id >= codes.size()) return nullptr;
    return &codes[*id];
  }
};

inline double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Maps aggregated neighbor state to (density, color).
///
///   sigma = softplus(density_weights . f + density_bias) * exp(-|o|^2 / (2 s^2))
///   color = sigmoid(color_weights [f; d; a] + color_bias)
///
/// f is the aggregated render feature, o the weighted mean offset from the
/// query location to its neighbors, d the view direction and a the optional
/// appearance latent (zeros when absent). Density never sees d or a.
struct RadianceHead {
  int feature_dim = kDefaultFeatureDim;
  int appearance_dim = kAppearanceDim;
  MatX color_weights;  // 3 x (feature_dim + 3 + appearance_dim)
  Vec3 color_bias = Vec3::Zero();
  VecX density_weights;  // feature_dim
  double density_bias = 0;
  double kernel_width = 0.05;

  int color_input_dim() const { return feature_dim + 3 + appearance_dim; }

  void validate() const {
    require(color_weights.rows() == 3 && color_weights.cols() == color_input_dim(),
            "radiance head color weights have the wrong shape");
    require(density_weights.size() == feature_dim, "radiance head density weights have the wrong size");
    require(kernel_width > 0, "radiance head kernel width must be positive");
  }

  /// Reads color logits from feature channels 0..2 and produces a
  /// feature-independent peak density `peak_sigma`.
  static RadianceHead canonical(int feature_dim, double kernel_width, double peak_sigma) {
    RadianceHead h;
    h.feature_dim = feature_dim;
    h.color_weights = MatX::Zero(3, h.color_input_dim());
    h.color_weights.block<3, 3>(0, 0).setIdentity();
    h.density_weights = VecX::Zero(feature_dim);
    // softplus^-1(peak)
    h.density_bias = peak_sigma > 30 ? peak_sigma : std::log(std::expm1(peak_sigma));
    h.kernel_width = kernel_width;
    return h;
  }
};

struct NeighborParams {
  std::size_t k = kDefaultNeighborCount;
  double radius = 0;  // <= 0 selects the field's default radius
  double epsilon = 1e-8;
};

/// Normalized aggregation weights gamma_i / (dist_i + eps). Empty when the
/// raw weights sum to zero.
inline std::vector<double> aggregation_weights(std::span<const Neighbor> neighbors,
                                               const VecX& confidences, double epsilon = 1e-8) {
  std::vector<double> w(neighbors.size());
  double total = 0;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    w[i] = confidences[neighbors[i].index] / (neighbors[i].distance + epsilon);
    total += w[i];
  }
  if (!(total > 0)) return {};
  for (auto& v : w) v /= total;
  return w;
}

/// Everything regress_radiance computed for one location; kept so that
/// training can back-propagate into the per-point features.
struct RadianceEval {
  RadianceSample sample;
  std::vector<Neighbor> neighbors;
  std::vector<double> weights;
  VecX feature;          // aggregated
  double density_pre = 0;  // density_weights . f + bias
  double kernel = 0;
  Vec3 color_pre = Vec3::Zero();
  bool empty = true;
};

inline void regress_radiance(const Vec3& x, const Vec3& d, const PointField& field,
                             const RadianceHead& head, const NeighborParams& params,
                             const VecX* appearance, RadianceEval& out) {
  out.sample.sigma = 0;
  out.sample.color.setZero();
  out.empty = true;
  field.query_neighbors(x, params.k, params.radius, out.neighbors);
  if (out.neighbors.empty()) return;
  out.weights = aggregation_weights(out.neighbors, field.confidences(), params.epsilon);
  if (out.weights.empty()) return;
  out.empty = false;

  out.feature = VecX::Zero(field.feature_dim());
  Vec3 offset = Vec3::Zero();
  for (std::size_t i = 0; i < out.neighbors.size(); ++i) {
    const auto idx = out.neighbors[i].index;
    out.feature.noalias() += out.weights[i] * field.features().col(idx);
    offset += out.weights[i] * (field.positions()[idx] - x);
  }
  out.density_pre = head.density_weights.dot(out.feature) + head.density_bias;
  out.kernel = std::exp(-offset.squaredNorm() / (2 * head.kernel_width * head.kernel_width));
  out.sample.sigma = softplus(out.density_pre) * out.kernel;

  const int fr = head.feature_dim;
  out.color_pre = head.color_weights.leftCols(fr) * out.feature +
                  head.color_weights.middleCols(fr, 3) * d + head.color_bias;
  if (appearance) out.color_pre += head.color_weights.rightCols(head.appearance_dim) * *appearance;
  for (int c = 0; c < 3; ++c) out.sample.color[c] = sigmoid(out.color_pre[c]);
}

/// Density and view-dependent color at x seen along d. No neighbors means
/// empty space: (0, black).
inline RadianceSample regress_radiance(const Vec3& x, const Vec3& d, const PointField& field,
                                       const RadianceHead& head, const NeighborParams& params = {},
                                       const VecX* appearance = nullptr) {
  RadianceEval eval;
  regress_radiance(x, d, field, head, params, appearance, eval);
  return eval.sample;
}

struct CompositeResult {
  Vec3 color = Vec3::Zero();
  double depth = 0;      // distance along the ray
  double opacity = 0;    // sum of weights
  std::vector<double> weights;  // T_k * alpha_k
};

/// Front-to-back quadrature. delta_k = t_{k+1} - t_k and the last interval
/// runs to t_far.
inline void composite(std::span<const RadianceSample> samples, double t_far, CompositeResult& out) {
  out.color.setZero();
  out.depth = 0;
  out.opacity = 0;
  out.weights.assign(samples.size(), 0.0);
  double optical_depth = 0;  // sum_{k'<k} sigma_k' delta_k'
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const double delta = (k + 1 < samples.size() ? samples[k + 1].t : t_far) - samples[k].t;
    const double tau = samples[k].sigma * delta;
    if (tau <= 0) continue;
    const double w = std::exp(-optical_depth) * -std::expm1(-tau);
    out.weights[k] = w;
    out.color += w * samples[k].color;
    out.depth += w * samples[k].t;
    out.opacity += w;
    optical_depth += tau;
  }
}

inline CompositeResult composite(std::span<const RadianceSample> samples, double t_far) {
  CompositeResult out;
  composite(samples, t_far, out);
  return out;
}

inline Vec3 composite_color(std::span<const RadianceSample> samples, double t_far) {
  return composite(samples, t_far).color;
}

inline double composite_depth(std::span<const RadianceSample> samples, double t_far) {
  return composite(samples, t_far).depth;
}

inline constexpr double kDepthBlankThreshold = 0.01;

struct RenderSettings {
  RaySamplerConfig sampler;
  NeighborParams neighbors;
  double blank_threshold = kDepthBlankThreshold;
  int threads = 1;
};

/// One volumetric render. depth holds camera z-depth (ray distance times the
/// z component of the unit camera-frame direction), 0 where nothing was hit.
struct RenderedView {
  ImageD color;  // H x W x 3
  ImageD depth;  // H x W
  Mask valid;    // 1 where depth >= blank threshold
  Pose render_pose;
  Camera camera;
  std::optional<std::size_t> appearance_id;

  double valid_fraction() const {
    std::size_t n = 0;
    for (auto v : valid.data()) n += v != 0;
    return valid.data().empty() ? 0.0 : double(n) / double(valid.data().size());
  }
};

struct PixelRender {
  Vec3 color = Vec3::Zero();
  double z_depth = 0;
};

/// Scratch buffers reused across pixels.
struct RenderScratch {
  std::vector<double> ts;
  std::vector<RadianceSample> samples;
  RadianceEval eval;
  CompositeResult composite;
};

/// Renders a single pixel: ray -> samples -> radiance -> composite.
/// `stream` selects the stratified RNG stream (the pixel's row-major index).
inline PixelRender render_pixel(const PointField& field, const Camera& camera,
                                const Pose& cam_to_world, const Vec2& pixel, std::uint64_t stream,
                                const RenderSettings& settings, const RadianceHead& head,
                                const VecX* appearance, RenderScratch& scratch) {
  const Vec3 dir_cam = pixel_direction(camera, pixel);
  const Ray ray{cam_to_world.translation, cam_to_world.rotation * dir_cam};
  sample_ray(settings.sampler, stream, scratch.ts);
  scratch.samples.resize(scratch.ts.size());
  for (std::size_t k = 0; k < scratch.ts.size(); ++k) {
    regress_radiance(ray.at(scratch.ts[k]), ray.direction, field, head, settings.neighbors,
                     appearance, scratch.eval);
    scratch.samples[k] = scratch.eval.sample;
    scratch.samples[k].t = scratch.ts[k];
  }
  composite(scratch.samples, settings.sampler.far, scratch.composite);
  return {scratch.composite.color, scratch.composite.depth * dir_cam.z()};
}

/// Renders the full image seen by `camera` at world-to-camera `pose`.
/// Deterministic for a given sampler seed regardless of thread count.
inline RenderedView render_view(const PointField& field, const Camera& camera, const Pose& pose,
                                const RenderSettings& settings, const RadianceHead& head,
                                const AppearanceTable* appearance_table = nullptr,
                                std::optional<std::size_t> appearance_id = std::nullopt) {
  camera.validate();
  settings.sampler.validate();
  RenderedView view;
  view.color = ImageD(camera.width, camera.height, 3);
  view.depth = ImageD(camera.width, camera.height, 1);
  view.valid = Mask(camera.width, camera.height, 1);
  view.render_pose = pose;
  view.camera = camera;
  view.appearance_id = appearance_id;
  if (field.empty()) return view;
  head.validate();
  const VecX* appearance = appearance_table ? appearance_table->find(appearance_id) : nullptr;
  const Pose cam_to_world = pose.inverse();
  parallel_for(static_cast<std::size_t>(camera.height), settings.threads, [&](std::size_t row) {
    RenderScratch scratch;
    const int y = static_cast<int>(row);
    for (int x = 0; x < camera.width; ++x) {
      const auto stream = static_cast<std::uint64_t>(y) * camera.width + x;
      const auto px = render_pixel(field, camera, cam_to_world, Vec2(x, y), stream, settings, head,
                                   appearance, scratch);
      for (int c = 0; c < 3; ++c) view.color.at(x, y, c) = px.color[c];
      view.depth.at(x, y) = px.z_depth;
      view.valid.at(x, y) = px.z_depth >= settings.blank_threshold ? 1 : 0;
    }
  });
  return view;
}

/// Renders only the listed pixels (same per-pixel streams as render_view).
inline std::vector<PixelRender> render_pixels(const PointField& field, const Camera& camera,
                                              const Pose& pose, std::span<const Vec2> pixels,
                                              const RenderSettings& settings, const RadianceHead& head,
                                              const VecX* appearance = nullptr) {
  std::vector<PixelRender> out(pixels.size());
  if (field.empty()) return out;
  const Pose cam_to_world = pose.inverse();
  parallel_for(pixels.size(), settings.threads, [&](std::size_t i) {
    thread_local RenderScratch scratch;
    const auto x = static_cast<std::uint64_t>(std::llround(pixels[i].x()));
    const auto y = static_cast<std::uint64_t>(std::llround(pixels[i].y()));
    out[i] = render_pixel(field, camera, cam_to_world, pixels[i], y * camera.width + x, settings, head,
                          appearance, scratch);
  });
  return out;
}

struct RenderLoss {
  double loss = 0;
  std::size_t rays = 0;
  bool empty_mask = false;  // set when the mask excluded every pixel
};

/// Sum over valid (and mask-true) pixels of the squared RGB error.
inline RenderLoss render_loss(const RenderedView& rendered, const ImageD& target,
                              const Mask* mask = nullptr) {
  const int w = rendered.color.width(), h = rendered.color.height();
  if (!target.same_shape(w, h) || target.channels() != 3 || (mask && !mask->same_shape(w, h))) {
    throw Error(ErrorCode::DimensionMismatch, "render_loss inputs must share dimensions");
  }
  RenderLoss out;
  bool any_mask = false;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask && mask->at(x, y) == 0) continue;
      any_mask = true;
      if (rendered.valid.at(x, y) == 0) continue;
      for (int c = 0; c < 3; ++c) {
        const double e = rendered.color.at(x, y, c) - target.at(x, y, c);
        out.loss += e * e;
      }
      ++out.rays;
    }
  }
  out.empty_mask = !any_mask;
  return out;
}

}  // namespace pnloc
