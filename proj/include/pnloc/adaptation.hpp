// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"
#include "pnloc/mlp.hpp"
#include "pnloc/point_field.hpp"
#include "pnloc/renderer.hpp"
#include "pnloc/rng.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <vector>

namespace pnloc {

inline constexpr int kDefaultAdaptationHidden = 64;

/// Positions enter the network as (p - center) / scale.
struct PositionNormalizer {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return (p - center) / scale; }
  bool operator==(const PositionNormalizer&) const = default;
};

/// Four dense tanh layers mapping [descriptor; normalized position] to
/// [render feature; score logit].
class AdaptationModel {
 public:
  using Network = Mlp<TanhActivation>;

  AdaptationModel() = default;

  AdaptationModel(int descriptor_dim, int feature_dim, int hidden, std::uint64_t seed,
                  PositionNormalizer normalizer = {})
      : normalizer_(normalizer) {
    require(descriptor_dim >= 1 && feature_dim >= 1 && hidden >= 1, "adaptation dims must be positive");
    require(normalizer.scale > 0, "position scale must be positive");
    const int dims[] = {descriptor_dim + 3, hidden, hidden, hidden, feature_dim + 1};
    network_ = Network(dims, seed);
  }

  AdaptationModel(Network network, PositionNormalizer normalizer)
      : network_(std::move(network)), normalizer_(normalizer) {
    require(network_.input_dim() >= 4 && network_.output_dim() >= 2, "adaptation network too small");
  }

  /// Sized for a field: normalizer from its bounding box.
  static AdaptationModel for_field(const PointField& field, int feature_dim = kDefaultFeatureDim,
                                   int hidden = kDefaultAdaptationHidden, std::uint64_t seed = 0) {
    return AdaptationModel(field.descriptor_dim(), feature_dim, hidden, seed,
                           {field.center(), field.scene_diameter()});
  }

  Network& network() { return network_; }
  const Network& network() const { return network_; }
  const PositionNormalizer& normalizer() const { return normalizer_; }
  int descriptor_dim() const { return network_.input_dim() - 3; }
  int feature_dim() const { return network_.output_dim() - 1; }

  VecX input(const VecX& descriptor, const Vec3& position) const {
    require(descriptor.size() == descriptor_dim(), "descriptor dimension mismatch");
    VecX x(descriptor.size() + 3);
    x << descriptor, normalizer_.apply(position);
    return x;
  }

  /// Inputs for the given field columns, one column each.
  MatX inputs(const PointField& field, std::span<const std::size_t> indices) const {
    require(field.descriptor_dim() == descriptor_dim(), "descriptor dimension mismatch");
    MatX x(descriptor_dim() + 3, static_cast<Eigen::Index>(indices.size()));
    for (std::size_t j = 0; j < indices.size(); ++j) {
      const auto i = static_cast<Eigen::Index>(indices[j]);
      x.col(j).head(descriptor_dim()) = field.descriptors().col(i);
      x.col(j).tail<3>() = normalizer_.apply(field.positions()[indices[j]]);
    }
    return x;
  }

  bool operator==(const AdaptationModel&) const = default;

 private:
  Network network_;
  PositionNormalizer normalizer_;
};

struct Adapted {
  VecX feature;
  double score = 0;
  double score_logit = 0;
};

inline Adapted adapt(const AdaptationModel& model, const VecX& descriptor, const Vec3& position) {
  const VecX out = model.network().forward(model.input(descriptor, position));
  const int fr = model.feature_dim();
  return {out.head(fr), sigmoid(out[fr]), out[fr]};
}

enum class AdaptMode { ScoresOnly, FeaturesAndScores };

/// Runs the model over every point and stores its scores (and optionally
/// its render features) in a copy of the field.
inline PointField apply_adaptation(const PointField& field, const AdaptationModel& model,
                                   AdaptMode mode = AdaptMode::ScoresOnly) {
  std::vector<std::size_t> all(field.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const MatX out = model.network().forward_batch(model.inputs(field, all));
  const int fr = model.feature_dim();
  VecX scores = out.row(fr).transpose().unaryExpr(&sigmoid);
  MatX features = mode == AdaptMode::FeaturesAndScores ? MatX(out.topRows(fr)) : field.features();
  return field.with_features_and_scores(std::move(features), std::move(scores));
}

/// Product of layer spectral norms; bounds the network's Lipschitz constant
/// because |tanh'| <= 1.
template <typename Activation>
double lipschitz_bound(const Mlp<Activation>& mlp) {
  double bound = 1.0;
  for (const auto& l : mlp.layers()) {
    Eigen::JacobiSVD<MatX> svd(l.weights);
    bound *= svd.singularValues()[0];
  }
  return bound;
}

/// Compares analytic gradients of u . f(x) against central differences for
/// random inputs x and upstream directions u. Each sample probes a random
/// subset of parameter coordinates plus every input coordinate; the error
/// is |a - n| / max(|a|, |n|) over each probed vector. A network is affine
/// in any single weight when its activation is linear, so that case is
/// exact up to rounding.
template <typename Activation>
double grad_check(const Mlp<Activation>& mlp, int samples, double eps, std::uint64_t seed = 0,
                  int coordinates_per_sample = 32) {
  require(eps > 1e-8 && eps < 1e-3, "grad_check step must lie in (1e-8, 1e-3)");
  require(samples >= 1, "grad_check needs at least one sample");
  CounterRng rng(seed);
  auto randn = [&](Eigen::Index n) {
    VecX v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
    return v;
  };
  auto rel = [](const VecX& a, const VecX& n) {
    const double scale = std::max({a.norm(), n.norm(), 1e-300});
    return (a - n).norm() / scale;
  };
  const VecX theta = mlp.parameters();
  Mlp<Activation> probe = mlp;
  double worst = 0;
  for (int s = 0; s < samples; ++s) {
    const VecX x = randn(mlp.input_dim());
    const VecX u = randn(mlp.output_dim());
    typename Mlp<Activation>::Tape tape;
    mlp.forward(x, tape);
    auto grads = mlp.zero_gradients();
    const VecX gx = mlp.backward(tape, u, grads);
    const VecX gp = Mlp<Activation>::flatten(grads);

    VecX analytic(coordinates_per_sample), numeric(coordinates_per_sample);
    VecX perturbed = theta;
    for (int k = 0; k < coordinates_per_sample; ++k) {
      const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(theta.size())));
      perturbed[i] = theta[i] + eps;
      probe.set_parameters(perturbed);
      const double fp = u.dot(probe.forward(x));
      perturbed[i] = theta[i] - eps;
      probe.set_parameters(perturbed);
      const double fm = u.dot(probe.forward(x));
      perturbed[i] = theta[i];
      analytic[k] = gp[i];
      numeric[k] = (fp - fm) / (2 * eps);
    }
    worst = std::max(worst, rel(analytic, numeric));

    VecX nx(x.size());
    VecX xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      xp[i] = x[i] + eps;
      const double fp = u.dot(mlp.forward(xp));
      xp[i] = x[i] - eps;
      const double fm = u.dot(mlp.forward(xp));
      xp[i] = x[i];
      nx[i] = (fp - fm) / (2 * eps);
    }
    worst = std::max(worst, rel(gx, nx));
  }
  return worst;
}

enum class TrainObjective { ProxyColor, FullRender };

struct TrainConfig {
  double learning_rate = 1e-3;
  int steps = 500;
  std::size_t batch_size = 0;  // 0 = full batch
  TrainObjective objective = TrainObjective::ProxyColor;
  std::uint64_t seed = 0;
  double score_weight = 0.1;
  double tau_floor = 1e-4;  // lower bound on the score temperature
  std::size_t rays_per_step = 64;  // full_render only

  void validate() const {
    require(learning_rate >= 0, "learning rate must be non-negative");
    require(steps >= 1, "training needs at least one step");
    require(score_weight >= 0 && tau_floor > 0, "invalid score supervision settings");
  }
};

/// Points with their observed reference colors.
struct TrainingSet {
  PointField field;
  std::vector<Vec3> colors;
};

/// Reference views and renderer settings for the full_render objective.
struct RenderSupervision {
  std::span<const PosedRgbdView> views;
  RenderSettings settings;
};

struct TrainResult {
  std::vector<double> loss_trace;  // total loss per step
  double final_loss = 0;
  double color_loss = 0;
  double score_loss = 0;
};

namespace detail {

struct ProxyTerms {
  double color = 0;
  double score = 0;
  MatX upstream;  // dL/d(network output)
};

// Color through the head's feature branch (zero direction and appearance)
// plus score regression toward exp(-r^2 / tau). The target is differentiated
// too, so the total is a fixed function of the weights.
inline ProxyTerms proxy_terms(const MatX& out, const MatX& colors, const RadianceHead& head,
                              const TrainConfig& cfg, bool need_color_grad) {
  const int fr = static_cast<int>(out.rows()) - 1;
  const auto b = out.cols();
  const double inv_b = 1.0 / static_cast<double>(b);
  ProxyTerms t;
  t.upstream = MatX::Zero(out.rows(), b);
  MatX pre = head.color_weights.leftCols(fr) * out.topRows(fr);
  pre.colwise() += head.color_bias;
  const MatX c = pre.unaryExpr(&sigmoid);
  const MatX diff = c - colors;
  const VecX r2 = diff.colwise().squaredNorm().transpose();
  const bool tau_free = r2.mean() > cfg.tau_floor;
  const double tau = tau_free ? r2.mean() : cfg.tau_floor;
  t.color = r2.mean();

  VecX dy(b), y(b);
  double dtau = 0;
  for (Eigen::Index j = 0; j < b; ++j) {
    y[j] = std::exp(-r2[j] / tau);
    const double s = sigmoid(out(fr, j));
    const double e = s - y[j];
    t.score += e * e * inv_b;
    t.upstream(fr, j) = cfg.score_weight * 2.0 * e * s * (1 - s) * inv_b;
    dy[j] = -2.0 * e * inv_b;
    dtau += dy[j] * y[j] * r2[j] / (tau * tau);
  }
  if (need_color_grad) {
    VecX dr2(b);
    for (Eigen::Index j = 0; j < b; ++j) {
      dr2[j] = inv_b + cfg.score_weight * (-dy[j] * y[j] / tau + (tau_free ? dtau * inv_b : 0.0));
    }
    MatX dpre = 2.0 * diff.cwiseProduct(c.cwiseProduct((1.0 - c.array()).matrix()));
    dpre = dpre * dr2.asDiagonal();
    t.upstream.topRows(fr) = head.color_weights.leftCols(fr).transpose() * dpre;
  }
  return t;
}

struct TracedSample {
  RadianceEval eval;
  double delta = 0;
};

// Backward of one composited ray: accumulates dL/d(point feature) for
// L = |C - target|^2.
inline double render_ray_backward(const RadianceHead& head,
                                  const std::vector<TracedSample>& traced,
                                  const CompositeResult& comp, const Vec3& target,
                                  double scale, MatX& feature_grad) {
  const Vec3 diff = comp.color - target;
  const Vec3 dC = 2.0 * scale * diff;
  const std::size_t n = traced.size();
  // suffix[k] = sum_{j>k} w_j c_j
  std::vector<Vec3> suffix(n + 1, Vec3::Zero());
  for (std::size_t k = n; k-- > 0;) suffix[k] = suffix[k + 1] + comp.weights[k] * traced[k].eval.sample.color;
  double optical = 0;
  const int fr = head.feature_dim;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& e = traced[k].eval;
    const double tau = e.sample.sigma * traced[k].delta;
    if (e.empty) {
      optical += tau;
      continue;
    }
    const double t_next = std::exp(-(optical + tau));
    optical += tau;
    const double dtau = dC.dot(t_next * e.sample.color - suffix[k + 1]);
    const double dsigma = dtau * traced[k].delta;
    const double dz = dsigma * sigmoid(e.density_pre) * e.kernel;
    Vec3 dpre;
    for (int c = 0; c < 3; ++c) {
      const double col = e.sample.color[c];
      dpre[c] = comp.weights[k] * dC[c] * col * (1 - col);
    }
    const VecX df = head.color_weights.leftCols(fr).transpose() * dpre + dz * head.density_weights;
    for (std::size_t i = 0; i < e.neighbors.size(); ++i) {
      feature_grad.col(e.neighbors[i].index) += e.weights[i] * df;
    }
  }
  return scale * diff.squaredNorm();
}

}  // namespace detail

/// Fits the adaptation model. Throws DivergedLoss when the loss becomes
/// non-finite or exceeds ten times its initial value.
inline TrainResult train_adaptation(AdaptationModel& model, const TrainingSet& data,
                                    const RadianceHead& head, const TrainConfig& config,
                                    const RenderSupervision* supervision = nullptr) {
  config.validate();
  head.validate();
  const auto n = data.field.size();
  require(n >= 1 && data.colors.size() == n, "training set needs one color per point");
  require(head.feature_dim == model.feature_dim(), "head and model feature dims differ");
  if (config.objective == TrainObjective::FullRender) {
    require(supervision != nullptr && !supervision->views.empty(),
            "full_render training needs reference views");
  }
  auto& net = model.network();
  Adam adam(static_cast<Eigen::Index>(net.parameter_count()), {config.learning_rate});
  const int fr = model.feature_dim();

  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  const MatX all_inputs = model.inputs(data.field, all);
  MatX all_colors(3, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) all_colors.col(static_cast<Eigen::Index>(i)) = data.colors[i];

  TrainResult result;
  double initial = 0;
  std::vector<std::size_t> batch;
  for (int step = 0; step < config.steps; ++step) {
    CounterRng rng(derive_seed(config.seed, static_cast<std::uint64_t>(step)));
    auto grads = net.zero_gradients();
    double loss = 0;
    MatX out;
    typename AdaptationModel::Network::BatchTape tape;
    detail::ProxyTerms terms;

    if (config.objective == TrainObjective::ProxyColor) {
      const bool full = config.batch_size == 0 || config.batch_size >= n;
      MatX x, colors;
      if (full) {
        x = all_inputs;
        colors = all_colors;
      } else {
        x.resize(all_inputs.rows(), static_cast<Eigen::Index>(config.batch_size));
        colors.resize(3, static_cast<Eigen::Index>(config.batch_size));
        for (std::size_t j = 0; j < config.batch_size; ++j) {
          const auto i = static_cast<Eigen::Index>(rng.below(n));
          x.col(j) = all_inputs.col(i);
          colors.col(j) = all_colors.col(i);
        }
      }
      out = net.forward_batch(x, tape);
      terms = detail::proxy_terms(out, colors, head, config, true);
      loss = terms.color + config.score_weight * terms.score;
      net.backward_batch(tape, terms.upstream, grads);
      result.color_loss = terms.color;
      result.score_loss = terms.score;
    } else {
      out = net.forward_batch(all_inputs, tape);
      terms = detail::proxy_terms(out, all_colors, head, config, false);
      VecX scores = out.row(fr).transpose().unaryExpr(&sigmoid);
      const PointField field = data.field.with_features_and_scores(out.topRows(fr), scores);
      MatX feature_grad = MatX::Zero(fr, static_cast<Eigen::Index>(n));
      const auto& settings = supervision->settings;
      std::vector<detail::TracedSample> traced;
      std::vector<RadianceSample> samples;
      std::vector<double> ts;
      CompositeResult comp;
      double color = 0;
      const double scale = 1.0 / static_cast<double>(config.rays_per_step);
      for (std::size_t r = 0; r < config.rays_per_step; ++r) {
        const auto& view = supervision->views[rng.below(supervision->views.size())];
        const int x = static_cast<int>(rng.below(static_cast<std::uint64_t>(view.color.width())));
        const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(view.color.height())));
        if (view.mask && view.mask->at(x, y) == 0) continue;
        const Ray ray = ray_through_pixel(view.camera, view.pose.inverse(), Vec2(x, y));
        sample_ray(settings.sampler, rng.next_u64(), ts);
        traced.resize(ts.size());
        samples.resize(ts.size());
        for (std::size_t k = 0; k < ts.size(); ++k) {
          regress_radiance(ray.at(ts[k]), ray.direction, field, head, settings.neighbors, nullptr,
                           traced[k].eval);
          traced[k].delta = (k + 1 < ts.size() ? ts[k + 1] : settings.sampler.far) - ts[k];
          samples[k] = traced[k].eval.sample;
          samples[k].t = ts[k];
        }
        composite(samples, settings.sampler.far, comp);
        const Vec3 target(view.color.at(x, y, 0), view.color.at(x, y, 1), view.color.at(x, y, 2));
        color += detail::render_ray_backward(head, traced, comp, target, scale, feature_grad);
      }
      terms.upstream.topRows(fr) = feature_grad;
      loss = color + config.score_weight * terms.score;
      net.backward_batch(tape, terms.upstream, grads);
      result.color_loss = color;
      result.score_loss = terms.score;
    }

    if (step == 0) initial = loss;
    if (!std::isfinite(loss) || loss > 10 * initial) {
      std::ostringstream msg;
      msg << "adaptation loss diverged at step " << step << ": " << loss << " (initial " << initial << ")";
      throw Error(ErrorCode::DivergedLoss, msg.str());
    }
    result.loss_trace.push_back(loss);
    net.set_parameters(net.parameters() + adam.step(AdaptationModel::Network::flatten(grads)));
    if (!net.all_finite()) throw Error(ErrorCode::DivergedLoss, "non-finite weights after update");
  }
  result.final_loss = result.loss_trace.back();
  return result;
}

}  // namespace pnloc
