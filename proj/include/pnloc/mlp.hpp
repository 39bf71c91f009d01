// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"
#include "pnloc/rng.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace pnloc {

/// Activation policies. `derivative` takes the pre-activation value.
struct TanhActivation {
  static constexpr std::uint32_t kCode = 1;
  static double apply(double x) { return std::tanh(x); }
  static double derivative(double x) {
    const double t = std::tanh(x);
    return 1.0 - t * t;
  }
};

struct IdentityActivation {
  static constexpr std::uint32_t kCode = 0;
  static double apply(double x) { return x; }
  static double derivative(double) { return 1.0; }
};

struct DenseLayer {
  MatX weights;  // out x in
  VecX bias;     // out

  int in_dim() const { return static_cast<int>(weights.cols()); }
  int out_dim() const { return static_cast<int>(weights.rows()); }
};

/// Fully connected network; the activation is applied after every layer
/// except the last, which is linear.
template <typename Activation>
class Mlp {
 public:
  using activation_type = Activation;

  /// Per-layer pre-activations and inputs recorded by forward().
  struct Tape {
    std::vector<VecX> inputs;          // input to layer l
    std::vector<VecX> pre_activations; // W x + b of layer l
  };

  struct Gradients {
    std::vector<MatX> weights;
    std::vector<VecX> bias;
  };

  Mlp() = default;

  /// Fan-in scaled uniform initialization, U(-1/sqrt(in), 1/sqrt(in)).
  Mlp(std::span<const int> dims, std::uint64_t seed) {
    require(dims.size() >= 2, "an MLP needs at least one layer");
    CounterRng rng(seed);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      DenseLayer layer{MatX(dims[l + 1], dims[l]), VecX::Zero(dims[l + 1])};
      const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) {
          layer.weights(r, c) = rng.uniform(-bound, bound);
        }
      }
      layers_.push_back(std::move(layer));
    }
  }

  explicit Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    for (std::size_t l = 1; l < layers_.size(); ++l) {
      require(layers_[l].in_dim() == layers_[l - 1].out_dim(), "layer dimensions do not chain");
    }
  }

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  int input_dim() const { return layers_.front().in_dim(); }
  int output_dim() const { return layers_.back().out_dim(); }

  std::vector<int> dims() const {
    std::vector<int> d{input_dim()};
    for (const auto& l : layers_) d.push_back(l.out_dim());
    return d;
  }

  VecX forward(const VecX& x) const {
    VecX h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      VecX z = layers_[l].weights * h + layers_[l].bias;
      if (l + 1 < layers_.size()) z = z.unaryExpr(&Activation::apply);
      h = std::move(z);
    }
    return h;
  }

  VecX forward(const VecX& x, Tape& tape) const {
    tape.inputs.resize(layers_.size());
    tape.pre_activations.resize(layers_.size());
    VecX h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      tape.inputs[l] = h;
      tape.pre_activations[l] = layers_[l].weights * h + layers_[l].bias;
      h = l + 1 < layers_.size() ? VecX(tape.pre_activations[l].unaryExpr(&Activation::apply))
                                 : tape.pre_activations[l];
    }
    return h;
  }

  /// Column-batched tape: one column per example.
  struct BatchTape {
    std::vector<MatX> inputs;
    std::vector<MatX> pre_activations;
  };

  MatX forward_batch(const MatX& x, BatchTape& tape) const {
    tape.inputs.resize(layers_.size());
    tape.pre_activations.resize(layers_.size());
    MatX h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      tape.pre_activations[l] = layers_[l].weights * h;
      tape.pre_activations[l].colwise() += layers_[l].bias;
      tape.inputs[l] = std::move(h);
      h = l + 1 < layers_.size() ? MatX(tape.pre_activations[l].unaryExpr(&Activation::apply))
                                 : tape.pre_activations[l];
    }
    return h;
  }

  MatX forward_batch(const MatX& x) const {
    BatchTape tape;
    return forward_batch(x, tape);
  }

  /// Batched backward; upstream has one column per example.
  MatX backward_batch(const BatchTape& tape, const MatX& upstream, Gradients& grads) const {
    MatX delta = upstream;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      if (l + 1 < layers_.size()) {
        delta = delta.cwiseProduct(tape.pre_activations[l].unaryExpr(&Activation::derivative));
      }
      grads.weights[l].noalias() += delta * tape.inputs[l].transpose();
      grads.bias[l] += delta.rowwise().sum();
      delta = layers_[l].weights.transpose() * delta;
    }
    return delta;
  }

  Gradients zero_gradients() const {
    Gradients g;
    for (const auto& l : layers_) {
      g.weights.push_back(MatX::Zero(l.weights.rows(), l.weights.cols()));
      g.bias.push_back(VecX::Zero(l.bias.size()));
    }
    return g;
  }

  /// Accumulates dL/dparams into `grads` given dL/doutput; returns dL/dinput.
  VecX backward(const Tape& tape, const VecX& upstream, Gradients& grads) const {
    VecX delta = upstream;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      if (l + 1 < layers_.size()) {
        delta = delta.cwiseProduct(tape.pre_activations[l].unaryExpr(&Activation::derivative));
      }
      grads.weights[l].noalias() += delta * tape.inputs[l].transpose();
      grads.bias[l] += delta;
      delta = layers_[l].weights.transpose() * delta;
    }
    return delta;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
    return n;
  }

  /// Flattened parameters: per layer, weights row-major then bias.
  VecX parameters() const {
    VecX p(parameter_count());
    Eigen::Index k = 0;
    for (const auto& l : layers_) {
      for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
        for (Eigen::Index c = 0; c < l.weights.cols(); ++c) p[k++] = l.weights(r, c);
      }
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) p[k++] = l.bias[r];
    }
    return p;
  }

  void set_parameters(const VecX& p) {
    require(p.size() == static_cast<Eigen::Index>(parameter_count()), "parameter count mismatch");
    Eigen::Index k = 0;
    for (auto& l : layers_) {
      for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
        for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = p[k++];
      }
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = p[k++];
    }
  }

  static VecX flatten(const Gradients& g) {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l < g.weights.size(); ++l) n += g.weights[l].size() + g.bias[l].size();
    VecX p(n);
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < g.weights.size(); ++l) {
      for (Eigen::Index r = 0; r < g.weights[l].rows(); ++r) {
        for (Eigen::Index c = 0; c < g.weights[l].cols(); ++c) p[k++] = g.weights[l](r, c);
      }
      for (Eigen::Index r = 0; r < g.bias[l].size(); ++r) p[k++] = g.bias[l][r];
    }
    return p;
  }

  bool all_finite() const {
    for (const auto& l : layers_) {
      if (!l.weights.allFinite() || !l.bias.allFinite()) return false;
    }
    return true;
  }

  bool operator==(const Mlp& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].weights != other.layers_[l].weights || layers_[l].bias != other.layers_[l].bias)
        return false;
    }
    return true;
  }

 private:
  std::vector<DenseLayer> layers_;
};

/// Adam on a flat parameter vector.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam(Eigen::Index dim, Options options) : options_(options), m_(VecX::Zero(dim)), v_(VecX::Zero(dim)) {
    require(options.learning_rate >= 0, "learning rate must be non-negative");
  }

  /// Returns the update to ADD to the parameters for this gradient.
  VecX step(const VecX& gradient) {
    ++t_;
    m_ = options_.beta1 * m_ + (1 - options_.beta1) * gradient;
    v_ = options_.beta2 * v_ + (1 - options_.beta2) * gradient.cwiseAbs2();
    const double c1 = 1 - std::pow(options_.beta1, t_);
    const double c2 = 1 - std::pow(options_.beta2, t_);
    return (-options_.learning_rate) *
           ((m_ / c1).array() / ((v_ / c2).array().sqrt() + options_.epsilon)).matrix();
  }

  int iterations() const { return t_; }
  const Options& options() const { return options_; }

 private:
  Options options_;
  VecX m_, v_;
  int t_ = 0;
};

}  // namespace pnloc
