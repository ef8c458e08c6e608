#pragma once

// Composite layers built from the primitives: batch norm with running
// statistics, the spatial graph (SG) layer and its stack (SGN), the CBR
// reduction unit and the pyramid pooling step.

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hpgn/grid_graph.hpp"
#include "hpgn/ops.hpp"
#include "hpgn/tape.hpp"

namespace hpgn {

enum class Mode {
  train,      // batch statistics, running statistics updated
  infer,      // running statistics
  bn_bypass,  // every batch norm skipped; oracle tests only
};

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEpsilon = 1e-5;

template <class T>
struct BatchNorm {
  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels)
      : gamma(name + ".gamma", Tensor<T>(Shape{channels}, T(1)), false),
        beta(name + ".beta", Tensor<T>(Shape{channels}, T(0)), false),
        running_mean(Shape{channels}, T(0)),
        running_var(Shape{channels}, T(1)) {}

  Var<T> operator()(Var<T> x, Mode mode) {
    if (mode == Mode::bn_bypass) return x;
    Tape<T>& tape = *x.tape();
    const bool training = mode == Mode::train;
    ops::BatchStats<T> stats;
    Var<T> y = ops::batch_norm(x, tape.param(gamma), tape.param(beta), running_mean, running_var,
                               training, static_cast<T>(kBnEpsilon), training ? &stats : nullptr);
    if (training) {
      const T m = static_cast<T>(kBnMomentum);
      const T unbias = stats.count > 1 ? static_cast<T>(stats.count) / static_cast<T>(stats.count - 1)
                                       : T(1);
      for (std::size_t k = 0; k < stats.mean.size(); ++k) {
        running_mean[k] = (T(1) - m) * running_mean[k] + m * stats.mean[k];
        running_var[k] = (T(1) - m) * running_var[k] + m * stats.var[k] * unbias;
      }
    }
    return y;
  }

  Parameter<T> gamma;
  Parameter<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

// Learnables of one spatial graph layer at a scale with d = h*w locations and
// c channels. Theta starts at ones: a fresh layer is pure aggregation.
template <class T>
struct SGParams {
  SGParams(const std::string& name, std::size_t d, std::size_t c)
      : theta(name + ".theta", Tensor<T>(Shape{d, c}, T(1))), bn(name + ".bn", c) {}

  Parameter<T> theta;
  BatchNorm<T> bn;
};

// O = LeakyReLU_0.2(BN(((I + S) V) * Theta)) on a batch V [N,c,h,w] sharing
// one graph and one Theta. include_neighbors == false drops S (A = V).
template <class T>
Var<T> sg_forward(Var<T> v, const GridGraph& graph, SGParams<T>& params, Mode mode,
                  bool include_neighbors = true) {
  require_rank(v.shape(), 4, "sg_forward");
  const auto& s = v.shape();
  if (s[2] != graph.height() || s[3] != graph.width())
    throw ShapeError("sg_forward: map " + shape_str(s) + " does not match the graph");
  require_shape(params.theta.value.shape(), Shape{graph.nodes(), s[1]}, "sg_forward theta");
  Tape<T>& tape = *v.tape();
  Var<T> a = ops::graph_aggregate(v, graph, include_neighbors);
  Var<T> u = ops::reweight(a, tape.param(params.theta));
  Var<T> o = params.bn(u, mode);
  return ops::leaky_relu(o, static_cast<T>(kLeakySlope));
}

template <class T>
Var<T> sgn_forward(Var<T> v, const GridGraph& graph, std::span<SGParams<T>> stack, Mode mode,
                   bool include_neighbors = true) {
  if (stack.empty()) throw InvalidArgument("sgn_forward: empty SG stack");
  for (auto& layer : stack) v = sg_forward(v, graph, layer, mode, include_neighbors);
  return v;
}

// 1x1 convolution (no bias) + batch norm + ReLU on pooled [b, in] vectors.
template <class T>
struct CBRParams {
  CBRParams(const std::string& name, std::size_t in, std::size_t out)
      : weight(name + ".weight", Tensor<T>(Shape{in, out})), bn(name + ".bn", out) {}

  std::size_t in_channels() const { return weight.value.dim(0); }
  std::size_t out_channels() const { return weight.value.dim(1); }

  template <class Rng>
  void init(Rng& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in_channels())));
    for (auto& w : weight.value.storage()) w = static_cast<T>(dist(rng));
  }

  Parameter<T> weight;
  BatchNorm<T> bn;
};

template <class T>
Var<T> cbr_forward(Var<T> x, CBRParams<T>& params, Mode mode) {
  require_rank(x.shape(), 2, "cbr_forward");
  if (x.shape()[1] != params.in_channels())
    throw ShapeError("cbr_forward: expected " + std::to_string(params.in_channels()) +
                     " input channels, got " + shape_str(x.shape()));
  Tape<T>& tape = *x.tape();
  Var<T> y = ops::matmul(x, tape.param(params.weight));
  return ops::relu(params.bn(y, mode));
}

// Pyramid resize: average pooling, window = stride = k, no padding.
template <class T>
Var<T> scale_pool(Var<T> x, std::size_t window) {
  return ops::avg_pool2d(x, window);
}

// Backbone stage: k x k convolution (padding k/2, no bias) + BN + ReLU.
template <class T>
struct ConvStage {
  ConvStage(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
            std::size_t stride)
      : weight(name + ".weight", Tensor<T>(Shape{out, in, kernel, kernel})),
        bn(name + ".bn", out),
        stride(stride) {}

  template <class Rng>
  void init(Rng& rng) {
    const auto& s = weight.value.shape();
    const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& w : weight.value.storage()) w = static_cast<T>(dist(rng));
  }

  Var<T> operator()(Var<T> x, Mode mode) {
    Tape<T>& tape = *x.tape();
    const std::size_t k = weight.value.dim(2);
    return ops::relu(bn(ops::conv2d(x, tape.param(weight), stride, k / 2), mode));
  }

  Parameter<T> weight;
  BatchNorm<T> bn;
  std::size_t stride;
};

}  // namespace hpgn
