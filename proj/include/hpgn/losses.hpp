#pragma once

// Label-smoothed softmax, batch-hard triplet and their weighted total.

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hpgn/errors.hpp"
#include "hpgn/forward_output.hpp"
#include "hpgn/ops.hpp"

namespace hpgn {

struct LossConfig {
  double alpha = 2.0;   // LSRS on CBR1
  double beta = 1.0;    // triplet on CBR1
  double rho = 2.0;     // LSRS on CBR2
  double lambda = 1.0;  // triplet on CBR2
  double epsilon = 0.1;
  double margin = 1.2;

  void validate() const {
    if (alpha < 0 || beta < 0 || rho < 0 || lambda < 0)
      throw ConfigError("loss weights must be nonnegative");
    if (!(epsilon >= 0 && epsilon < 1)) throw ConfigError("label smoothing must lie in [0,1)");
    if (margin < 0) throw ConfigError("triplet margin must be nonnegative");
  }
};

inline double smoothed_target(std::size_t label, std::size_t j, std::size_t classes, double epsilon) {
  if (classes < 2) throw InvalidArgument("smoothed_target: need at least 2 classes");
  if (label >= classes || j >= classes) throw InvalidArgument("smoothed_target: class index out of range");
  const double off = epsilon / static_cast<double>(classes);
  return j == label ? 1.0 - epsilon + off : off;
}

template <class T>
Tensor<T> smoothed_targets(std::span<const std::size_t> labels, std::size_t classes, double epsilon) {
  Tensor<T> out(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes)
      throw InvalidArgument("label " + std::to_string(labels[i]) + " out of range for " +
                            std::to_string(classes) + " classes");
    for (std::size_t j = 0; j < classes; ++j)
      out[i * classes + j] = static_cast<T>(smoothed_target(labels[i], j, classes, epsilon));
  }
  return out;
}

// Bias-free linear classifier W [embed_dim, K].
template <class T>
struct ClassifierHead {
  ClassifierHead(const std::string& name, std::size_t embed_dim, std::size_t classes)
      : weight(name + ".weight", Tensor<T>(Shape{embed_dim, classes})) {}

  std::size_t classes() const { return weight.value.dim(1); }

  template <class Rng>
  void init(Rng& rng) {
    std::normal_distribution<double> dist(0.0, 0.01);
    for (auto& w : weight.value.storage()) w = static_cast<T>(dist(rng));
  }

  Var<T> logits(Var<T> features) { return ops::matmul(features, features.tape()->param(weight)); }

  Parameter<T> weight;
};

template <class T>
Var<T> lsrs_from_logits(Var<T> logits, std::span<const std::size_t> labels, double epsilon) {
  require_rank(logits.shape(), 2, "lsrs logits");
  if (logits.shape()[0] != labels.size()) throw ShapeError("lsrs: label count differs from batch");
  if (labels.empty()) throw InvalidArgument("lsrs: empty batch");
  return ops::softmax_cross_entropy(logits, smoothed_targets<T>(labels, logits.shape()[1], epsilon));
}

template <class T>
Var<T> lsrs_loss(Var<T> features, ClassifierHead<T>& head, std::span<const std::size_t> labels,
                 double epsilon) {
  return lsrs_from_logits(head.logits(features), labels, epsilon);
}

// Every label at least twice and at least two distinct labels.
inline void check_triplet_batch(std::span<const std::size_t> labels) {
  std::map<std::size_t, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  if (counts.size() < 2)
    throw BatchCompositionError("triplet batch needs at least two distinct identities");
  for (const auto& [label, n] : counts)
    if (n < 2)
      throw BatchCompositionError("triplet batch: identity " + std::to_string(label) +
                                  " appears only once");
}

template <class T>
Var<T> batch_hard_triplet(Var<T> features, std::span<const std::size_t> labels, double margin) {
  require_rank(features.shape(), 2, "batch_hard_triplet");
  if (features.shape()[0] != labels.size())
    throw ShapeError("batch_hard_triplet: label count differs from batch");
  check_triplet_batch(labels);
  return ops::batch_hard_hinge(ops::pairwise_distance(features), labels, static_cast<T>(margin));
}

template <class T>
struct LossBreakdown {
  Var<T> total;
  std::optional<Var<T>> lsrs1, triplet1, lsrs2, triplet2;

  static double value_of(const std::optional<Var<T>>& v) {
    return v ? static_cast<double>(v->value().item()) : 0.0;
  }
};

// alpha*LSRS(CBR1) + beta*Tri(CBR1) + rho*LSRS(CBR2) + lambda*Tri(CBR2).
// Terms whose head is absent contribute nothing.
template <class T>
LossBreakdown<T> total_loss(const ForwardOutput<T>& out, std::span<const std::size_t> labels,
                            const LossConfig& cfg) {
  cfg.validate();
  LossBreakdown<T> parts;
  std::vector<Var<T>> terms;
  auto weighted = [&](Var<T> v, double w) { terms.push_back(ops::scale(v, static_cast<T>(w))); };
  if (out.embed1 && out.logits1) {
    if (cfg.alpha > 0) {
      parts.lsrs1 = lsrs_from_logits(*out.logits1, labels, cfg.epsilon);
      weighted(*parts.lsrs1, cfg.alpha);
    }
    if (cfg.beta > 0) {
      parts.triplet1 = batch_hard_triplet(*out.embed1, labels, cfg.margin);
      weighted(*parts.triplet1, cfg.beta);
    }
  }
  if (cfg.rho > 0) {
    parts.lsrs2 = lsrs_from_logits(out.logits2, labels, cfg.epsilon);
    weighted(*parts.lsrs2, cfg.rho);
  }
  if (cfg.lambda > 0) {
    parts.triplet2 = batch_hard_triplet(out.embed2, labels, cfg.margin);
    weighted(*parts.triplet2, cfg.lambda);
  }
  Tape<T>& tape = *out.embed2.tape();
  if (terms.empty()) {
    parts.total = tape.constant(Tensor<T>::scalar(T(0)));
    return parts;
  }
  Var<T> total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
  parts.total = total;
  return parts;
}

}  // namespace hpgn
