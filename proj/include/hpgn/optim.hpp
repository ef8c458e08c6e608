#pragma once

// Learning-rate schedule and momentum SGD with weight decay.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hpgn/errors.hpp"
#include "hpgn/tape.hpp"

namespace hpgn {

// Linear warm-up then step plateaus. Epoch boundaries are given for a
// 150-epoch run and rescaled by total_epochs / 150 (floor, minimum 1).
struct ScheduleConfig {
  std::size_t total_epochs = 150;
  double warmup_lr = 3e-4;
  double base_lr = 3e-2;
  std::vector<double> plateau_lr{3e-2, 3e-3, 3e-4, 3e-5};
  // Last epoch of warm-up and of each plateau but the final one.
  std::vector<std::size_t> boundaries{10, 50, 85, 119};
  std::size_t reference_epochs = 150;

  std::size_t scaled(std::size_t boundary) const {
    if (total_epochs == reference_epochs) return boundary;
    return std::max<std::size_t>(1, boundary * total_epochs / reference_epochs);
  }

  void validate() const {
    if (total_epochs == 0) throw ConfigError("schedule: total epochs must be positive");
    if (plateau_lr.size() != boundaries.size())
      throw ConfigError("schedule: need one plateau rate per boundary");
    for (std::size_t i = 1; i < plateau_lr.size(); ++i)
      if (!(plateau_lr[i] < plateau_lr[i - 1]))
        throw ConfigError("schedule: plateau rates must strictly decrease");
    for (std::size_t i = 1; i < boundaries.size(); ++i)
      if (boundaries[i] <= boundaries[i - 1]) throw ConfigError("schedule: boundaries must increase");
  }
};

inline double lr_at_epoch(std::size_t epoch, const ScheduleConfig& cfg) {
  if (epoch < 1 || epoch > cfg.total_epochs)
    throw InvalidArgument("lr_at_epoch: epoch " + std::to_string(epoch) + " outside [1," +
                          std::to_string(cfg.total_epochs) + "]");
  const std::size_t warm_end = cfg.scaled(cfg.boundaries.front());
  if (epoch <= warm_end) {
    if (warm_end == 1 || epoch == 1) return cfg.warmup_lr;
    if (epoch == warm_end) return cfg.base_lr;
    const double t = static_cast<double>(epoch - 1) / static_cast<double>(warm_end - 1);
    return cfg.warmup_lr + (cfg.base_lr - cfg.warmup_lr) * t;
  }
  // plateau_lr[i] holds for (boundary[i], boundary[i+1]]; the last runs to the end.
  for (std::size_t i = 1; i < cfg.boundaries.size(); ++i)
    if (epoch <= cfg.scaled(cfg.boundaries[i])) return cfg.plateau_lr[i - 1];
  return cfg.plateau_lr.back();
}

struct OptimConfig {
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

template <class T>
struct OptimState {
  OptimConfig config;
  std::map<std::string, Tensor<T>> velocity;  // keyed by parameter name
};

// v <- mu*v + g + wd*theta (wd only for decaying parameters);
// theta <- theta - lr*v. grads[i] belongs to params[i].
template <class T>
void sgd_step(std::span<Parameter<T>* const> params, std::span<const Tensor<T>> grads,
              OptimState<T>& state, double lr) {
  if (params.size() != grads.size()) throw ShapeError("sgd_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_shape(grads[i].shape(), params[i]->value.shape(), "sgd_step gradient");
    for (T g : grads[i].data())
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("non-finite gradient in parameter '" + params[i]->name + "'");
  }
  const T mu = static_cast<T>(state.config.momentum);
  const T wd = static_cast<T>(state.config.weight_decay);
  const T step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    auto [it, fresh] = state.velocity.try_emplace(p.name, p.value.shape());
    Tensor<T>& v = it->second;
    require_shape(v.shape(), p.value.shape(), "sgd_step velocity");
    const T decay = p.decay ? wd : T(0);
    for (std::size_t k = 0; k < v.size(); ++k) {
      v[k] = mu * v[k] + grads[i][k] + decay * p.value[k];
      p.value[k] -= step * v[k];
    }
  }
}

}  // namespace hpgn
