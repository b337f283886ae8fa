#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <string>

#include "sspf/errors.hpp"
#include "sspf/network.hpp"
#include "sspf/tensor.hpp"

namespace sspf {

/// lr_init * (1 + cos(pi * step / total_steps)) / 2.
inline double cosine_lr(long step, long total_steps, double lr_init) {
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  return lr_init * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  ParamSet<T> m;
  ParamSet<T> v;
  long t = 0;
};

template <class T>
AdamState<T> make_adam_state(const ParamSet<T>& params) {
  AdamState<T> s;
  for (const auto& [name, p] : params) {
    s.m.emplace(name, Tensor<T>(p.channels(), p.height(), p.width()));
    s.v.emplace(name, Tensor<T>(p.channels(), p.height(), p.width()));
  }
  return s;
}

/// One bias-corrected Adam update of every parameter accepted by `select`
/// (all when empty). Non-finite gradients abort before anything is modified.
template <class T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, const ParamSet<T>& grads, double lr,
               const AdamConfig& cfg = {}, const std::function<bool(const std::string&)>& select = {}) {
  for (const auto& [name, p] : params) {
    if (select && !select(name)) continue;
    auto g = grads.find(name);
    if (g == grads.end()) throw ShapeError("adam_step: no gradient for '" + name + "'");
    require_same_shape(p, g->second, "adam_step");
    if (!all_finite(g->second)) throw NonFiniteError("adam_step: non-finite gradient for parameter '" + name + "'");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    if (select && !select(name)) continue;
    const Tensor<T>& g = grads.at(name);
    Tensor<T>& m = state.m.at(name);
    Tensor<T>& v = state.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p[i] = static_cast<T>(p[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace sspf
