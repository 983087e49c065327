// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "rasm/config_io.hpp"

namespace rasm {

/// Cosine-annealed learning rate with optional linear warmup.
struct Schedule {
  double lr_init = 4e-4;
  double lr_final = 1e-6;
  std::size_t total_steps = 2000;
  std::size_t warmup_steps = 0;

  static Schedule from(const RunConfig& cfg) {
    return {cfg.optim.lr_init, cfg.optim.lr_final, cfg.train.steps, cfg.optim.warmup_steps};
  }
};

/// Learning rate used for update number `step` (0-based). During warmup
/// the rate rises linearly from lr_final to lr_init; afterwards it follows
/// lr_final + (lr_init - lr_final) * (1 + cos(pi t / T)) / 2 over the
/// remaining steps. Both endpoints are exact.
inline double lr_at(const Schedule& s, std::size_t step) {
  if (step > s.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  if (step < s.warmup_steps) {
    const double w = double(step) / double(s.warmup_steps);
    return s.lr_final * (1 - w) + s.lr_init * w;
  }
  const std::size_t span = s.total_steps - s.warmup_steps;
  if (span == 0) return s.lr_init;
  const double t = double(step - s.warmup_steps) / double(span);
  const double w = 0.5 * (1 + std::cos(std::numbers::pi * t));
  // Weighted form so w = 1 and w = 0 reproduce the endpoints bit-exactly.
  return s.lr_init * w + s.lr_final * (1 - w);
}

/// AdamW moments keyed by parameter path.
template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<T>> m, v;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.02;
  double eps = 1e-8;

  static AdamHyper from(const OptimConfig& o) { return {o.beta1, o.beta2, o.weight_decay, o.eps}; }
};

/// Raises TrainingError naming the first parameter whose gradient holds a
/// NaN or infinity.
template <typename T>
void check_finite_grads(const ParameterSet<T>& params) {
  for (const auto& [path, t] : params) {
    if (!t.has_grad()) continue;
    for (T g : t.grad())
      if (!std::isfinite(double(g))) throw TrainingError("non-finite gradient in parameter " + path);
  }
}

/// L2 norm over all parameter gradients.
template <typename T>
double global_grad_norm(const ParameterSet<T>& params) {
  double acc = 0;
  for (const auto& [_, t] : params)
    if (t.has_grad())
      for (T g : t.grad()) acc += double(g) * double(g);
  return std::sqrt(acc);
}

/// Rescales gradients so their global norm is at most max_norm; returns
/// the norm before clipping. max_norm = 0 disables clipping.
template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const T s = T(max_norm / norm);
    for (auto& [_, t] : params)
      if (t.has_grad())
        for (T& g : t.mutable_grad()) g *= s;
  }
  return norm;
}

/// One AdamW update of every parameter that requires a gradient: decoupled
/// weight decay p -= lr * wd * p, then the bias-corrected Adam step.
/// Parameters without an accumulated gradient are treated as having a zero
/// gradient.
template <typename T>
void adamw_step(ParameterSet<T>& params, AdamState<T>& state, double lr, const AdamHyper& h) {
  if (!(lr > 0)) throw ContractError("adamw_step: learning rate must be positive");
  check_finite_grads(params);
  ++state.step;
  const double bc1 = 1 - std::pow(h.beta1, double(state.step));
  const double bc2 = 1 - std::pow(h.beta2, double(state.step));
  for (auto& [path, t] : params) {
    if (!t.requires_grad()) continue;
    auto& m = state.m[path];
    auto& v = state.v[path];
    if (m.empty()) m.assign(t.numel(), T(0)), v.assign(t.numel(), T(0));
    if (m.size() != t.numel()) throw DimensionError("adamw_step: moment size mismatch for " + path);
    auto p = t.mutable_data();
    const bool has = t.has_grad();
    const auto g = has ? t.grad() : std::span<const T>();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = has ? double(g[i]) : 0.0;
      double pi = double(p[i]);
      pi -= lr * h.weight_decay * pi;
      const double mi = h.beta1 * double(m[i]) + (1 - h.beta1) * gi;
      const double vi = h.beta2 * double(v[i]) + (1 - h.beta2) * gi * gi;
      m[i] = T(mi), v[i] = T(vi);
      pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + h.eps);
      p[i] = T(pi);
    }
  }
}

}  // namespace rasm
