// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rasm/tensor.hpp"

namespace rasm {

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.rel_error);
    return m;
  }
  const GradCheckEntry* worst() const {
    const GradCheckEntry* w = nullptr;
    for (const auto& e : entries)
      if (!w || e.rel_error > w->rel_error) w = &e;
    return w;
  }
  bool passed(double tol) const { return max_rel_error() < tol; }
};

struct GradCheckOptions {
  double step = 1e-3;
  /// Scale floor of the relative error, multiplied by max(1, |loss|) (see
  /// gradcheck()). Gradients whose norm is below it, such as the
  /// structurally zero gradient of a key bias under softmax, are judged by
  /// absolute error at this scale, where finite-difference round-off of a
  /// loss of that magnitude lives.
  double floor = 1e-5;
  /// Elements checked per tensor; 0 checks every element. When limited,
  /// the checked positions are drawn from `seed`.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences for each named input. The error per input is
/// ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, floor * max(1, |loss|))
/// over the checked elements.
///
/// `loss_fn` must rebuild the computation from the current tensor values
/// on every call and return a scalar.
template <typename T>
GradCheckReport gradcheck(const std::function<Tensor<T>()>& loss_fn,
                          std::vector<std::pair<std::string, Tensor<T>>> inputs,
                          const GradCheckOptions& opts = {}) {
  for (auto& [name, t] : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const auto loss0 = loss_fn();
  const double floor = opts.floor * std::max(1.0, std::abs(double(loss0.item())));
  backward(loss0);
  std::vector<std::vector<T>> analytic;
  for (auto& [name, t] : inputs) {
    analytic.emplace_back(t.grad().begin(), t.grad().end());
  }

  GradCheckReport report;
  Rng rng(opts.seed);
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    auto& [name, t] = inputs[p];
    std::vector<std::size_t> positions(t.numel());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    if (opts.max_elements && positions.size() > opts.max_elements) {
      rng.shuffle(positions.begin(), positions.end());
      positions.resize(opts.max_elements);
    }
    double diff2 = 0, a2 = 0, n2 = 0;
    auto data = t.mutable_data();
    for (auto i : positions) {
      const T orig = data[i];
      const T h = T(opts.step) * std::max(T(1), std::abs(orig));
      auto at = [&](T offset) {
        data[i] = orig + offset;
        return double(loss_fn().item());
      };
      // Five-point stencil, truncation error O(h^4).
      const double d1 = at(h) - at(-h), d2 = at(2 * h) - at(-2 * h);
      data[i] = orig;
      const double numeric = (8.0 * d1 - d2) / (12.0 * double(h));
      const double a = double(analytic[p][i]);
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), floor});
    report.entries.push_back({name, std::sqrt(diff2) / denom, std::sqrt(a2), positions.size()});
  }
  return report;
}

}  // namespace rasm
