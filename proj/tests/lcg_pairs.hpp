// SPDX-License-Identifier: Apache-2.0
// Image pairs shared with tests/tools/make_reference.py, which computes
// reference values for them with scikit-image.
#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "rasm/tensor.hpp"

namespace rasm_test {

class Lcg {
 public:
  explicit Lcg(std::uint64_t seed) : state_(seed) {}
  double next() {
    state_ = state_ * 6364136223846793005ull + 1442695040888963407ull;
    return double(state_ >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t state_;
};

/// Pair i: a uniform image a and b = clip(0.8 a + 0.3 u - 0.05).
inline std::pair<rasm::Tensor<double>, rasm::Tensor<double>> lcg_pair(std::size_t index) {
  Lcg rng(1000 + index);
  const std::size_t h = 11 + index % 7 * 3, w = 11 + index % 5 * 4, n = 3 * h * w;
  std::vector<double> a(n), b(n);
  for (auto& v : a) v = rng.next();
  for (std::size_t i = 0; i < n; ++i) b[i] = std::clamp(0.8 * a[i] + 0.3 * rng.next() - 0.05, 0.0, 1.0);
  return {rasm::Tensor<double>({3, h, w}, a), rasm::Tensor<double>({3, h, w}, b)};
}

}  // namespace rasm_test
