// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Every op computes its forward value
// eagerly and, when recording, attaches a closure that accumulates input
// gradients from the output gradient.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "rasm/tensor.hpp"

namespace rasm {

/// Layer-norm variance floor.
inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (+)= op(A) * op(B) for row-major buffers. op(A) is M x K, op(B) is K x N.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K, const T* A,
          const T* B, T* C, bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  Eigen::Map<RowMat<T>> c(C, Eigen::Index(M), Eigen::Index(N));
  const auto m = Eigen::Index(M), n = Eigen::Index(N), k = Eigen::Index(K);
  auto run = [&](const auto& a, const auto& b) {
    if (accumulate) {
      c.noalias() += a * b;
    } else {
      c.noalias() = a * b;
    }
  };
  if (!trans_a && !trans_b) {
    run(Map(A, m, k), Map(B, k, n));
  } else if (trans_a && !trans_b) {
    run(Map(A, k, m).transpose(), Map(B, k, n));
  } else if (!trans_a && trans_b) {
    run(Map(A, m, k), Map(B, n, k).transpose());
  } else {
    run(Map(A, k, m).transpose(), Map(B, n, k).transpose());
  }
}

struct AxisView {
  std::size_t outer, len, inner;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
  }
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
T* grad_of(Node<T>& self, std::size_t parent) {
  auto& p = self.parents[parent];
  return p->requires_grad ? p->grad_buffer() : nullptr;
}

/// Elementwise unary op with derivative expressed through (x, y).
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, const char* name, F f, D dfdx) {
  const auto& xs = x.vec();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result<T>(x.shape(), std::move(out), name, {&x}, [dfdx](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->data;
    const auto& yv = self.data;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * dfdx(xv[i], yv[i]);
  });
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* cols) {
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = cols + ((c * kh + ky) * kw + kx) * hw;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = long(oy * stride + ky) - long(pad);
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= long(H)) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + std::size_t(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = long(ox * stride + kx) - long(pad);
            dst[ox] = (ix < 0 || ix >= long(W)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
            T* x) {
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((c * kh + ky) * kw + kx) * hw;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = long(oy * stride + ky) - long(pad);
          if (iy < 0 || iy >= long(H)) continue;
          T* dst = x + (c * H + std::size_t(iy)) * W;
          const T* src = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = long(ox * stride + kx) - long(pad);
            if (ix >= 0 && ix < long(W)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), "add", {&a, &b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (T* g = detail::grad_of(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {&a, &b}, [](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {&a, &b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (T* g = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(
      x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

/// Clamps to [lo, hi]; the gradient passes only strictly inside the range.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, "clamp", [lo, hi](T v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasting along one axis

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.vec()) s += v;
  return make_result<T>({1}, {s}, "sum", {&x}, [](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      const T go = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += go;
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

/// out = x + v broadcast along `axis` (v has length x.shape[axis]).
template <typename T>
Tensor<T> add_along(const Tensor<T>& x, const Tensor<T>& v, std::size_t axis) {
  const auto av = detail::axis_view(x.shape(), axis);
  if (v.numel() != av.len) {
    throw DimensionError("add_along: vector " + shape_str(v.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.vec());
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t l = 0; l < av.len; ++l) {
      T* dst = out.data() + (o * av.len + l) * av.inner;
      for (std::size_t i = 0; i < av.inner; ++i) dst[i] += v[l];
    }
  return make_result<T>(x.shape(), std::move(out), "add_along", {&x, &v}, [av](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = detail::grad_of(self, 1)) {
      for (std::size_t o = 0; o < av.outer; ++o)
        for (std::size_t l = 0; l < av.len; ++l) {
          const T* src = self.grad.data() + (o * av.len + l) * av.inner;
          T acc = 0;
          for (std::size_t i = 0; i < av.inner; ++i) acc += src[i];
          g[l] += acc;
        }
    }
  });
}

/// out = x * v broadcast along `axis`.
template <typename T>
Tensor<T> mul_along(const Tensor<T>& x, const Tensor<T>& v, std::size_t axis) {
  const auto av = detail::axis_view(x.shape(), axis);
  if (v.numel() != av.len) {
    throw DimensionError("mul_along: vector " + shape_str(v.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.vec());
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t l = 0; l < av.len; ++l) {
      T* dst = out.data() + (o * av.len + l) * av.inner;
      for (std::size_t i = 0; i < av.inner; ++i) dst[i] *= v[l];
    }
  return make_result<T>(x.shape(), std::move(out), "mul_along", {&x, &v}, [av](Node<T>& self) {
    const auto& xv = self.parents[0]->data;
    const auto& vv = self.parents[1]->data;
    T* gx = detail::grad_of(self, 0);
    T* gv = detail::grad_of(self, 1);
    for (std::size_t o = 0; o < av.outer; ++o)
      for (std::size_t l = 0; l < av.len; ++l) {
        const std::size_t base = (o * av.len + l) * av.inner;
        T acc = 0;
        for (std::size_t i = 0; i < av.inner; ++i) {
          if (gx) gx[base + i] += self.grad[base + i] * vv[l];
          acc += self.grad[base + i] * xv[base + i];
        }
        if (gv) gv[l] += acc;
      }
  });
}

/// Mean over every axis except the first: [C x ...] -> [C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("global_avg_pool needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t C = x.dim(0), inner = x.numel() / C;
  std::vector<T> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    T acc = 0;
    for (std::size_t i = 0; i < inner; ++i) acc += x[c * inner + i];
    out[c] = acc / T(inner);
  }
  return make_result<T>({C}, std::move(out), "global_avg_pool", {&x}, [C, inner](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t c = 0; c < C; ++c) {
        const T gc = self.grad[c] / T(inner);
        for (std::size_t i = 0; i < inner; ++i) g[c * inner + i] += gc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_result<T>(std::move(shape), x.vec(), "reshape", {&x}, [](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

namespace detail {

/// For each output flat index, the source flat index under `perm`.
inline std::vector<std::size_t> permute_map(const Shape& in, const std::vector<std::size_t>& perm) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[perm[i]];
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
    map[flat] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace detail

/// Axis permutation: output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw DimensionError("permute: invalid permutation for " + shape_str(x.shape()));
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  auto map = detail::permute_map(x.shape(), perm);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[map[i]];
  return make_result<T>(std::move(out_shape), std::move(out), "permute", {&x},
                        [map = std::move(map)](Node<T>& self) {
                          if (T* g = detail::grad_of(self, 0)) {
                            for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

/// Concatenation along `axis`; all other axes must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat of zero tensors");
  Shape out_shape = xs[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != xs[0].dim(i)) {
        throw DimensionError("concat: shape mismatch " + shape_str(xs[0].shape()) + " vs " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  const auto ov = detail::axis_view(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t len = x.dim(axis);
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(x.vec().data() + o * len * ov.inner, len * ov.inner,
                  out.data() + (o * ov.len + off) * ov.inner);
    }
    off += len;
  }
  Tensor<T> result(std::move(out_shape), std::move(out));
  if (!grad_enabled()) return result;
  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  if (!any) return result;
  auto& node = *result.node();
  node.requires_grad = true;
  node.op = "concat";
  std::vector<std::size_t> lens;
  for (const auto& x : xs) {
    node.parents.push_back(x.node());
    lens.push_back(x.dim(axis));
  }
  node.backward = [ov, offsets, lens](Node<T>& self) {
    for (std::size_t p = 0; p < lens.size(); ++p) {
      T* g = detail::grad_of(self, p);
      if (!g) continue;
      for (std::size_t o = 0; o < ov.outer; ++o) {
        const T* src = self.grad.data() + (o * ov.len + offsets[p]) * ov.inner;
        T* dst = g + o * lens[p] * ov.inner;
        for (std::size_t i = 0; i < lens[p] * ov.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return result;
}

/// Selects rows of x (viewed as [N x rest]) by index. The backward pass
/// scatter-adds into the source rows, so repeated indices accumulate.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& indices) {
  const std::size_t N = x.dim(0), inner = x.numel() / N;
  for (std::size_t p = 0; p < indices.size(); ++p) {
    if (indices[p] >= N) {
      throw IndexError("gather: index " + std::to_string(indices[p]) + " at position " +
                       std::to_string(p) + " is outside [0, " + std::to_string(N) + ")");
    }
  }
  if (indices.empty()) throw DimensionError("gather: empty index list");
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  std::vector<T> out(indices.size() * inner);
  for (std::size_t p = 0; p < indices.size(); ++p) {
    std::copy_n(x.vec().data() + indices[p] * inner, inner, out.data() + p * inner);
  }
  return make_result<T>(std::move(out_shape), std::move(out), "gather", {&x},
                        [indices, inner](Node<T>& self) {
                          if (T* g = detail::grad_of(self, 0)) {
                            for (std::size_t p = 0; p < indices.size(); ++p) {
                              const T* src = self.grad.data() + p * inner;
                              T* dst = g + indices[p] * inner;
                              for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Products

/// [m x k] . [k x n] -> [m x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(M * N);
  detail::gemm<T>(false, false, M, N, K, a.vec().data(), b.vec().data(), out.data(), false);
  record_macs(std::uint64_t(M) * N * K);
  return make_result<T>({M, N}, std::move(out), "matmul", {&a, &b}, [M, N, K](Node<T>& self) {
    const T* av = self.parents[0]->data.data();
    const T* bv = self.parents[1]->data.data();
    if (T* ga = detail::grad_of(self, 0)) detail::gemm<T>(false, true, M, K, N, self.grad.data(), bv, ga, true);
    if (T* gb = detail::grad_of(self, 1)) detail::gemm<T>(true, false, K, N, M, av, self.grad.data(), gb, true);
  });
}

/// Batched matmul: [B x m x k] . [B x k x n] -> [B x m x n]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  std::vector<T> out(B * M * N);
  for (std::size_t i = 0; i < B; ++i) {
    detail::gemm<T>(false, false, M, N, K, a.vec().data() + i * M * K, b.vec().data() + i * K * N,
                    out.data() + i * M * N, false);
  }
  record_macs(std::uint64_t(B) * M * N * K);
  return make_result<T>({B, M, N}, std::move(out), "bmm", {&a, &b}, [B, M, N, K](Node<T>& self) {
    const T* av = self.parents[0]->data.data();
    const T* bv = self.parents[1]->data.data();
    T* ga = detail::grad_of(self, 0);
    T* gb = detail::grad_of(self, 1);
    for (std::size_t i = 0; i < B; ++i) {
      const T* g = self.grad.data() + i * M * N;
      if (ga) detail::gemm<T>(false, true, M, K, N, g, bv + i * K * N, ga + i * M * K, true);
      if (gb) detail::gemm<T>(true, false, K, N, M, av + i * M * K, g, gb + i * K * N, true);
    }
  });
}

/// Token-major affine map: x[n x in] . w[out x in]^T + b[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || b.numel() != w.dim(0)) {
    throw DimensionError("linear: incompatible shapes x" + shape_str(x.shape()) + " w" +
                         shape_str(w.shape()) + " b" + shape_str(b.shape()));
  }
  const std::size_t M = x.dim(0), K = x.dim(1), N = w.dim(0);
  std::vector<T> out(M * N);
  detail::gemm<T>(false, true, M, N, K, x.vec().data(), w.vec().data(), out.data(), false);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) out[i * N + j] += b[j];
  record_macs(std::uint64_t(M) * N * K);
  return make_result<T>({M, N}, std::move(out), "linear", {&x, &w, &b}, [M, N, K](Node<T>& self) {
    const T* xv = self.parents[0]->data.data();
    const T* wv = self.parents[1]->data.data();
    const T* g = self.grad.data();
    if (T* gx = detail::grad_of(self, 0)) detail::gemm<T>(false, false, M, K, N, g, wv, gx, true);
    if (T* gw = detail::grad_of(self, 1)) detail::gemm<T>(true, false, N, K, M, g, xv, gw, true);
    if (T* gb = detail::grad_of(self, 2)) {
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) gb[j] += g[i * N + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
/// Entries equal to -inf receive probability zero.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto av = detail::axis_view(x.shape(), axis);
  std::vector<T> out(x.numel());
  const auto& xv = x.vec();
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t i = 0; i < av.inner; ++i) {
      const std::size_t base = o * av.len * av.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < av.len; ++l) mx = std::max(mx, xv[base + l * av.inner]);
      T total = 0;
      for (std::size_t l = 0; l < av.len; ++l) {
        const T e = std::exp(xv[base + l * av.inner] - mx);
        out[base + l * av.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < av.len; ++l) out[base + l * av.inner] /= total;
    }
  return make_result<T>(x.shape(), std::move(out), "softmax", {&x}, [av](Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < av.outer; ++o)
      for (std::size_t i = 0; i < av.inner; ++i) {
        const std::size_t base = o * av.len * av.inner + i;
        T dot = 0;
        for (std::size_t l = 0; l < av.len; ++l) dot += y[base + l * av.inner] * gy[base + l * av.inner];
        for (std::size_t l = 0; l < av.len; ++l) {
          const std::size_t k = base + l * av.inner;
          gx[k] += y[k] * (gy[k] - dot);
        }
      }
  });
}

/// Normalizes each slice along `axis` to zero mean and unit (biased)
/// variance, then applies gamma/beta indexed by position along the axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t axis, T eps = T(kLayerNormEps)) {
  const auto av = detail::axis_view(x.shape(), axis);
  if (gamma.numel() != av.len || beta.numel() != av.len) {
    throw DimensionError("layer_norm: gamma" + shape_str(gamma.shape()) + "/beta" +
                         shape_str(beta.shape()) + " do not match axis length " + std::to_string(av.len));
  }
  const auto& xv = x.vec();
  std::vector<T> xhat(x.numel()), out(x.numel());
  std::vector<T> rstd(av.outer * av.inner);
  std::vector<T> mu(av.inner), var(av.inner);
  for (std::size_t o = 0; o < av.outer; ++o) {
    const std::size_t base = o * av.len * av.inner;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t l = 0; l < av.len; ++l)
      for (std::size_t i = 0; i < av.inner; ++i) mu[i] += xv[base + l * av.inner + i];
    for (auto& m : mu) m /= T(av.len);
    for (std::size_t l = 0; l < av.len; ++l)
      for (std::size_t i = 0; i < av.inner; ++i) {
        const T d = xv[base + l * av.inner + i] - mu[i];
        var[i] += d * d;
      }
    for (std::size_t i = 0; i < av.inner; ++i) rstd[o * av.inner + i] = T(1) / std::sqrt(var[i] / T(av.len) + eps);
    for (std::size_t l = 0; l < av.len; ++l)
      for (std::size_t i = 0; i < av.inner; ++i) {
        const std::size_t k = base + l * av.inner + i;
        xhat[k] = (xv[k] - mu[i]) * rstd[o * av.inner + i];
        out[k] = xhat[k] * gamma[l] + beta[l];
      }
  }
  return make_result<T>(
      x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
      [av, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const auto& gy = self.grad;
        const auto& gam = self.parents[1]->data;
        T* gx = detail::grad_of(self, 0);
        T* gg = detail::grad_of(self, 1);
        T* gb = detail::grad_of(self, 2);
        std::vector<T> m1(av.inner), m2(av.inner);
        for (std::size_t o = 0; o < av.outer; ++o) {
          const std::size_t base = o * av.len * av.inner;
          std::fill(m1.begin(), m1.end(), T(0));
          std::fill(m2.begin(), m2.end(), T(0));
          for (std::size_t l = 0; l < av.len; ++l)
            for (std::size_t i = 0; i < av.inner; ++i) {
              const std::size_t k = base + l * av.inner + i;
              const T dxh = gy[k] * gam[l];
              m1[i] += dxh;
              m2[i] += dxh * xhat[k];
              if (gg) gg[l] += gy[k] * xhat[k];
              if (gb) gb[l] += gy[k];
            }
          if (!gx) continue;
          for (std::size_t l = 0; l < av.len; ++l)
            for (std::size_t i = 0; i < av.inner; ++i) {
              const std::size_t k = base + l * av.inner + i;
              const T dxh = gy[k] * gam[l];
              gx[k] += rstd[o * av.inner + i] *
                       (dxh - m1[i] / T(av.len) - xhat[k] * m2[i] / T(av.len));
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions on single [C x H x W] maps

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw DimensionError("convolution kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

/// Cross-correlation of x[C x H x W] with w[O x C x kh x kw], optional bias[O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                 std::size_t stride = 1, std::size_t padding = 0) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) || stride == 0) {
    throw DimensionError("conv2d: incompatible input " + shape_str(x.shape()) + " and kernel " +
                         shape_str(w.shape()));
  }
  if (b && b->numel() != w.dim(0)) throw DimensionError("conv2d: bias does not match output channels");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = conv_out_size(H, kh, stride, padding), Wo = conv_out_size(W, kw, stride, padding);
  const std::size_t ckk = C * kh * kw, hw = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
  std::vector<T> cols;
  if (!pointwise) {
    cols.resize(ckk * hw);
    detail::im2col(x.vec().data(), C, H, W, kh, kw, stride, padding, Ho, Wo, cols.data());
  }
  std::vector<T> out(O * hw);
  detail::gemm<T>(false, false, O, hw, ckk, w.vec().data(), pointwise ? x.vec().data() : cols.data(),
                  out.data(), false);
  if (b) {
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < hw; ++i) out[o * hw + i] += (*b)[o];
  }
  record_macs(std::uint64_t(O) * ckk * hw);
  auto backward = [=, cols = std::move(cols)](Node<T>& self) {
    const T* g = self.grad.data();
    const T* wv = self.parents[1]->data.data();
    const T* src = pointwise ? self.parents[0]->data.data() : cols.data();
    if (T* gw = detail::grad_of(self, 1)) detail::gemm<T>(false, true, O, ckk, hw, g, src, gw, true);
    if (T* gx = detail::grad_of(self, 0)) {
      if (pointwise) {
        detail::gemm<T>(true, false, ckk, hw, O, wv, g, gx, true);
      } else {
        std::vector<T> gcols(ckk * hw);
        detail::gemm<T>(true, false, ckk, hw, O, wv, g, gcols.data(), false);
        detail::col2im(gcols.data(), C, H, W, kh, kw, stride, padding, Ho, Wo, gx);
      }
    }
    if (self.parents.size() > 2) {
      if (T* gb = detail::grad_of(self, 2)) {
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t i = 0; i < hw; ++i) gb[o] += g[o * hw + i];
      }
    }
  };
  if (b) return make_result<T>({O, Ho, Wo}, std::move(out), "conv2d", {&x, &w, &*b}, std::move(backward));
  return make_result<T>({O, Ho, Wo}, std::move(out), "conv2d", {&x, &w}, std::move(backward));
}

/// Transposed convolution (adjoint of conv2d) of x[C x H x W] with
/// w[C x O x kh x kw], optional bias[O].
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                           std::size_t stride, std::size_t padding = 0) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(0) != x.dim(0) || stride == 0) {
    throw DimensionError("conv_transpose2d: incompatible input " + shape_str(x.shape()) +
                         " and kernel " + shape_str(w.shape()));
  }
  if (b && b->numel() != w.dim(1)) throw DimensionError("conv_transpose2d: bias does not match output channels");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if ((H - 1) * stride + kh < 2 * padding + 1 || (W - 1) * stride + kw < 2 * padding + 1) {
    throw DimensionError("conv_transpose2d: padding too large");
  }
  const std::size_t Ho = (H - 1) * stride + kh - 2 * padding, Wo = (W - 1) * stride + kw - 2 * padding;
  const std::size_t okk = O * kh * kw, hw = H * W;
  std::vector<T> cols(okk * hw);
  detail::gemm<T>(true, false, okk, hw, C, w.vec().data(), x.vec().data(), cols.data(), false);
  std::vector<T> out(O * Ho * Wo, T(0));
  detail::col2im(cols.data(), O, Ho, Wo, kh, kw, stride, padding, H, W, out.data());
  if (b) {
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho * Wo; ++i) out[o * Ho * Wo + i] += (*b)[o];
  }
  record_macs(std::uint64_t(C) * okk * hw);
  auto backward = [=](Node<T>& self) {
    const T* xv = self.parents[0]->data.data();
    const T* wv = self.parents[1]->data.data();
    T* gx = detail::grad_of(self, 0);
    T* gw = detail::grad_of(self, 1);
    if (gx || gw) {
      std::vector<T> gcols(okk * hw);
      detail::im2col(self.grad.data(), O, Ho, Wo, kh, kw, stride, padding, H, W, gcols.data());
      if (gx) detail::gemm<T>(false, false, C, hw, okk, wv, gcols.data(), gx, true);
      if (gw) detail::gemm<T>(false, true, C, okk, hw, xv, gcols.data(), gw, true);
    }
    if (self.parents.size() > 2) {
      if (T* gb = detail::grad_of(self, 2)) {
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t i = 0; i < Ho * Wo; ++i) gb[o] += self.grad[o * Ho * Wo + i];
      }
    }
  };
  if (b) return make_result<T>({O, Ho, Wo}, std::move(out), "conv_transpose2d", {&x, &w, &*b}, std::move(backward));
  return make_result<T>({O, Ho, Wo}, std::move(out), "conv_transpose2d", {&x, &w}, std::move(backward));
}

/// Non-overlapping k x k average pooling of x[C x H x W]. Output size is
/// floor(H/k) x floor(W/k); trailing rows/columns that do not fill a
/// window are dropped.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  if (x.rank() != 3 || k == 0 || x.dim(1) < k || x.dim(2) < k) {
    throw DimensionError("avg_pool2d: " + shape_str(x.shape()) + " smaller than pool size " + std::to_string(k));
  }
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), Ho = H / k, Wo = W / k;
  const T inv = T(1) / T(k * k);
  std::vector<T> out(C * Ho * Wo, T(0));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < Ho * k; ++y)
      for (std::size_t xx = 0; xx < Wo * k; ++xx) out[(c * Ho + y / k) * Wo + xx / k] += x[(c * H + y) * W + xx] * inv;
  return make_result<T>({C, Ho, Wo}, std::move(out), "avg_pool2d", {&x}, [=](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < Ho * k; ++y)
          for (std::size_t xx = 0; xx < Wo * k; ++xx) g[(c * H + y) * W + xx] += self.grad[(c * Ho + y / k) * Wo + xx / k] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Composite helpers

/// Two-layer perceptron over the last axis: fc2(gelu(fc1(x))).
template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2,
              const Tensor<T>& b2) {
  return linear(gelu(linear(x, w1, b1)), w2, b2);
}

/// Pointwise channel map on a channel-first map: x[C x ...] -> [O x ...]
/// with w[O x C], b[O].
template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Shape s = x.shape();
  const std::size_t C = s[0], rest = x.numel() / C;
  if (w.rank() != 2 || w.dim(1) != C) {
    throw DimensionError("conv1x1: weight " + shape_str(w.shape()) + " does not match input " + shape_str(s));
  }
  auto y = matmul(w, reshape(x, {C, rest}));
  s[0] = w.dim(0);
  return reshape(add_along(y, b, 0), s);
}

}  // namespace rasm
