// SPDX-License-Identifier: Apache-2.0
//
// Dilated regional (neighborhood) self-attention over a 2-D token grid, the
// window-attention baseline, and a dense masked-attention reference.
//
// Each query attends to an r x r lattice of grid positions with stride
// `dilation`, centered on the query and translated inside the map at the
// borders, so every query has exactly r^2 sources. Logits are
// q.k + B(offset), scaled by 1/sqrt(head_dim), softmaxed over the region,
// and used to average the region's values.
#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "rasm/ops.hpp"

namespace rasm {

struct AttentionConfig {
  std::size_t region_size = 11;  // side length r; a region holds r*r elements
  std::size_t dilation = 2;
  std::size_t num_heads = 8;
  std::size_t embed_dim = 256;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t bias_side() const { return 2 * region_size - 1; }
  std::size_t region_elements() const { return region_size * region_size; }
  /// Extent of one region along an axis, in grid cells.
  std::size_t span() const { return dilation * (region_size - 1) + 1; }

  void validate() const {
    if (region_size == 0 || region_size % 2 == 0) {
      throw ConfigError("attention.region_size must be odd and >= 1, got " + std::to_string(region_size));
    }
    if (dilation == 0) throw ConfigError("attention.dilation must be >= 1");
    if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0) {
      throw ConfigError("attention.num_heads (" + std::to_string(num_heads) +
                        ") must divide embed_dim (" + std::to_string(embed_dim) + ")");
    }
  }

  void validate_for(std::size_t H, std::size_t W) const {
    validate();
    if (span() > std::min(H, W)) {
      throw ConfigError("region of size " + std::to_string(region_size) + " with dilation " +
                        std::to_string(dilation) + " spans " + std::to_string(span()) +
                        " cells and does not fit a " + std::to_string(H) + "x" + std::to_string(W) +
                        " feature map");
    }
  }
};

struct GridPos {
  std::size_t y = 0, x = 0;
  bool operator==(const GridPos&) const = default;
};

namespace detail {

/// First lattice coordinate along one axis for a query at `q`.
inline std::size_t region_start(std::size_t q, std::size_t len, const AttentionConfig& cfg) {
  const long half = long(cfg.dilation * (cfg.region_size / 2));
  const long last = long(len) - long(cfg.span());
  return std::size_t(std::clamp(long(q) - half, 0L, last));
}

inline long floor_div(long a, long b) {
  long q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

/// Relative-position bias coordinate for a source at signed offset `delta`
/// from its query: the offset in dilation steps (rounded down when a border
/// translation is not a whole number of steps), shifted to be nonnegative.
inline std::size_t bias_coord(long delta, const AttentionConfig& cfg) {
  return std::size_t(floor_div(delta, long(cfg.dilation)) + long(cfg.region_size) - 1);
}

}  // namespace detail

/// The r*r source coordinates of query `q`, in row-major region order.
inline std::vector<GridPos> region_indices(GridPos q, std::size_t H, std::size_t W,
                                           const AttentionConfig& cfg) {
  cfg.validate_for(H, W);
  if (q.y >= H || q.x >= W) {
    throw IndexError("query (" + std::to_string(q.y) + "," + std::to_string(q.x) +
                     ") outside " + std::to_string(H) + "x" + std::to_string(W) + " map");
  }
  const std::size_t y0 = detail::region_start(q.y, H, cfg), x0 = detail::region_start(q.x, W, cfg);
  std::vector<GridPos> out;
  out.reserve(cfg.region_elements());
  for (std::size_t i = 0; i < cfg.region_size; ++i)
    for (std::size_t j = 0; j < cfg.region_size; ++j)
      out.push_back({y0 + i * cfg.dilation, x0 + j * cfg.dilation});
  return out;
}

/// Per-query source lists for sparse attention. `src` and `bias_index` are
/// [queries x sources] row-major; `src` indexes rows of the key/value
/// table, `bias_index` indexes one head's plane of the bias table.
/// `additive_mask`, when non-empty, is added to the logits (0 or -inf).
struct SparseAttentionMap {
  std::size_t queries = 0;
  std::size_t sources = 0;
  std::vector<std::size_t> src;
  std::vector<std::size_t> bias_index;
  std::vector<double> additive_mask;
};

/// Index map of regional attention over an H x W grid (the RegionIndexMap).
inline SparseAttentionMap build_region_map(std::size_t H, std::size_t W, const AttentionConfig& cfg) {
  cfg.validate_for(H, W);
  SparseAttentionMap map;
  map.queries = H * W;
  map.sources = cfg.region_elements();
  map.src.reserve(map.queries * map.sources);
  map.bias_index.reserve(map.queries * map.sources);
  const std::size_t side = cfg.bias_side();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (const auto& p : region_indices({y, x}, H, W, cfg)) {
        map.src.push_back(p.y * W + p.x);
        const auto by = detail::bias_coord(long(p.y) - long(y), cfg);
        const auto bx = detail::bias_coord(long(p.x) - long(x), cfg);
        map.bias_index.push_back(by * side + bx);
      }
    }
  }
  return map;
}

/// Learnable projections of one attention layer. `rpb` is the relative
/// position bias table [heads x (2r-1) x (2r-1)].
template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo, rpb;

  static AttentionParams init(std::size_t dim, std::size_t heads, std::size_t bias_side, Rng& rng,
                              double stddev = 0.02) {
    auto w = [&] {
      std::vector<T> v(dim * dim);
      for (auto& x : v) x = T(rng.truncated_normal(stddev));
      return Tensor<T>({dim, dim}, std::move(v));
    };
    auto b = [&] { return Tensor<T>::zeros({dim}); };
    AttentionParams p;
    p.wq = w(), p.bq = b(), p.wk = w(), p.bk = b(), p.wv = w(), p.bv = b(), p.wo = w(), p.bo = b();
    std::vector<T> table(heads * bias_side * bias_side);
    for (auto& x : table) x = T(rng.truncated_normal(stddev));
    p.rpb = Tensor<T>({heads, bias_side, bias_side}, std::move(table));
    return p;
  }

  std::vector<Tensor<T>> tensors() const { return {wq, bq, wk, bk, wv, bv, wo, bo, rpb}; }
};

/// logits[h, i, j] = q[i, head h] . k[src(i, j), head h]
template <typename T>
Tensor<T> neighborhood_logits(const Tensor<T>& q, const Tensor<T>& k, const std::vector<std::size_t>& src,
                              std::size_t sources, std::size_t heads) {
  const std::size_t nq = q.dim(0), d = q.dim(1), nk = k.dim(0);
  if (k.dim(1) != d || d % heads || src.size() != nq * sources) {
    throw DimensionError("neighborhood_logits: q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) +
                         " with " + std::to_string(heads) + " heads");
  }
  for (auto s : src)
    if (s >= nk) throw IndexError("neighborhood_logits: source row " + std::to_string(s) + " out of range");
  const std::size_t dh = d / heads;
  std::vector<T> out(heads * nq * sources);
  const T* qv = q.vec().data();
  const T* kv = k.vec().data();
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < sources; ++j) {
      const T* kr = kv + src[i * sources + j] * d;
      const T* qr = qv + i * d;
      for (std::size_t h = 0; h < heads; ++h) {
        T acc = 0;
        for (std::size_t c = 0; c < dh; ++c) acc += qr[h * dh + c] * kr[h * dh + c];
        out[(h * nq + i) * sources + j] = acc;
      }
    }
  record_macs(std::uint64_t(nq) * sources * d);
  return make_result<T>({heads, nq, sources}, std::move(out), "neighborhood_logits", {&q, &k},
                        [=](Node<T>& self) {
                          const T* qv = self.parents[0]->data.data();
                          const T* kv = self.parents[1]->data.data();
                          T* gq = detail::grad_of(self, 0);
                          T* gk = detail::grad_of(self, 1);
                          const T* g = self.grad.data();
                          for (std::size_t i = 0; i < nq; ++i)
                            for (std::size_t j = 0; j < sources; ++j) {
                              const std::size_t s = src[i * sources + j];
                              for (std::size_t h = 0; h < heads; ++h) {
                                const T gv = g[(h * nq + i) * sources + j];
                                const std::size_t qo = i * d + h * dh, ko = s * d + h * dh;
                                if (gq)
                                  for (std::size_t c = 0; c < dh; ++c) gq[qo + c] += gv * kv[ko + c];
                                if (gk)
                                  for (std::size_t c = 0; c < dh; ++c) gk[ko + c] += gv * qv[qo + c];
                              }
                            }
                        });
}

/// out[i, head h] = sum_j p[h, i, j] * v[src(i, j), head h]
template <typename T>
Tensor<T> neighborhood_aggregate(const Tensor<T>& p, const Tensor<T>& v, const std::vector<std::size_t>& src,
                                 std::size_t sources, std::size_t heads) {
  const std::size_t nq = p.dim(1), d = v.dim(1), nk = v.dim(0);
  if (p.rank() != 3 || p.dim(0) != heads || p.dim(2) != sources || d % heads || src.size() != nq * sources) {
    throw DimensionError("neighborhood_aggregate: p" + shape_str(p.shape()) + " v" + shape_str(v.shape()));
  }
  for (auto s : src)
    if (s >= nk) throw IndexError("neighborhood_aggregate: source row " + std::to_string(s) + " out of range");
  const std::size_t dh = d / heads;
  std::vector<T> out(nq * d, T(0));
  const T* pv = p.vec().data();
  const T* vv = v.vec().data();
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < sources; ++j) {
      const T* vr = vv + src[i * sources + j] * d;
      T* o = out.data() + i * d;
      for (std::size_t h = 0; h < heads; ++h) {
        const T w = pv[(h * nq + i) * sources + j];
        for (std::size_t c = 0; c < dh; ++c) o[h * dh + c] += w * vr[h * dh + c];
      }
    }
  record_macs(std::uint64_t(nq) * sources * d);
  return make_result<T>({nq, d}, std::move(out), "neighborhood_aggregate", {&p, &v}, [=](Node<T>& self) {
    const T* pv = self.parents[0]->data.data();
    const T* vv = self.parents[1]->data.data();
    T* gp = detail::grad_of(self, 0);
    T* gvv = detail::grad_of(self, 1);
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < sources; ++j) {
        const std::size_t s = src[i * sources + j];
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t pi = (h * nq + i) * sources + j;
          const std::size_t go = i * d + h * dh, vo = s * d + h * dh;
          if (gp) {
            T acc = 0;
            for (std::size_t c = 0; c < dh; ++c) acc += g[go + c] * vv[vo + c];
            gp[pi] += acc;
          }
          if (gvv)
            for (std::size_t c = 0; c < dh; ++c) gvv[vo + c] += pv[pi] * g[go + c];
        }
      }
  });
}

/// Multi-head attention where query i sees only the rows listed in `map`.
/// `xq` [nq x d] supplies queries, `xkv` [nk x d] keys and values. When
/// `weights_out` is given it receives the post-softmax weights [h x nq x m].
template <typename T>
Tensor<T> sparse_attention(const Tensor<T>& xq, const Tensor<T>& xkv, const AttentionParams<T>& params,
                           const SparseAttentionMap& map, std::size_t heads, Tensor<T>* weights_out = nullptr) {
  const std::size_t d = xq.dim(1);
  if (xq.dim(0) != map.queries) {
    throw DimensionError("sparse_attention: " + std::to_string(xq.dim(0)) + " queries, map expects " +
                         std::to_string(map.queries));
  }
  const std::size_t plane = params.rpb.dim(1) * params.rpb.dim(2);
  if (params.rpb.dim(0) != heads) throw DimensionError("sparse_attention: bias table head count mismatch");
  auto q = linear(xq, params.wq, params.bq);
  auto k = linear(xkv, params.wk, params.bk);
  auto v = linear(xkv, params.wv, params.bv);
  auto logits = neighborhood_logits(q, k, map.src, map.sources, heads);

  std::vector<std::size_t> flat(heads * map.bias_index.size());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t e = 0; e < map.bias_index.size(); ++e) flat[h * map.bias_index.size() + e] = h * plane + map.bias_index[e];
  auto bias = reshape(gather(reshape(params.rpb, {heads * plane, 1}), flat), {heads, map.queries, map.sources});
  auto scores = add(logits, bias);
  if (!map.additive_mask.empty()) {
    std::vector<T> m(heads * map.additive_mask.size());
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t e = 0; e < map.additive_mask.size(); ++e) m[h * map.additive_mask.size() + e] = T(map.additive_mask[e]);
    scores = add(scores, Tensor<T>({heads, map.queries, map.sources}, std::move(m)));
  }
  scores = scale(scores, T(1) / std::sqrt(T(d / heads)));
  auto weights = softmax(scores, 2);
  if (weights_out) *weights_out = weights;
  auto out = neighborhood_aggregate(weights, v, map.src, map.sources, heads);
  return linear(out, params.wo, params.bo);
}

template <typename T>
void check_token_grid(const Tensor<T>& x, std::size_t H, std::size_t W, std::size_t dim, const char* op) {
  if (x.rank() != 2 || x.dim(0) != H * W || x.dim(1) != dim) {
    throw DimensionError(std::string(op) + ": expected tokens [" + std::to_string(H * W) + "x" +
                         std::to_string(dim) + "] for a " + std::to_string(H) + "x" + std::to_string(W) +
                         " grid, got " + shape_str(x.shape()));
  }
}

/// Dilated regional attention over tokens x[n x d], n = H*W row-major.
template <typename T>
Tensor<T> regional_attention(const Tensor<T>& x, std::size_t H, std::size_t W, const AttentionParams<T>& params,
                             const AttentionConfig& cfg) {
  cfg.validate_for(H, W);
  check_token_grid(x, H, W, cfg.embed_dim, "regional_attention");
  if (params.rpb.dim(1) != cfg.bias_side()) throw ConfigError("regional_attention: bias table does not match region size");
  return sparse_attention(x, x, params, build_region_map(H, W, cfg), cfg.num_heads);
}

/// One entry of a per-query attention dump: source offset from the query
/// and its post-softmax weight.
struct AttentionWeight {
  long dy = 0, dx = 0;
  double weight = 0.0;
};

/// Post-softmax weights of one query, averaged over heads when
/// `head < 0`, otherwise for the given head. Region order is row-major.
template <typename T>
std::vector<AttentionWeight> attention_map_dump(const Tensor<T>& x, std::size_t H, std::size_t W,
                                                const AttentionParams<T>& params, const AttentionConfig& cfg,
                                                GridPos query, int head = -1) {
  cfg.validate_for(H, W);
  check_token_grid(x, H, W, cfg.embed_dim, "attention_map_dump");
  if (query.y >= H || query.x >= W) {
    throw IndexError("attention_map_dump: query (" + std::to_string(query.y) + "," + std::to_string(query.x) +
                     ") outside " + std::to_string(H) + "x" + std::to_string(W) + " map");
  }
  if (head >= int(cfg.num_heads)) throw IndexError("attention_map_dump: head out of range");
  const auto full = build_region_map(H, W, cfg);
  const std::size_t qi = query.y * W + query.x, m = full.sources;
  SparseAttentionMap one;
  one.queries = 1;
  one.sources = m;
  one.src.assign(full.src.begin() + qi * m, full.src.begin() + (qi + 1) * m);
  one.bias_index.assign(full.bias_index.begin() + qi * m, full.bias_index.begin() + (qi + 1) * m);

  NoGradGuard no_grad;
  Tensor<T> weights;
  sparse_attention(gather(x, {qi}), x, params, one, cfg.num_heads, &weights);
  std::vector<AttentionWeight> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t s = one.src[j];
    out[j].dy = long(s / W) - long(query.y);
    out[j].dx = long(s % W) - long(query.x);
    double w = 0;
    if (head < 0) {
      for (std::size_t h = 0; h < cfg.num_heads; ++h) w += double(weights[h * m + j]);
      w /= double(cfg.num_heads);
    } else {
      w = double(weights[std::size_t(head) * m + j]);
    }
    out[j].weight = w;
  }
  return out;
}

/// Plain-text table, one line per region element: "dy dx weight".
inline std::string format_attention_map(const std::vector<AttentionWeight>& weights) {
  std::string out;
  char line[96];
  for (const auto& w : weights) {
    std::snprintf(line, sizeof line, "%ld %ld %.9g\n", w.dy, w.dx, w.weight);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Window-attention baseline

struct WindowConfig {
  std::size_t window_size = 8;
  std::size_t shift = 0;
  std::size_t num_heads = 8;
  std::size_t embed_dim = 256;

  std::size_t bias_side() const { return 2 * window_size - 1; }
  void validate() const {
    if (window_size == 0) throw ConfigError("window_size must be >= 1");
    if (shift >= window_size) throw ConfigError("window shift must be smaller than the window");
    if (num_heads == 0 || embed_dim % num_heads != 0) throw ConfigError("window attention heads must divide embed_dim");
  }
};

/// Index map for (shifted) window attention on an H x W grid padded up to
/// multiples of the window. Sources refer to rows of the key/value table
/// [H*W + 1 x d] whose last row is the zero padding token. With a shift,
/// the grid is cyclically rolled by -shift and tokens that came from
/// different bands of the roll are masked from each other.
inline SparseAttentionMap build_window_map(std::size_t H, std::size_t W, const WindowConfig& cfg) {
  cfg.validate();
  const std::size_t w = cfg.window_size;
  const std::size_t Hp = (H + w - 1) / w * w, Wp = (W + w - 1) / w * w;
  const std::size_t pad_row = H * W;
  const std::size_t side = cfg.bias_side();
  auto band = [&](std::size_t s, std::size_t len) -> int {
    if (cfg.shift == 0) return 0;
    if (s < len - w) return 0;
    if (s < len - cfg.shift) return 1;
    return 2;
  };
  SparseAttentionMap map;
  map.queries = H * W;
  map.sources = w * w;
  const bool masked = cfg.shift > 0;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      // Position of the query in the rolled frame.
      const std::size_t sy = (y + Hp - cfg.shift) % Hp, sx = (x + Wp - cfg.shift) % Wp;
      const std::size_t wy = sy / w * w, wx = sx / w * w;
      const int label_q = band(sy, Hp) * 3 + band(sx, Wp);
      for (std::size_t i = 0; i < w; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const std::size_t ty = wy + i, tx = wx + j;
          const std::size_t oy = (ty + cfg.shift) % Hp, ox = (tx + cfg.shift) % Wp;
          map.src.push_back(oy < H && ox < W ? oy * W + ox : pad_row);
          const long dy = long(ty) - long(sy), dx = long(tx) - long(sx);
          map.bias_index.push_back(std::size_t(dy + long(w) - 1) * side + std::size_t(dx + long(w) - 1));
          if (masked) {
            const int label_s = band(ty, Hp) * 3 + band(tx, Wp);
            map.additive_mask.push_back(label_s == label_q ? 0.0 : -std::numeric_limits<double>::infinity());
          }
        }
      }
    }
  }
  return map;
}

/// Non-overlapping window self-attention with optional cyclic shift.
/// Windows that overhang the map see zero-valued padding tokens.
template <typename T>
Tensor<T> window_attention(const Tensor<T>& x, std::size_t H, std::size_t W, const AttentionParams<T>& params,
                           const WindowConfig& cfg) {
  cfg.validate();
  check_token_grid(x, H, W, cfg.embed_dim, "window_attention");
  if (params.rpb.dim(1) != cfg.bias_side()) throw ConfigError("window_attention: bias table does not match window size");
  const auto map = build_window_map(H, W, cfg);
  auto kv = concat<T>({x, Tensor<T>::zeros({1, cfg.embed_dim})}, 0);
  return sparse_attention(x, kv, params, map, cfg.num_heads);
}

// ---------------------------------------------------------------------------
// Dense reference

/// Dense [n x n] permission matrix with the bias-table entry each permitted
/// pair reads.
struct AttentionMask {
  std::size_t n = 0;
  std::vector<std::uint8_t> allowed;
  std::vector<std::size_t> bias_index;  // meaningful where allowed; unused entries are 0
  bool use_bias = true;

  static AttentionMask all(std::size_t n) {
    AttentionMask m;
    m.n = n;
    m.allowed.assign(n * n, 1);
    m.bias_index.assign(n * n, 0);
    m.use_bias = false;
    return m;
  }
  static AttentionMask identity(std::size_t n) {
    AttentionMask m;
    m.n = n;
    m.allowed.assign(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) m.allowed[i * n + i] = 1;
    m.bias_index.assign(n * n, 0);
    m.use_bias = false;
    return m;
  }
};

/// Dense mask equivalent to regional attention on an H x W grid.
inline AttentionMask region_mask(std::size_t H, std::size_t W, const AttentionConfig& cfg) {
  const auto map = build_region_map(H, W, cfg);
  AttentionMask m;
  m.n = H * W;
  m.allowed.assign(m.n * m.n, 0);
  m.bias_index.assign(m.n * m.n, 0);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < map.sources; ++j) {
      const std::size_t s = map.src[i * map.sources + j];
      m.allowed[i * m.n + s] = 1;
      m.bias_index[i * m.n + s] = map.bias_index[i * map.sources + j];
    }
  return m;
}

/// Full n x n multi-head attention: each query takes a softmax over every
/// permitted key, with the bias-table entry added to permitted logits.
/// Masked pairs carry zero weight, so they are skipped rather than set to
/// -inf. Quadratic in n; a plain-loop verification reference without
/// autograd.
template <typename T>
Tensor<T> global_attention_oracle(const Tensor<T>& x, const AttentionParams<T>& params, const AttentionMask& mask,
                                  std::size_t heads) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (mask.n != n) throw DimensionError("global_attention_oracle: mask size does not match token count");
  if (d % heads) throw ConfigError("global_attention_oracle: heads must divide embedding width");
  const std::size_t dh = d / heads;
  const std::size_t plane = params.rpb.dim(1) * params.rpb.dim(2);
  // y = x W^T + b, row-major [n x d].
  auto project = [&](const Tensor<T>& w, const Tensor<T>& b, const std::vector<T>& in) {
    std::vector<T> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < d; ++o) {
        T acc = b[o];
        for (std::size_t k = 0; k < d; ++k) acc += in[i * d + k] * w[o * d + k];
        out[i * d + o] = acc;
      }
    return out;
  };
  const auto xs = x.vec();
  const auto q = project(params.wq, params.bq, xs), k = project(params.wk, params.bk, xs);
  const auto v = project(params.wv, params.bv, xs);
  const T inv = T(1) / std::sqrt(T(dh));
  std::vector<T> attended(n * d, T(0)), logits(n);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      T top = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask.allowed[i * n + j]) continue;
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        if (mask.use_bias) s += params.rpb[h * plane + mask.bias_index[i * n + j]];
        logits[j] = s * inv;
        top = std::max(top, logits[j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (mask.allowed[i * n + j]) total += logits[j] = std::exp(logits[j] - top);
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask.allowed[i * n + j]) continue;
        const T w = logits[j] / total;
        for (std::size_t c = 0; c < dh; ++c) attended[i * d + h * dh + c] += w * v[j * d + h * dh + c];
      }
    }
  return Tensor<T>({n, d}, project(params.wo, params.bo, attended));
}

}  // namespace rasm
