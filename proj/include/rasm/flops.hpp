// SPDX-License-Identifier: Apache-2.0
//
// Closed-form parameter and multiply-accumulate accounting for the network,
// layer by layer. Counts cover convolutions, linear maps and the two
// gathered attention products; normalization, activations, pooling and
// elementwise ops are not counted. FLOPs are reported as 2 x MACs.
#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "rasm/network.hpp"

namespace rasm {

struct LayerCost {
  std::string path;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

namespace detail {

struct CostSink {
  std::vector<LayerCost> rows;
  void add(std::string path, std::uint64_t params, std::uint64_t macs) {
    rows.push_back({std::move(path), params, macs});
  }
};

inline void cost_ca_block(CostSink& s, const std::string& prefix, std::uint64_t c, std::uint64_t n,
                          const ModelConfig& cfg) {
  const std::uint64_t r = c / cfg.ca_reduction, hidden = c * cfg.mlp_ratio;
  s.add(prefix + ".norm1", 2 * c, 0);
  s.add(prefix + ".ca", (c * r + r) + (r * c + c), 2 * c * r);
  s.add(prefix + ".norm2", 2 * c, 0);
  s.add(prefix + ".mlp", (c * hidden + hidden) + (hidden * c + c), 2 * n * c * hidden);
}

}  // namespace detail

/// Per-layer parameter and MAC counts for an H x W input.
inline std::vector<LayerCost> layer_costs(const ModelConfig& cfg, std::size_t H, std::size_t W) {
  cfg.validate_input(H, W);
  detail::CostSink s;
  std::uint64_t h = H, w = W;
  const std::uint64_t c0 = cfg.width(0);
  s.add("proj", 4 * c0 + c0, 4 * c0 * h * w);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string stage = "enc" + std::to_string(l);
    const std::uint64_t c = cfg.width(l), cn = cfg.width(l + 1);
    for (std::size_t b = 0; b < cfg.ca_blocks; ++b) detail::cost_ca_block(s, detail::block_path(stage, b), c, h * w, cfg);
    h /= 2, w /= 2;
    s.add(stage + ".down", cn * c * 16 + cn, cn * c * 16 * h * w);
  }
  const std::uint64_t cb = cfg.bottleneck_width(), n = h * w;
  const std::uint64_t side = cfg.bias_side();
  const bool regional = cfg.attention_kind == AttentionKind::regional;
  const std::uint64_t sources = regional ? cfg.region_size * cfg.region_size : cfg.window_size * cfg.window_size;
  // Window attention projects keys/values for one extra zero padding row.
  const std::uint64_t kv_rows = regional ? n : n + 1;
  for (std::size_t b = 0; b < cfg.ram_blocks; ++b) {
    const std::string blk = detail::block_path("bottleneck", b);
    const std::uint64_t r = cb / cfg.ca_reduction, hidden = cb * cfg.mlp_ratio;
    s.add(blk + ".norm1", 2 * cb, 0);
    s.add(blk + ".attn.qkv", 3 * (cb * cb + cb), n * cb * cb + 2 * kv_rows * cb * cb);
    s.add(blk + ".attn.rpb", cfg.num_heads * side * side, 0);
    s.add(blk + ".attn.logits", 0, n * sources * cb);
    s.add(blk + ".attn.aggregate", 0, n * sources * cb);
    s.add(blk + ".attn.proj", cb * cb + cb, n * cb * cb);
    s.add(blk + ".ca", (cb * r + r) + (r * cb + cb), 2 * cb * r);
    s.add(blk + ".norm2", 2 * cb, 0);
    s.add(blk + ".mlp", (cb * hidden + hidden) + (hidden * cb + cb), 2 * n * cb * hidden);
  }
  for (std::size_t l = cfg.depth; l-- > 0;) {
    const std::string stage = "dec" + std::to_string(l);
    const std::uint64_t c = cfg.width(l), cin = cfg.width(l + 1);
    s.add(stage + ".up", cin * c * 4 + c, cin * c * 4 * h * w);
    h *= 2, w *= 2;
    s.add(stage + ".fuse", 2 * c * c + c, 2 * c * c * h * w);
    for (std::size_t b = 0; b < cfg.ca_blocks; ++b) detail::cost_ca_block(s, detail::block_path(stage, b), c, h * w, cfg);
  }
  s.add("out", 3 * c0 + 3, 3 * c0 * h * w);
  return s.rows;
}

/// Total learnable parameters (independent of input size).
inline std::uint64_t count_params(const ModelConfig& cfg) {
  const std::size_t f = cfg.size_factor();
  // Any valid input works; the smallest one the bottleneck accepts is used.
  std::size_t side = f;
  if (cfg.attention_kind == AttentionKind::regional) {
    while (side / f < cfg.attention().span()) side += f;
  }
  std::uint64_t total = 0;
  for (const auto& row : layer_costs(cfg, side, side)) total += row.params;
  return total;
}

inline std::uint64_t count_macs(const ModelConfig& cfg, std::size_t H, std::size_t W) {
  std::uint64_t total = 0;
  for (const auto& row : layer_costs(cfg, H, W)) total += row.macs;
  return total;
}

/// Floating-point operations for one H x W forward pass (2 per MAC).
inline std::uint64_t count_flops(const ModelConfig& cfg, std::size_t H, std::size_t W) {
  return 2 * count_macs(cfg, H, W);
}

/// Plain-text table: path, params, MACs, followed by a total line.
inline std::string format_cost_table(const std::vector<LayerCost>& rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-36s %12s %16s\n", "path", "params", "macs");
  out += line;
  std::uint64_t p = 0, m = 0;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-36s %12llu %16llu\n", r.path.c_str(), (unsigned long long)r.params,
                  (unsigned long long)r.macs);
    out += line;
    p += r.params;
    m += r.macs;
  }
  std::snprintf(line, sizeof line, "%-36s %12llu %16llu\n", "total", (unsigned long long)p, (unsigned long long)m);
  out += line;
  std::snprintf(line, sizeof line, "# params=%.4fM macs=%.4fG flops=%.4fG\n", double(p) / 1e6, double(m) / 1e9,
                2.0 * double(m) / 1e9);
  out += line;
  return out;
}

}  // namespace rasm
