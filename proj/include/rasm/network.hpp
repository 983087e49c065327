// SPDX-License-Identifier: Apache-2.0
//
// U-shaped shadow-removal network: pointwise input projection of image and
// mask, an encoder of channel-attention (CA) blocks with strided-conv
// downsampling, a regional-attention bottleneck, and a decoder with
// transposed-conv upsampling, concatenated skips and 1x1 fusion. The output
// is the shadow image plus a predicted residual.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "rasm/attention.hpp"

namespace rasm {

enum class AttentionKind { regional, window };

inline std::string to_string(AttentionKind k) { return k == AttentionKind::regional ? "regional" : "window"; }

struct ModelConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 32;
  /// Width of level l is base_channels * channel_multipliers[l], for
  /// l = 0..depth. Empty means 1, 2, 4, ... (doubling per downsample).
  std::vector<std::size_t> channel_multipliers;
  std::size_t ca_blocks = 2;
  std::size_t ram_blocks = 4;
  std::size_t mlp_ratio = 4;
  std::size_t ca_reduction = 4;
  AttentionKind attention_kind = AttentionKind::regional;
  std::size_t region_size = 11;
  std::size_t dilation = 2;
  std::size_t num_heads = 8;
  std::size_t window_size = 11;
  std::size_t window_shift = 0;

  std::size_t multiplier(std::size_t level) const {
    return channel_multipliers.empty() ? (std::size_t{1} << level) : channel_multipliers.at(level);
  }
  std::size_t width(std::size_t level) const { return base_channels * multiplier(level); }
  std::size_t bottleneck_width() const { return width(depth); }

  AttentionConfig attention() const { return {region_size, dilation, num_heads, bottleneck_width()}; }
  WindowConfig window() const { return {window_size, window_shift, num_heads, bottleneck_width()}; }
  std::size_t bias_side() const {
    return attention_kind == AttentionKind::regional ? 2 * region_size - 1 : 2 * window_size - 1;
  }

  void validate() const {
    if (depth == 0) throw ConfigError("model.depth must be >= 1");
    if (base_channels == 0) throw ConfigError("model.base_channels must be >= 1");
    if (!channel_multipliers.empty()) {
      if (channel_multipliers.size() != depth + 1) {
        throw ConfigError("model.channel_multipliers needs depth+1 = " + std::to_string(depth + 1) + " entries");
      }
      for (std::size_t l = 0; l < channel_multipliers.size(); ++l) {
        if (channel_multipliers[l] == 0) throw ConfigError("model.channel_multipliers entries must be positive");
        if (l && channel_multipliers[l] < channel_multipliers[l - 1]) {
          throw ConfigError("model.channel_multipliers must be nondecreasing");
        }
      }
    }
    if (mlp_ratio == 0) throw ConfigError("model.mlp_ratio must be >= 1");
    if (ca_reduction == 0) throw ConfigError("model.ca_reduction must be >= 1");
    for (std::size_t l = 0; l <= depth; ++l) {
      if (width(l) % ca_reduction) {
        throw ConfigError("model.ca_reduction (" + std::to_string(ca_reduction) + ") must divide channel width " +
                          std::to_string(width(l)) + " at level " + std::to_string(l));
      }
    }
    if (attention_kind == AttentionKind::regional) {
      attention().validate();
    } else {
      window().validate();
    }
  }

  std::size_t size_factor() const { return std::size_t{1} << depth; }

  /// Checks an H x W input against the depth and the bottleneck attention.
  void validate_input(std::size_t H, std::size_t W) const {
    validate();
    const std::size_t f = size_factor();
    if (H % f || W % f) {
      throw ConfigError("input " + std::to_string(H) + "x" + std::to_string(W) +
                        " must be divisible by 2^depth = " + std::to_string(f));
    }
    if (attention_kind == AttentionKind::regional) attention().validate_for(H / f, W / f);
  }
};

/// Named parameter tensors keyed by hierarchical path. Iteration order is
/// the lexicographic path order.
template <typename T>
class ParameterSet {
 public:
  void add(const std::string& path, Tensor<T> t) {
    if (!params_.emplace(path, std::move(t)).second) throw ContractError("duplicate parameter path " + path);
  }
  const Tensor<T>& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw ContractError("missing parameter " + path);
    return it->second;
  }
  Tensor<T>& at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw ContractError("missing parameter " + path);
    return it->second;
  }
  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }
  void set_requires_grad(bool on) {
    for (auto& [_, t] : params_) t.set_requires_grad(on);
  }
  /// Deep copy with no shared storage.
  ParameterSet clone() const {
    ParameterSet out;
    for (const auto& [k, t] : params_) out.add(k, t.detach().set_requires_grad(t.requires_grad()));
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor<T>> params_;
};

namespace detail {

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double stddev) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = T(rng.truncated_normal(stddev));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
void add_norm(ParameterSet<T>& p, const std::string& prefix, std::size_t c) {
  p.add(prefix + ".weight", Tensor<T>::ones({c}));
  p.add(prefix + ".bias", Tensor<T>::zeros({c}));
}

template <typename T>
void add_dense(ParameterSet<T>& p, const std::string& prefix, std::size_t out, std::size_t in, Rng& rng) {
  p.add(prefix + ".weight", trunc_normal<T>({out, in}, rng, 0.02));
  p.add(prefix + ".bias", Tensor<T>::zeros({out}));
}

template <typename T>
void add_ca(ParameterSet<T>& p, const std::string& prefix, std::size_t c, std::size_t reduction, Rng& rng) {
  add_dense(p, prefix + ".fc1", c / reduction, c, rng);
  add_dense(p, prefix + ".fc2", c, c / reduction, rng);
}

template <typename T>
void add_ca_block(ParameterSet<T>& p, const std::string& prefix, std::size_t c, const ModelConfig& cfg, Rng& rng) {
  add_norm(p, prefix + ".norm1", c);
  add_ca(p, prefix + ".ca", c, cfg.ca_reduction, rng);
  add_norm(p, prefix + ".norm2", c);
  add_dense(p, prefix + ".mlp.fc1", c * cfg.mlp_ratio, c, rng);
  add_dense(p, prefix + ".mlp.fc2", c, c * cfg.mlp_ratio, rng);
}

inline std::string block_path(const std::string& stage, std::size_t b) { return stage + ".block" + std::to_string(b); }

}  // namespace detail

/// Fresh parameters: truncated-normal(0.02) weights, zero biases, unit LN
/// gains, and a zero output projection so the untrained model is the
/// identity on its shadow input.
template <typename T>
ParameterSet<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  using namespace detail;
  ParameterSet<T> p;
  add_dense(p, "proj", cfg.width(0), 4, rng);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string stage = "enc" + std::to_string(l);
    for (std::size_t b = 0; b < cfg.ca_blocks; ++b) add_ca_block(p, block_path(stage, b), cfg.width(l), cfg, rng);
    p.add(stage + ".down.weight", trunc_normal<T>({cfg.width(l + 1), cfg.width(l), 4, 4}, rng, 0.02));
    p.add(stage + ".down.bias", Tensor<T>::zeros({cfg.width(l + 1)}));
  }
  const std::size_t cb = cfg.bottleneck_width();
  const std::size_t side = cfg.bias_side();
  for (std::size_t b = 0; b < cfg.ram_blocks; ++b) {
    const std::string blk = block_path("bottleneck", b);
    add_norm(p, blk + ".norm1", cb);
    for (const char* name : {"q", "k", "v", "proj"}) add_dense(p, blk + ".attn." + name, cb, cb, rng);
    p.add(blk + ".attn.rpb", trunc_normal<T>({cfg.num_heads, side, side}, rng, 0.02));
    add_ca(p, blk + ".ca", cb, cfg.ca_reduction, rng);
    add_norm(p, blk + ".norm2", cb);
    add_dense(p, blk + ".mlp.fc1", cb * cfg.mlp_ratio, cb, rng);
    add_dense(p, blk + ".mlp.fc2", cb, cb * cfg.mlp_ratio, rng);
  }
  for (std::size_t l = cfg.depth; l-- > 0;) {
    const std::string stage = "dec" + std::to_string(l);
    p.add(stage + ".up.weight", trunc_normal<T>({cfg.width(l + 1), cfg.width(l), 2, 2}, rng, 0.02));
    p.add(stage + ".up.bias", Tensor<T>::zeros({cfg.width(l)}));
    add_dense(p, stage + ".fuse", cfg.width(l), 2 * cfg.width(l), rng);
    for (std::size_t b = 0; b < cfg.ca_blocks; ++b) add_ca_block(p, block_path(stage, b), cfg.width(l), cfg, rng);
  }
  p.add("out.weight", Tensor<T>::zeros({3, cfg.width(0)}));
  p.add("out.bias", Tensor<T>::zeros({3}));
  return p;
}

// ---------------------------------------------------------------------------
// Building blocks. Feature maps are channel-first [C x H x W].

/// Pointwise linear map of the 4-channel image+mask stack to C channels.
template <typename T>
Tensor<T> linear_proj(const Tensor<T>& image, const Tensor<T>& mask, const ParameterSet<T>& p) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("linear_proj: image must be [3xHxW], got " + shape_str(image.shape()));
  if (mask.rank() != 3 || mask.dim(0) != 1 || mask.dim(1) != image.dim(1) || mask.dim(2) != image.dim(2)) {
    throw DimensionError("linear_proj: mask " + shape_str(mask.shape()) + " does not match image " +
                         shape_str(image.shape()));
  }
  return conv1x1(concat<T>({image, mask}, 0), p.at("proj.weight"), p.at("proj.bias"));
}

/// Squeeze-excitation gate: sigmoid(fc2(gelu(fc1(avgpool(x))))) scales
/// each channel of x.
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& prefix) {
  const auto& w1 = p.at(prefix + ".fc1.weight");
  if (x.rank() != 3 || w1.dim(1) != x.dim(0)) {
    throw ConfigError("channel_attention: " + prefix + " expects " + std::to_string(w1.dim(1)) + " channels, got " +
                      shape_str(x.shape()));
  }
  const std::size_t C = x.dim(0);
  auto pooled = reshape(global_avg_pool(x), {1, C});
  auto hidden = gelu(linear(pooled, w1, p.at(prefix + ".fc1.bias")));
  auto gate = sigmoid(linear(hidden, p.at(prefix + ".fc2.weight"), p.at(prefix + ".fc2.bias")));
  return mul_along(x, reshape(gate, {C}), 0);
}

template <typename T>
Tensor<T> norm_channels(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& prefix) {
  return layer_norm(x, p.at(prefix + ".weight"), p.at(prefix + ".bias"), 0);
}

/// x + GELU(MLP(LN(x))), the feed-forward half shared by CA and RAM blocks.
template <typename T>
Tensor<T> feed_forward_residual(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& prefix) {
  auto h = norm_channels(x, p, prefix + ".norm2");
  h = gelu(conv1x1(h, p.at(prefix + ".mlp.fc1.weight"), p.at(prefix + ".mlp.fc1.bias")));
  h = conv1x1(h, p.at(prefix + ".mlp.fc2.weight"), p.at(prefix + ".mlp.fc2.bias"));
  return add(gelu(h), x);
}

/// X~ = CA(LN(X)) + X;  X^ = GELU(MLP(LN(X~))) + X~
template <typename T>
Tensor<T> ca_block(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& prefix) {
  auto mid = add(channel_attention(norm_channels(x, p, prefix + ".norm1"), p, prefix + ".ca"), x);
  return feed_forward_residual(mid, p, prefix);
}

template <typename T>
AttentionParams<T> attention_params(const ParameterSet<T>& p, const std::string& prefix) {
  AttentionParams<T> a;
  a.wq = p.at(prefix + ".q.weight"), a.bq = p.at(prefix + ".q.bias");
  a.wk = p.at(prefix + ".k.weight"), a.bk = p.at(prefix + ".k.bias");
  a.wv = p.at(prefix + ".v.weight"), a.bv = p.at(prefix + ".v.bias");
  a.wo = p.at(prefix + ".proj.weight"), a.bo = p.at(prefix + ".proj.bias");
  a.rpb = p.at(prefix + ".rpb");
  return a;
}

/// Optional capture of intermediate bottleneck values.
template <typename T>
struct ForwardTrace {
  /// Normalized token input [n x C] of each RAM block's attention.
  std::vector<Tensor<T>> attention_inputs;
  std::size_t bottleneck_h = 0, bottleneck_w = 0;
};

/// X~ = CA(Attn(LN(X))) + X;  X^ = GELU(MLP(LN(X~))) + X~
template <typename T>
Tensor<T> ram_block(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& prefix, const ModelConfig& cfg,
                    ForwardTrace<T>* trace = nullptr) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto tokens = transpose(reshape(norm_channels(x, p, prefix + ".norm1"), {C, H * W}));
  if (trace) trace->attention_inputs.push_back(tokens);
  const auto ap = attention_params(p, prefix + ".attn");
  auto attended = cfg.attention_kind == AttentionKind::regional
                      ? regional_attention(tokens, H, W, ap, cfg.attention())
                      : window_attention(tokens, H, W, ap, cfg.window());
  auto back = reshape(transpose(attended), {C, H, W});
  auto mid = add(channel_attention(back, p, prefix + ".ca"), x);
  return feed_forward_residual(mid, p, prefix);
}

/// Stride-2 4x4 convolution: [C x H x W] -> [C' x H/2 x W/2].
template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& prefix) {
  if (x.rank() != 3 || x.dim(1) % 2 || x.dim(2) % 2) {
    throw DimensionError("downsample: spatial size of " + shape_str(x.shape()) + " must be even");
  }
  return conv2d(x, p.at(prefix + ".weight"), std::optional<Tensor<T>>(p.at(prefix + ".bias")), 2, 1);
}

/// Stride-2 2x2 transposed convolution: [C' x H x W] -> [C x 2H x 2W].
template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& prefix) {
  return conv_transpose2d(x, p.at(prefix + ".weight"), std::optional<Tensor<T>>(p.at(prefix + ".bias")), 2, 0);
}

struct ForwardOptions {
  /// Clip the restored image to [0, 1]; used at inference only.
  bool clip = false;
};

/// Restores a shadow image [3 x H x W] given its binary mask [1 x H x W].
template <typename T>
Tensor<T> rasm_forward(const Tensor<T>& image, const Tensor<T>& mask, const ParameterSet<T>& p, const ModelConfig& cfg,
                       ForwardOptions opts = {}, ForwardTrace<T>* trace = nullptr) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("rasm_forward: image must be [3xHxW], got " + shape_str(image.shape()));
  cfg.validate_input(image.dim(1), image.dim(2));
  auto x = linear_proj(image, mask, p);
  std::vector<Tensor<T>> skips;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string stage = "enc" + std::to_string(l);
    for (std::size_t b = 0; b < cfg.ca_blocks; ++b) x = ca_block(x, p, detail::block_path(stage, b));
    skips.push_back(x);
    x = downsample(x, p, stage + ".down");
  }
  if (trace) {
    trace->bottleneck_h = x.dim(1);
    trace->bottleneck_w = x.dim(2);
  }
  for (std::size_t b = 0; b < cfg.ram_blocks; ++b) x = ram_block(x, p, detail::block_path("bottleneck", b), cfg, trace);
  for (std::size_t l = cfg.depth; l-- > 0;) {
    const std::string stage = "dec" + std::to_string(l);
    x = upsample(x, p, stage + ".up");
    x = concat<T>({x, skips[l]}, 0);
    x = conv1x1(x, p.at(stage + ".fuse.weight"), p.at(stage + ".fuse.bias"));
    for (std::size_t b = 0; b < cfg.ca_blocks; ++b) x = ca_block(x, p, detail::block_path(stage, b));
  }
  auto residual = conv1x1(x, p.at("out.weight"), p.at("out.bias"));
  auto restored = add(image, residual);
  return opts.clip ? clamp(restored, T(0), T(1)) : restored;
}

}  // namespace rasm
