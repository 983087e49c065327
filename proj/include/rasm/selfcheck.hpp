// SPDX-License-Identifier: Apache-2.0
//
// Built-in verification suites run by `rasm selfcheck`: sparse attention
// against the dense masked reference, finite-difference gradient checks,
// and closed-form properties of the model, losses, metrics and schedule.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rasm/gradcheck.hpp"
#include "rasm/train.hpp"

namespace rasm {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

/// Attention parameters with every entry (biases included) drawn from
/// N(0, stddev) so that no term of the computation vanishes.
template <typename T>
AttentionParams<T> random_attention_params(std::size_t dim, std::size_t heads, std::size_t side, Rng& rng,
                                           double stddev = 0.5) {
  AttentionParams<T> p;
  auto draw = [&](Shape s) { return Tensor<T>::randn(std::move(s), rng, stddev); };
  p.wq = draw({dim, dim}), p.bq = draw({dim}), p.wk = draw({dim, dim}), p.bk = draw({dim});
  p.wv = draw({dim, dim}), p.bv = draw({dim}), p.wo = draw({dim, dim}), p.bo = draw({dim});
  p.rpb = draw({heads, side, side});
  return p;
}

}  // namespace detail

/// Largest deviation of regional attention from the dense masked reference
/// over all grids up to max_side, odd r in [1, max_r], the listed dilations
/// and head counts, for `seeds` random draws per configuration.
inline double attention_oracle_error(std::size_t max_side, std::size_t max_r, const std::vector<std::size_t>& dilations,
                                     const std::vector<std::size_t>& heads_list, std::size_t seeds,
                                     std::size_t* configs = nullptr) {
  double worst = 0;
  std::size_t count = 0;
  for (std::size_t r = 1; r <= max_r; r += 2)
    for (std::size_t dil : dilations)
      for (std::size_t heads : heads_list) {
        const std::size_t span = dil * (r - 1) + 1;
        for (std::size_t H = span; H <= max_side; ++H)
          for (std::size_t W = span; W <= max_side; ++W) {
            const AttentionConfig cfg{r, dil, heads, 2 * heads};
            const auto mask = region_mask(H, W, cfg);
            for (std::size_t s = 0; s < seeds; ++s) {
              Rng rng(derive_seed(s, {r, dil, heads, H, W}));
              const auto params = detail::random_attention_params<double>(cfg.embed_dim, heads, cfg.bias_side(), rng);
              const auto x = Tensor<double>::randn({H * W, cfg.embed_dim}, rng);
              worst = std::max(worst, detail::max_abs_diff(regional_attention(x, H, W, params, cfg),
                                                           global_attention_oracle(x, params, mask, heads)));
              ++count;
            }
          }
      }
  if (configs) *configs = count;
  return worst;
}

/// Dense mask in which every query sees every token with its relative
/// offset bias, built independently of the region machinery.
inline AttentionMask full_bias_mask(std::size_t H, std::size_t W, std::size_t side) {
  AttentionMask m = AttentionMask::all(H * W);
  m.use_bias = true;
  const long cy = long(side) / 2, cx = long(side) / 2;
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t j = 0; j < H * W; ++j) {
      const long dy = long(j / W) - long(i / W), dx = long(j % W) - long(i % W);
      m.bias_index[i * H * W + j] = std::size_t(dy + cy) * side + std::size_t(dx + cx);
    }
  return m;
}

/// Regional attention whose region is the whole (odd, square) map against
/// unrestricted attention with biases.
inline double full_attention_reduction_error(std::size_t side, std::size_t heads, std::size_t seeds) {
  double worst = 0;
  const AttentionConfig cfg{side, 1, heads, 4 * heads};
  const auto mask = full_bias_mask(side, side, cfg.bias_side());
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng(derive_seed(s, {side, heads, 77}));
    const auto params = detail::random_attention_params<double>(cfg.embed_dim, heads, cfg.bias_side(), rng);
    const auto x = Tensor<double>::randn({side * side, cfg.embed_dim}, rng);
    worst = std::max(worst, detail::max_abs_diff(regional_attention(x, side, side, params, cfg),
                                                 global_attention_oracle(x, params, mask, heads)));
  }
  return worst;
}

/// Smallest model used by the end-to-end gradient check: one level,
/// four base channels, 8x8 inputs (4x4 bottleneck).
inline ModelConfig micro_gradcheck_config() {
  ModelConfig cfg;
  cfg.depth = 1;
  cfg.base_channels = 4;
  cfg.ca_blocks = 1;
  cfg.ram_blocks = 1;
  cfg.mlp_ratio = 2;
  cfg.ca_reduction = 2;
  cfg.region_size = 3;
  cfg.dilation = 1;
  cfg.num_heads = 2;
  return cfg;
}

/// Parameters with every entry random, so no gradient is trivially zero.
template <typename T>
ParameterSet<T> randomized_params(const ModelConfig& cfg, Rng& rng, double stddev = 0.3) {
  auto p = init_params<T>(cfg, rng);
  for (auto& [path, t] : p) {
    auto d = t.mutable_data();
    const bool gain = path.size() > 7 && path.ends_with(".weight") && t.rank() == 1;
    for (auto& v : d) v = T((gain ? 1.0 : 0.0) + stddev * rng.normal());
  }
  return p;
}

/// Finite-difference check of the whole model: every parameter tensor,
/// the image and the mask input.
inline GradCheckReport micro_model_gradcheck(std::uint64_t seed, std::size_t max_elements = 0) {
  const auto cfg = micro_gradcheck_config();
  Rng rng(seed);
  auto params = randomized_params<double>(cfg, rng);
  auto image = Tensor<double>::uniform({3, 8, 8}, rng, 0, 1);
  auto mask = Tensor<double>::uniform({1, 8, 8}, rng, 0, 1);
  const auto target = Tensor<double>::uniform({3, 8, 8}, rng, 0, 1);
  std::vector<std::pair<std::string, Tensor<double>>> inputs{{"image", image}, {"mask", mask}};
  for (auto& [path, t] : params) inputs.emplace_back(path, t);
  auto fn = [&] { return charbonnier(rasm_forward(image, mask, params, cfg), target, 1e-3); };
  return gradcheck<double>(fn, inputs, {.max_elements = max_elements, .seed = seed});
}

/// Finite-difference check of one regional-attention layer.
inline GradCheckReport attention_gradcheck(std::uint64_t seed, const AttentionConfig& cfg, std::size_t H, std::size_t W) {
  Rng rng(seed);
  auto params = detail::random_attention_params<double>(cfg.embed_dim, cfg.num_heads, cfg.bias_side(), rng);
  auto x = Tensor<double>::randn({H * W, cfg.embed_dim}, rng);
  const auto probe = Tensor<double>::randn({H * W, cfg.embed_dim}, rng);
  std::vector<std::pair<std::string, Tensor<double>>> inputs{{"x", x},   {"wq", params.wq}, {"bq", params.bq},
                                                             {"wk", params.wk}, {"bk", params.bk}, {"wv", params.wv},
                                                             {"bv", params.bv}, {"wo", params.wo}, {"bo", params.bo},
                                                             {"rpb", params.rpb}};
  auto fn = [&] { return sum(mul(regional_attention(x, H, W, params, cfg), probe)); };
  return gradcheck<double>(fn, inputs, {.seed = seed});
}

/// The standard suite. `thorough` widens the attention sweep.
inline std::vector<CheckResult> run_selfcheck(bool thorough = false) {
  std::vector<CheckResult> out;
  auto record = [&](std::string name, const std::function<CheckResult()>& fn) {
    try {
      auto r = fn();
      r.name = std::move(name);
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      out.push_back({std::move(name), false, std::string("exception: ") + e.what()});
    }
  };

  record("attention_oracle", [&] {
    std::size_t configs = 0;
    const double err = attention_oracle_error(thorough ? 16 : 9, 7, {1, 2, 3}, {1, 2, 4}, thorough ? 3 : 1, &configs);
    return CheckResult{"", err < 1e-5, "max|diff|=" + detail::sci(err) + " over " + std::to_string(configs) + " cases"};
  });
  record("full_attention_reduction", [&] {
    double err = 0;
    for (std::size_t side : {1, 3, 5, 7}) err = std::max(err, full_attention_reduction_error(side, 2, 3));
    return CheckResult{"", err < 1e-5, "max|diff|=" + detail::sci(err)};
  });
  record("gradcheck_attention", [&] {
    const auto rep = attention_gradcheck(1, {3, 2, 2, 4}, 5, 6);
    return CheckResult{"", rep.passed(1e-6), "max rel=" + detail::sci(rep.max_rel_error())};
  });
  record("gradcheck_model", [&] {
    const auto rep = micro_model_gradcheck(2, thorough ? 0 : 8);
    const auto* w = rep.worst();
    return CheckResult{"", rep.passed(1e-6), "max rel=" + detail::sci(rep.max_rel_error()) + (w ? " at " + w->name : "")};
  });
  record("residual_identity", [&] {
    ModelConfig cfg = micro_gradcheck_config();
    Rng rng(3);
    const auto p = init_params<double>(cfg, rng);
    const auto img = Tensor<double>::uniform({3, 8, 8}, rng, 0, 1);
    const auto mask = Tensor<double>::uniform({1, 8, 8}, rng, 0, 1);
    const double err = detail::max_abs_diff(rasm_forward(img, mask, p, cfg), img);
    return CheckResult{"", err == 0.0, "max|diff|=" + detail::sci(err)};
  });
  record("loss_floor", [&] {
    Rng rng(4);
    const auto img = Tensor<double>::uniform({3, 32, 32}, rng, 0, 1);
    const double v = total_loss(img, img, LossWeights{}, FeatureExtractor<double>::random()).item();
    return CheckResult{"", std::abs(v - 1e-3) <= 1e-9, "loss=" + detail::format_double(v)};
  });
  record("schedule_endpoints", [&] {
    const Schedule s{4e-4, 1e-6, 1000, 0};
    const bool ok = lr_at(s, 0) == 4e-4 && lr_at(s, 1000) == 1e-6;
    return CheckResult{"", ok, "lr(0)=" + detail::format_double(lr_at(s, 0)) + " lr(T)=" + detail::format_double(lr_at(s, 1000))};
  });
  record("metrics", [&] {
    Rng rng(5);
    const auto a = Tensor<double>::uniform({3, 16, 16}, rng, 0, 0.9);
    const auto b = add_scalar(a, 0.1);
    const double p = psnr(b, a), s = ssim(a, a);
    const auto white = srgb_to_lab(Tensor<double>::ones({3, 1, 1}));
    const bool ok = std::abs(p - 20.0) < 1e-6 && std::abs(s - 1.0) < 1e-12 && std::abs(white[0] - 100.0) < 0.01;
    return CheckResult{"", ok, "psnr=" + detail::format_double(p) + " ssim=" + detail::format_double(s)};
  });
  return out;
}

}  // namespace rasm
