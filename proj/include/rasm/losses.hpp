// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "rasm/network.hpp"

namespace rasm {

struct LossWeights {
  double alpha_per = 0.001;
  double alpha_cont = 1.0;
  std::array<double, 5> perceptual{0.1, 0.1, 1.0, 1.0, 1.0};
  double epsilon = 1e-6;  // Charbonnier

  void validate() const {
    if (alpha_per < 0 || alpha_cont < 0) throw ConfigError("loss weights must be nonnegative");
    for (double w : perceptual)
      if (w < 0) throw ConfigError("loss.perceptual_weights must be nonnegative");
    if (!(epsilon > 0)) throw ConfigError("loss.epsilon must be positive");
  }
};

/// mean(sqrt((pred - target)^2 + eps))
template <typename T>
Tensor<T> charbonnier(const Tensor<T>& pred, const Tensor<T>& target, double eps = 1e-6) {
  detail::require_same_shape(pred, target, "charbonnier");
  return mean(sqrt(add_scalar(square(sub(pred, target)), T(eps))));
}

/// Frozen five-stage convolutional feature pyramid used by the perceptual
/// loss. Stage k (k = 0..4) produces kChannels[k] channels at 1/2^k of the
/// input resolution: stage 0 is conv3x3+ReLU on the image, later stages
/// average-pool by 2 and then apply conv3x3+ReLU.
///
/// The default instance draws He-normal weights from a fixed seed; trained
/// weights can be substituted via from_params().
template <typename T>
class FeatureExtractor {
 public:
  static constexpr std::array<std::size_t, 5> kChannels{64, 128, 256, 512, 512};
  static constexpr std::uint64_t kDefaultSeed = 0x5eed'f00d'cafe'0001ull;
  static constexpr std::size_t kMinInput = 32;

  static FeatureExtractor random(std::uint64_t seed = kDefaultSeed) {
    Rng rng(seed);
    FeatureExtractor fx;
    std::size_t in = 3;
    for (std::size_t k = 0; k < kChannels.size(); ++k) {
      const std::size_t out = kChannels[k];
      const double stddev = std::sqrt(2.0 / double(in * 9));
      std::vector<T> w(out * in * 9);
      for (auto& v : w) v = T(rng.normal() * stddev);
      fx.weights_.emplace_back(Shape{out, in, 3, 3}, std::move(w));
      fx.biases_.push_back(Tensor<T>::zeros({out}));
      in = out;
    }
    return fx;
  }

  /// Reads "extractor.stage{k}.weight" / ".bias" entries.
  static FeatureExtractor from_params(const ParameterSet<T>& p) {
    FeatureExtractor fx;
    std::size_t in = 3;
    for (std::size_t k = 0; k < kChannels.size(); ++k) {
      const std::string base = "extractor.stage" + std::to_string(k);
      auto w = p.at(base + ".weight").detach();
      auto b = p.at(base + ".bias").detach();
      if (w.shape() != Shape{kChannels[k], in, 3, 3} || b.numel() != kChannels[k]) {
        throw DimensionError("feature extractor stage " + std::to_string(k) + " has shape " + shape_str(w.shape()));
      }
      fx.weights_.push_back(w);
      fx.biases_.push_back(b);
      in = kChannels[k];
    }
    return fx;
  }

  ParameterSet<T> to_params() const {
    ParameterSet<T> p;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      const std::string base = "extractor.stage" + std::to_string(k);
      p.add(base + ".weight", weights_[k].detach());
      p.add(base + ".bias", biases_[k].detach());
    }
    return p;
  }

  /// Feature maps of all five stages for image [3 x H x W].
  std::vector<Tensor<T>> features(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("feature extractor expects [3xHxW], got " + shape_str(image.shape()));
    if (image.dim(1) < kMinInput || image.dim(2) < kMinInput) {
      throw DimensionError("perceptual features need at least " + std::to_string(kMinInput) + "x" +
                           std::to_string(kMinInput) + " input, got " + shape_str(image.shape()));
    }
    std::vector<Tensor<T>> out;
    Tensor<T> x = image;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      if (k) x = avg_pool2d(x, 2);
      x = relu(conv2d(x, weights_[k], std::optional<Tensor<T>>(biases_[k]), 1, 1));
      out.push_back(x);
    }
    return out;
  }

 private:
  std::vector<Tensor<T>> weights_, biases_;
};

/// sum_k w_k * mean|F_k(pred) - F_k(target)|. The target's features carry
/// no gradient; extractor weights never do.
template <typename T>
Tensor<T> perceptual(const Tensor<T>& pred, const Tensor<T>& target, const FeatureExtractor<T>& extractor,
                     const std::array<double, 5>& weights) {
  detail::require_same_shape(pred, target, "perceptual");
  std::vector<Tensor<T>> ft;
  {
    NoGradGuard no_grad;
    ft = extractor.features(target.detach());
  }
  const auto fp = extractor.features(pred);
  Tensor<T> total;
  for (std::size_t k = 0; k < fp.size(); ++k) {
    auto term = scale(mean(abs(sub(fp[k], ft[k]))), T(weights[k]));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

/// alpha_per * perceptual + alpha_cont * charbonnier. The perceptual term
/// is skipped entirely when alpha_per is zero.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossWeights& w,
                     const FeatureExtractor<T>& extractor) {
  w.validate();
  auto loss = scale(charbonnier(pred, target, w.epsilon), T(w.alpha_cont));
  if (w.alpha_per > 0) loss = add(loss, scale(perceptual(pred, target, extractor, w.perceptual), T(w.alpha_per)));
  return loss;
}

}  // namespace rasm
