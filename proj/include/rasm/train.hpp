// SPDX-License-Identifier: Apache-2.0
//
// Training loop, inference with size padding, and dataset evaluation.
//
// Every random decision in a run is drawn from a generator seeded by
// (train.seed, purpose, step, ...), never from a stream carried across
// steps. A run resumed from a checkpoint at step k therefore replays steps
// k.. exactly as an uninterrupted run would.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rasm/checkpoint.hpp"
#include "rasm/data.hpp"
#include "rasm/losses.hpp"
#include "rasm/metrics.hpp"

namespace rasm {

namespace seed_stream {
inline constexpr std::uint64_t init = 0;
inline constexpr std::uint64_t epoch_order = 1;
inline constexpr std::uint64_t sample = 2;
}  // namespace seed_stream

inline constexpr const char* kCheckpointFile = "checkpoint.rasm";

template <typename T>
ParameterSet<T> initial_params(const RunConfig& cfg) {
  Rng rng(derive_seed(cfg.train.seed, {seed_stream::init}));
  auto p = init_params<T>(cfg.model, rng);
  p.set_requires_grad(true);
  return p;
}

/// Index of the dataset item used at batch slot `slot` of step `step`.
/// Items are visited in a fresh permutation each epoch.
class EpochSampler {
 public:
  EpochSampler(std::size_t dataset_size, std::size_t batch, std::uint64_t seed)
      : n_(dataset_size), batch_(batch), seed_(seed) {}

  std::size_t index(std::size_t step, std::size_t slot) {
    const std::size_t pos = step * batch_ + slot;
    return order(pos / n_)[pos % n_];
  }

 private:
  const std::vector<std::size_t>& order(std::size_t epoch) {
    auto it = cache_.find(epoch);
    if (it != cache_.end()) return it->second;
    if (cache_.size() > 4) cache_.clear();
    std::vector<std::size_t> perm(n_);
    for (std::size_t i = 0; i < n_; ++i) perm[i] = i;
    Rng rng(derive_seed(seed_, {seed_stream::epoch_order, epoch}));
    rng.shuffle(perm.begin(), perm.end());
    return cache_.emplace(epoch, std::move(perm)).first->second;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::map<std::size_t, std::vector<std::size_t>> cache_;
};

/// The augmented (and cropped) training example for one batch slot.
template <typename T>
ShadowSample<T> training_example(const RunConfig& cfg, const std::vector<ShadowSample<T>>& data, EpochSampler& sampler,
                                 std::size_t step, std::size_t slot) {
  Rng rng(derive_seed(cfg.train.seed, {seed_stream::sample, step, slot}));
  auto prepare = [&](const ShadowSample<T>& s) {
    auto out = augment(s, rng, cfg.train.augment);
    if (cfg.train.crop) out = random_crop(out, cfg.train.crop, cfg.train.crop, rng);
    return out;
  };
  auto sample = prepare(data[sampler.index(step, slot)]);
  if (cfg.train.augment.mixup) {
    const auto partner = prepare(data[rng.below(data.size())]);
    if (partner.shadow.shape() == sample.shadow.shape()) sample = mixup(sample, partner, rng);
  }
  return sample;
}

struct StepLog {
  std::size_t step = 0;  // number of completed updates
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
};

inline std::string format_step_log(const StepLog& s) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "step=%zu loss=%.9g lr=%.9g", s.step, s.loss, s.lr);
  return buf;
}

template <typename T>
struct TrainOptions {
  /// Stop after this many completed updates (default: train.steps).
  std::optional<std::size_t> stop_at;
  /// Continue from this state instead of a fresh initialization.
  const Checkpoint<T>* resume = nullptr;
  /// Directory for checkpoints; empty writes nothing.
  std::string out_dir;
  std::ostream* log = nullptr;
  std::function<void(const StepLog&)> on_step;
};

template <typename T>
struct TrainResult {
  Checkpoint<T> checkpoint;
  std::vector<StepLog> history;
};

template <typename T>
Checkpoint<T> snapshot(const RunConfig& cfg, std::size_t step, const ParameterSet<T>& params, const AdamState<T>& opt) {
  return {cfg, step, params.clone(), opt};
}

/// Runs AdamW on the mean per-sample loss of each batch. A non-finite loss
/// stops the run with TrainingError after saving the last good state.
template <typename T>
TrainResult<T> train(const RunConfig& cfg, const std::vector<ShadowSample<T>>& data, const TrainOptions<T>& opts = {}) {
  cfg.validate();
  if (data.empty()) throw ContractError("train: dataset is empty");
  const Schedule schedule = Schedule::from(cfg);
  const AdamHyper hyper = AdamHyper::from(cfg.optim);
  const std::size_t stop = opts.stop_at.value_or(cfg.train.steps);
  if (stop > cfg.train.steps) throw ConfigError("train: stop step exceeds train.steps");

  ParameterSet<T> params;
  AdamState<T> opt;
  std::size_t start = 0;
  if (opts.resume) {
    params = opts.resume->params.clone();
    params.set_requires_grad(true);
    if (opts.resume->optimizer) opt = *opts.resume->optimizer;
    start = opts.resume->step;
    if (start > stop) throw ConfigError("train: checkpoint step exceeds the stop step");
  } else {
    params = initial_params<T>(cfg);
  }
  std::optional<FeatureExtractor<T>> extractor;
  if (cfg.loss.alpha_per > 0) extractor = FeatureExtractor<T>::random();
  const FeatureExtractor<T> no_extractor;

  EpochSampler sampler(data.size(), cfg.train.batch_size, cfg.train.seed);
  auto save = [&](std::size_t step, const std::string& file) {
    if (opts.out_dir.empty()) return;
    save_checkpoint(snapshot(cfg, step, params, opt), (std::filesystem::path(opts.out_dir) / file).string());
  };

  TrainResult<T> result;
  const std::size_t B = cfg.train.batch_size;
  for (std::size_t t = start; t < stop; ++t) {
    const double lr = lr_at(schedule, t);
    params.zero_grad();
    double loss_value = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const auto ex = training_example(cfg, data, sampler, t, b);
      auto pred = rasm_forward(ex.shadow, ex.mask, params, cfg.model);
      auto loss = total_loss(pred, ex.gt, cfg.loss, extractor ? *extractor : no_extractor);
      loss_value += double(loss.item()) / double(B);
      if (!std::isfinite(loss_value)) {
        save(t, kCheckpointFile);
        throw TrainingError("non-finite loss at step " + std::to_string(t + 1) + "; last good state kept at step " +
                            std::to_string(t));
      }
      // Per-sample backward keeps one graph alive at a time; leaf
      // gradients accumulate into the batch mean.
      backward(scale(loss, T(1.0 / double(B))));
    }
    check_finite_grads(params);
    const double norm = clip_grad_norm(params, cfg.optim.grad_clip);
    adamw_step(params, opt, lr, hyper);

    const StepLog entry{t + 1, loss_value, lr, norm};
    result.history.push_back(entry);
    if (opts.log && cfg.train.log_every && ((t + 1) % cfg.train.log_every == 0 || t + 1 == stop)) {
      *opts.log << format_step_log(entry) << '\n' << std::flush;
    }
    if (opts.on_step) opts.on_step(entry);
    if (cfg.train.checkpoint_every && (t + 1) % cfg.train.checkpoint_every == 0) {
      save(t + 1, "checkpoint_step" + std::to_string(t + 1) + ".rasm");
    }
  }
  params.zero_grad();
  result.checkpoint = snapshot(cfg, std::max(start, stop), params, opt);
  save(result.checkpoint.step, kCheckpointFile);
  return result;
}

// ---------------------------------------------------------------------------
// Inference.

namespace detail {

/// Mirror index without repeating the edge sample, extended periodically
/// for pads longer than the axis.
inline std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * long(n) - 2;
  long m = i % period;
  if (m < 0) m += period;
  return std::size_t(m < long(n) ? m : period - m);
}

}  // namespace detail

/// Reflect-pads [C x H x W] on the bottom and right to [C x Hp x Wp].
template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, std::size_t Hp, std::size_t Wp) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (Hp < H || Wp < W) throw DimensionError("reflect_pad: target smaller than " + shape_str(x.shape()));
  std::vector<T> out(C * Hp * Wp);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < Hp; ++y) {
      const std::size_t sy = detail::reflect_index(long(y), H);
      for (std::size_t i = 0; i < Wp; ++i) out[(c * Hp + y) * Wp + i] = x.data()[(c * H + sy) * W + detail::reflect_index(long(i), W)];
    }
  return Tensor<T>({C, Hp, Wp}, std::move(out));
}

/// Smallest padded size the model accepts for an input side of n.
inline std::size_t padded_side(std::size_t n, const ModelConfig& cfg) {
  const std::size_t f = cfg.size_factor();
  std::size_t side = (n + f - 1) / f * f;
  if (cfg.attention_kind == AttentionKind::regional) side = std::max(side, cfg.attention().span() * f);
  return side;
}

/// Restored image in [0,1] for any input size: reflect-pad to a size the
/// model accepts, run it, crop back.
template <typename T>
Tensor<T> restore(const Tensor<T>& image, const Tensor<T>& mask, const ParameterSet<T>& params, const ModelConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("restore: image must be [3xHxW], got " + shape_str(image.shape()));
  if (mask.shape() != Shape{1, image.dim(1), image.dim(2)}) {
    throw DimensionError("restore: mask " + shape_str(mask.shape()) + " does not match image " + shape_str(image.shape()));
  }
  NoGradGuard no_grad;
  const std::size_t H = image.dim(1), W = image.dim(2);
  const std::size_t Hp = padded_side(H, cfg), Wp = padded_side(W, cfg);
  if (Hp == H && Wp == W) return rasm_forward(image, mask, params, cfg, {.clip = true});
  auto out = rasm_forward(reflect_pad(image, Hp, Wp), reflect_pad(mask, Hp, Wp), params, cfg, {.clip = true});
  return crop(out, 0, 0, H, W);
}

template <typename T>
std::vector<MetricRecord> evaluate_samples(const std::vector<ShadowSample<T>>& data, const ParameterSet<T>& params,
                                           const ModelConfig& cfg) {
  std::vector<MetricRecord> rows;
  for (const auto& s : data) rows.push_back(evaluate_pair(s.name, restore(s.shadow, s.mask, params, cfg), s.gt, s.mask));
  return rows;
}

/// Mean whole-image PSNR of the restored samples.
template <typename T>
double mean_psnr(const std::vector<ShadowSample<T>>& data, const ParameterSet<T>& params, const ModelConfig& cfg) {
  if (data.empty()) throw EvaluationError("mean_psnr: no samples");
  double acc = 0;
  for (const auto& s : data) acc += psnr(restore(s.shadow, s.mask, params, cfg), s.gt);
  return acc / double(data.size());
}

}  // namespace rasm
