// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and its text form: one `section.key = value` per line,
// `#` starts a comment, lists are comma-separated. Every field has a
// default, so a file only needs the keys it changes. Doubles are written
// in shortest round-trip form, which makes parse(format(c)) == c and
// format(parse(text)) stable.
#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "rasm/data.hpp"
#include "rasm/losses.hpp"

namespace rasm {

struct OptimConfig {
  double lr_init = 4e-4;
  double lr_final = 1e-6;
  std::size_t warmup_steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.02;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global-norm bound; 0 disables clipping
};

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t steps = 2000;  // length of the learning-rate schedule
  std::size_t batch_size = 4;
  std::size_t crop = 0;  // square training crop; 0 trains on full images
  std::size_t samples = 8;  // synthetic training set size when no data dir is given
  std::string data_dir;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::size_t log_every = 1;
  AugmentOptions augment;
};

struct RunConfig {
  ModelConfig model;
  SynthConfig synth;
  LossWeights loss;
  OptimConfig optim;
  TrainConfig train;

  void validate() const {
    model.validate();
    synth.validate();
    loss.validate();
    if (!(optim.lr_init > 0) || !(optim.lr_final > 0) || optim.lr_final > optim.lr_init) {
      throw ConfigError("optim.lr_init and optim.lr_final must satisfy 0 < lr_final <= lr_init");
    }
    if (!(optim.beta1 >= 0 && optim.beta1 < 1) || !(optim.beta2 >= 0 && optim.beta2 < 1)) {
      throw ConfigError("optim.beta1/beta2 must lie in [0, 1)");
    }
    if (!(optim.weight_decay >= 0)) throw ConfigError("optim.weight_decay must be >= 0");
    if (!(optim.eps > 0)) throw ConfigError("optim.eps must be > 0");
    if (!(optim.grad_clip >= 0)) throw ConfigError("optim.grad_clip must be >= 0");
    if (train.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (train.samples == 0) throw ConfigError("train.samples must be >= 1");
    if (train.steps && optim.warmup_steps > train.steps) throw ConfigError("optim.warmup_steps exceeds train.steps");
    for (double p : {train.augment.p_hflip, train.augment.p_vflip, train.augment.p_rotate})
      if (!(p >= 0 && p <= 1)) throw ConfigError("train.augment probabilities must lie in [0, 1]");
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("invalid value '" + text + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("invalid boolean '" + text + "' for " + key);
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename N, typename Member>
Field number_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) return format_double(member(const_cast<RunConfig&>(c)));
            else return std::to_string(member(const_cast<RunConfig&>(c)));
          },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_number<N>(key, v); }};
}

template <typename Member>
Field bool_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }};
}

inline const std::vector<Field>& fields() {
  // Accessors return references into the config so one lambda serves both
  // directions.
#define RASM_FIELD(N, key, expr) number_field<N>(key, [](RunConfig& c) -> N& { return c.expr; })
#define RASM_BOOL(key, expr) bool_field(key, [](RunConfig& c) -> bool& { return c.expr; })
  using u64 = std::uint64_t;
  using sz = std::size_t;
  static const std::vector<Field> table = {
      RASM_FIELD(sz, "model.depth", model.depth),
      RASM_FIELD(sz, "model.base_channels", model.base_channels),
      {"model.channel_multipliers",
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.model.channel_multipliers.size(); ++i)
           s += (i ? "," : "") + std::to_string(c.model.channel_multipliers[i]);
         return s;
       },
       [](RunConfig& c, const std::string& v) {
         c.model.channel_multipliers.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ','))
           c.model.channel_multipliers.push_back(parse_number<std::size_t>("model.channel_multipliers", trim(item)));
       }},
      RASM_FIELD(sz, "model.ca_blocks", model.ca_blocks),
      RASM_FIELD(sz, "model.ram_blocks", model.ram_blocks),
      RASM_FIELD(sz, "model.mlp_ratio", model.mlp_ratio),
      RASM_FIELD(sz, "model.ca_reduction", model.ca_reduction),
      {"model.attention",
       [](const RunConfig& c) { return to_string(c.model.attention_kind); },
       [](RunConfig& c, const std::string& v) {
         if (v == "regional") c.model.attention_kind = AttentionKind::regional;
         else if (v == "window") c.model.attention_kind = AttentionKind::window;
         else throw ConfigError("invalid value '" + v + "' for model.attention (regional|window)");
       }},
      RASM_FIELD(sz, "model.region_size", model.region_size),
      RASM_FIELD(sz, "model.dilation", model.dilation),
      RASM_FIELD(sz, "model.num_heads", model.num_heads),
      RASM_FIELD(sz, "model.window_size", model.window_size),
      RASM_FIELD(sz, "model.window_shift", model.window_shift),

      RASM_FIELD(u64, "synth.seed", synth.seed),
      RASM_FIELD(sz, "synth.height", synth.height),
      RASM_FIELD(sz, "synth.width", synth.width),
      RASM_FIELD(unsigned, "synth.textures", synth.textures),
      RASM_FIELD(sz, "synth.vertices_min", synth.vertices_min),
      RASM_FIELD(sz, "synth.vertices_max", synth.vertices_max),
      RASM_FIELD(double, "synth.gamma_min", synth.gamma_min),
      RASM_FIELD(double, "synth.gamma_max", synth.gamma_max),
      RASM_FIELD(double, "synth.beta_min", synth.beta_min),
      RASM_FIELD(double, "synth.beta_max", synth.beta_max),
      RASM_FIELD(double, "synth.penumbra", synth.penumbra),

      RASM_FIELD(double, "loss.alpha_per", loss.alpha_per),
      RASM_FIELD(double, "loss.alpha_cont", loss.alpha_cont),
      {"loss.perceptual_weights",
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.loss.perceptual.size(); ++i) s += (i ? "," : "") + format_double(c.loss.perceptual[i]);
         return s;
       },
       [](RunConfig& c, const std::string& v) {
         std::stringstream ss(v);
         std::string item;
         std::size_t i = 0;
         while (std::getline(ss, item, ',')) {
           if (i >= c.loss.perceptual.size()) throw ConfigError("loss.perceptual_weights needs exactly 5 values");
           c.loss.perceptual[i++] = parse_number<double>("loss.perceptual_weights", trim(item));
         }
         if (i != c.loss.perceptual.size()) throw ConfigError("loss.perceptual_weights needs exactly 5 values");
       }},
      RASM_FIELD(double, "loss.epsilon", loss.epsilon),

      RASM_FIELD(double, "optim.lr_init", optim.lr_init),
      RASM_FIELD(double, "optim.lr_final", optim.lr_final),
      RASM_FIELD(sz, "optim.warmup_steps", optim.warmup_steps),
      RASM_FIELD(double, "optim.beta1", optim.beta1),
      RASM_FIELD(double, "optim.beta2", optim.beta2),
      RASM_FIELD(double, "optim.weight_decay", optim.weight_decay),
      RASM_FIELD(double, "optim.eps", optim.eps),
      RASM_FIELD(double, "optim.grad_clip", optim.grad_clip),

      RASM_FIELD(u64, "train.seed", train.seed),
      RASM_FIELD(sz, "train.steps", train.steps),
      RASM_FIELD(sz, "train.batch_size", train.batch_size),
      RASM_FIELD(sz, "train.crop", train.crop),
      RASM_FIELD(sz, "train.samples", train.samples),
      {"train.data_dir", [](const RunConfig& c) { return c.train.data_dir; },
       [](RunConfig& c, const std::string& v) { c.train.data_dir = v; }},
      RASM_FIELD(sz, "train.checkpoint_every", train.checkpoint_every),
      RASM_FIELD(sz, "train.log_every", train.log_every),
      RASM_FIELD(double, "train.augment.p_hflip", train.augment.p_hflip),
      RASM_FIELD(double, "train.augment.p_vflip", train.augment.p_vflip),
      RASM_FIELD(double, "train.augment.p_rotate", train.augment.p_rotate),
      RASM_BOOL("train.augment.mixup", train.augment.mixup),
      RASM_BOOL("train.augment.hsv", train.augment.hsv),
  };
#undef RASM_FIELD
#undef RASM_BOOL
  return table;
}

}  // namespace detail

/// All recognised keys, in file order.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::fields()) keys.push_back(f.key);
  return keys;
}

/// Sets one field from its text value; unknown keys raise ConfigError.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields())
    if (f.key == key) return f.set(cfg, value);
  throw ConfigError("unknown config field '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& f : detail::fields())
    if (f.key == key) return f.get(cfg);
  throw ConfigError("unknown config field '" + key + "'");
}

/// Applies `key = value` lines on top of `base`. Does not validate.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

/// Every field, one per line.
inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw FileNotFoundError("config file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

}  // namespace rasm
