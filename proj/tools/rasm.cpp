// SPDX-License-Identifier: Apache-2.0
//
// rasm: command-line front end.
//
//   rasm synth     --out DIR [--count N]
//   rasm train     --out DIR [--data DIR] [--steps N] [--checkpoint RESUME] [--stop-at K]
//   rasm infer     --checkpoint CK --image IMG --mask MASK --out OUT.png
//   rasm eval      --checkpoint CK --data DIR [--out metrics.csv]
//   rasm flops     [--height H --width W] [--out FILE]
//   rasm selfcheck [--thorough]
//   rasm attmap    --checkpoint CK --image IMG --mask MASK --query Y,X [--block B] [--head H] [--out FILE]
//
// Every subcommand accepts --config FILE and --seed N. Exit status: 0 on
// success, 1 for usage or configuration errors, 2 for runtime failures.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "rasm/flops.hpp"
#include "rasm/selfcheck.hpp"
#include "rasm/train.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::optional<std::size_t> steps;
};

void add_common(CLI::App* app, CommonArgs& a) {
  app->add_option("--config", a.config, "key = value configuration file")->check(CLI::ExistingFile);
  app->add_option("--seed", a.seed, "seed for synthesis and training");
  app->add_option("--out", a.out, "output path");
  app->add_option("--checkpoint", a.checkpoint, "checkpoint file");
  app->add_option("--steps", a.steps, "training schedule length");
}

rasm::RunConfig resolve_config(const CommonArgs& a) {
  rasm::RunConfig cfg = a.config.empty() ? rasm::RunConfig{} : rasm::load_config(a.config);
  if (a.seed) cfg.train.seed = cfg.synth.seed = *a.seed;
  if (a.steps) cfg.train.steps = *a.steps;
  cfg.validate();
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path);
  if (!f) throw rasm::IoError("cannot write " + path);
  f << text;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw CLI::RequiredError(flag);
}

rasm::Checkpoint<float> checkpoint_or_init(const CommonArgs& a) {
  if (!a.checkpoint.empty()) return rasm::load_checkpoint<float>(a.checkpoint);
  throw CLI::RequiredError("--checkpoint");
}

std::vector<rasm::ShadowSample<float>> training_data(const rasm::RunConfig& cfg) {
  if (!cfg.train.data_dir.empty()) return rasm::load_dataset<float>(cfg.train.data_dir);
  return rasm::synth_dataset<float>(cfg.synth, cfg.train.samples);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RASM shadow removal: synthesis, training, inference and evaluation"};
  app.require_subcommand(1);

  CommonArgs common;
  std::size_t count = 0;
  std::string data_dir, image_path, mask_path, query;
  std::optional<std::size_t> stop_at;
  std::size_t height = 256, width = 256, block = 0;
  int head = -1;
  bool thorough = false;

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset to --out");
  add_common(synth, common);
  synth->add_option("--count", count, "number of samples (default: train.samples)");

  auto* train = app.add_subcommand("train", "train a model; checkpoints go to --out");
  add_common(train, common);
  train->add_option("--data", data_dir, "dataset root (default: train.data_dir or synthetic)");
  train->add_option("--stop-at", stop_at, "stop after this many completed steps");

  auto* infer = app.add_subcommand("infer", "restore one image");
  add_common(infer, common);
  infer->add_option("--image", image_path, "shadow image")->required();
  infer->add_option("--mask", mask_path, "shadow mask")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval, common);
  eval->add_option("--data", data_dir, "dataset root")->required();

  auto* flops = app.add_subcommand("flops", "per-layer parameter and MAC table");
  add_common(flops, common);
  flops->add_option("--height", height, "input height");
  flops->add_option("--width", width, "input width");

  auto* selfcheck = app.add_subcommand("selfcheck", "run the built-in verification suites");
  add_common(selfcheck, common);
  selfcheck->add_flag("--thorough", thorough, "wider attention sweep and full gradient checks");

  auto* attmap = app.add_subcommand("attmap", "dump one query's bottleneck attention weights");
  add_common(attmap, common);
  attmap->add_option("--image", image_path, "shadow image")->required();
  attmap->add_option("--mask", mask_path, "shadow mask")->required();
  attmap->add_option("--query", query, "bottleneck grid position Y,X")->required();
  attmap->add_option("--block", block, "bottleneck block index");
  attmap->add_option("--head", head, "head index (default: mean over heads)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth) {
      require(common.out, "--out");
      const auto cfg = resolve_config(common);
      const std::size_t n = count ? count : cfg.train.samples;
      for (std::size_t i = 0; i < n; ++i) rasm::write_sample(common.out, rasm::generate_sample<float>(cfg.synth, i));
      std::cout << "wrote " << n << " samples to " << common.out << "\n";
    } else if (*train) {
      auto cfg = resolve_config(common);
      if (!data_dir.empty()) cfg.train.data_dir = data_dir;
      require(common.out, "--out");
      std::optional<rasm::Checkpoint<float>> resume;
      if (!common.checkpoint.empty()) resume = rasm::load_checkpoint<float>(common.checkpoint);
      const auto data = training_data(cfg);
      rasm::TrainOptions<float> opts;
      opts.stop_at = stop_at;
      opts.resume = resume ? &*resume : nullptr;
      opts.out_dir = common.out;
      opts.log = &std::cout;
      const auto result = rasm::train(cfg, data, opts);
      std::string curve = "step,loss,lr\n";
      for (const auto& s : result.history) {
        char line[96];
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", s.step, s.loss, s.lr);
        curve += line;
      }
      write_text((std::filesystem::path(common.out) / "loss.csv").string(), curve);
    } else if (*infer) {
      require(common.out, "--out");
      const auto ck = checkpoint_or_init(common);
      const auto image = rasm::load_image<float>(image_path, 3);
      const auto mask = rasm::load_image<float>(mask_path, 1);
      rasm::save_image(rasm::restore(image, mask, ck.params, ck.config.model), common.out);
    } else if (*eval) {
      const auto ck = checkpoint_or_init(common);
      const auto rows = rasm::evaluate_samples(rasm::load_dataset<float>(data_dir), ck.params, ck.config.model);
      write_text(common.out, rasm::format_metrics_csv(rows));
    } else if (*flops) {
      const auto cfg = common.checkpoint.empty() ? resolve_config(common) : rasm::load_checkpoint<float>(common.checkpoint).config;
      write_text(common.out, rasm::format_cost_table(rasm::layer_costs(cfg.model, height, width)));
    } else if (*selfcheck) {
      bool all = true;
      for (const auto& r : rasm::run_selfcheck(thorough)) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
        all = all && r.passed;
      }
      return all ? 0 : kExitRuntime;
    } else if (*attmap) {
      const auto ck = checkpoint_or_init(common);
      const auto& mcfg = ck.config.model;
      if (mcfg.attention_kind != rasm::AttentionKind::regional) throw rasm::ConfigError("attmap needs a regional-attention model");
      if (block >= mcfg.ram_blocks) throw rasm::ConfigError("--block must be below model.ram_blocks");
      std::size_t qy = 0, qx = 0;
      if (std::sscanf(query.c_str(), "%zu,%zu", &qy, &qx) != 2) throw rasm::ConfigError("--query expects Y,X");
      const auto image = rasm::load_image<float>(image_path, 3);
      const auto mask = rasm::load_image<float>(mask_path, 1);
      rasm::ForwardTrace<float> trace;
      rasm::NoGradGuard no_grad;
      rasm::rasm_forward(image, mask, ck.params, mcfg, {}, &trace);
      const auto prefix = rasm::detail::block_path("bottleneck", block) + ".attn";
      const auto weights = rasm::attention_map_dump(trace.attention_inputs[block], trace.bottleneck_h, trace.bottleneck_w,
                                                    rasm::attention_params(ck.params, prefix), mcfg.attention(), {qy, qx}, head);
      write_text(common.out, rasm::format_attention_map(weights));
    }
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const rasm::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
