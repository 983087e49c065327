// SPDX-License-Identifier: Apache-2.0
#include <fstream>

#include "rasm/data.hpp"
#include "rasm/image_io.hpp"
#include "test_util.hpp"

using namespace rasm;
using namespace rasm_test;

namespace {

using Sample = ShadowSample<double>;

double luminance_mean(const Sample& s, double want) {
  const std::size_t n = s.height() * s.width();
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (s.mask[i] != want) continue;
    acc += 0.2126 * s.shadow[i] + 0.7152 * s.shadow[n + i] + 0.0722 * s.shadow[2 * n + i];
    ++count;
  }
  return count ? acc / double(count) : std::nan("");
}

// Pixel (y, x) of channel c.
double at(const TensorD& t, std::size_t c, std::size_t y, std::size_t x) {
  return t[(c * t.dim(1) + y) * t.dim(2) + x];
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  f << bytes;
}

}  // namespace

TEST(Synth, ThousandSamplesSatisfyInvariantsAndDarkenShadows) {
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    SynthConfig cfg;
    cfg.seed = seed;
    cfg.height = 24 + seed % 3 * 8;
    cfg.width = 32;
    for (std::uint64_t idx = 0; idx < 25; ++idx) {
      const auto s = generate_sample<double>(cfg, idx * 977 + seed);
      ASSERT_NO_THROW(s.validate()) << s.name;
      const double in = luminance_mean(s, 1.0), out = luminance_mean(s, 0.0);
      if (!std::isnan(in) && !std::isnan(out)) {
        EXPECT_LT(in, out) << s.name;
      }
      ++checked;
    }
  }
  EXPECT_EQ(checked, 1000u);
}

TEST(Synth, DeterministicAndSeedDependent) {
  SynthConfig cfg;
  const auto a = generate_sample<double>(cfg, 5), b = generate_sample<double>(cfg, 5), c = generate_sample<double>(cfg, 6);
  EXPECT_EQ(a.shadow.vec(), b.shadow.vec());
  EXPECT_EQ(a.mask.vec(), b.mask.vec());
  EXPECT_EQ(a.gt.vec(), b.gt.vec());
  EXPECT_NE(a.gt.vec(), c.gt.vec());
  EXPECT_EQ(a.name, "synth_000005");
  cfg.seed = 1;
  EXPECT_NE(generate_sample<double>(cfg, 5).gt.vec(), a.gt.vec());
}

TEST(Synth, NullShadowLeavesImageUnchanged) {
  SynthConfig cfg;
  cfg.penumbra = 0;
  cfg.gamma_min = cfg.gamma_max = 1.0;
  cfg.beta_min = cfg.beta_max = 0.0;
  const auto s = generate_sample<double>(cfg, 3);
  EXPECT_EQ(s.shadow.vec(), s.gt.vec());
  double area = 0;
  for (double m : s.mask.vec()) area += m;
  EXPECT_GT(area, 0.0);
}

TEST(Synth, HardHalfGainShadow) {
  SynthConfig cfg;
  cfg.penumbra = 0;
  cfg.gamma_min = cfg.gamma_max = 0.5;
  cfg.beta_min = cfg.beta_max = 0.0;
  ShadowDraw draw;
  const auto s = generate_sample<double>(cfg, 4, &draw);
  const std::size_t n = s.height() * s.width();
  std::size_t inside = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double expect = s.mask[i] == 1.0 ? s.gt[c * n + i] / 2 : s.gt[c * n + i];
      EXPECT_EQ(s.shadow[c * n + i], expect);
    }
    inside += s.mask[i] == 1.0;
  }
  EXPECT_GT(inside, 0u);
  for (double g : draw.gamma) EXPECT_EQ(g, 0.5);
}

TEST(Synth, TextureFamiliesAndConfigChecks) {
  for (unsigned fam : {1u, 2u, 4u}) {
    SynthConfig cfg;
    cfg.textures = fam;
    EXPECT_NO_THROW(generate_sample<double>(cfg, 0).validate());
  }
  SynthConfig bad;
  bad.textures = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = SynthConfig{};
  bad.gamma_max = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = SynthConfig{};
  bad.penumbra = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = SynthConfig{};
  bad.vertices_min = 10;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Transforms, FlipsAndRotationsMoveTheRightPixels) {
  const auto x = randn({2, 3, 5}, 1);
  const auto h = flip_horizontal(x), v = flip_vertical(x), r = rotate90(x, 1);
  EXPECT_EQ(r.shape(), (Shape{2, 5, 3}));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t xx = 0; xx < 5; ++xx) {
        EXPECT_EQ(at(h, c, y, 4 - xx), at(x, c, y, xx));
        EXPECT_EQ(at(v, c, 2 - y, xx), at(x, c, y, xx));
        // Counter-clockwise: the top-right corner moves to the top-left.
        EXPECT_EQ(at(r, c, 4 - xx, y), at(x, c, y, xx));
      }
  EXPECT_EQ(flip_horizontal(h).vec(), x.vec());
  EXPECT_EQ(flip_vertical(v).vec(), x.vec());
  EXPECT_EQ(rotate90(rotate90(x, 3), 1).vec(), x.vec());
  EXPECT_EQ(rotate90(x, 2).vec(), flip_vertical(flip_horizontal(x)).vec());
  EXPECT_EQ(rotate90(x, 4).vec(), x.vec());
}

TEST(Augment, DisabledIsIdentityAndTripleStaysAligned) {
  const auto s = generate_sample<double>(SynthConfig{}, 7);
  Rng rng(1);
  const auto same = augment(s, rng, {0, 0, 0});
  EXPECT_EQ(same.shadow.vec(), s.shadow.vec());
  EXPECT_EQ(same.mask.vec(), s.mask.vec());
  EXPECT_EQ(same.gt.vec(), s.gt.vec());
  // Every augmented triple equals one shared geometric transform of the input.
  std::vector<std::function<TensorD(const TensorD&)>> group;
  for (int k = 0; k < 4; ++k) {
    group.push_back([k](const TensorD& t) { return rotate90(t, k); });
    group.push_back([k](const TensorD& t) { return rotate90(flip_horizontal(t), k); });
  }
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = augment(s, rng);
    bool matched = false;
    for (const auto& g : group)
      if (g(s.shadow).vec() == a.shadow.vec() && g(s.shadow).shape() == a.shadow.shape()) {
        EXPECT_EQ(g(s.mask).vec(), a.mask.vec());
        EXPECT_EQ(g(s.gt).vec(), a.gt.vec());
        matched = true;
        break;
      }
    EXPECT_TRUE(matched);
  }
}

TEST(Augment, SeededReproducibility) {
  const auto s = generate_sample<double>(SynthConfig{}, 8);
  AugmentOptions opt;
  opt.hsv = true;
  Rng a(5), b(5);
  for (int i = 0; i < 10; ++i) {
    const auto x = augment(s, a, opt), y = augment(s, b, opt);
    EXPECT_EQ(x.shadow.vec(), y.shadow.vec());
    EXPECT_EQ(x.gt.vec(), y.gt.vec());
    EXPECT_NO_THROW(x.validate());
  }
}

TEST(Augment, HsvJitterIsSharedAndBounded) {
  const auto s = generate_sample<double>(SynthConfig{}, 9);
  AugmentOptions opt{0, 0, 0};
  opt.hsv = true;
  Rng rng(6);
  const auto a = augment(s, rng, opt);
  EXPECT_EQ(a.mask.vec(), s.mask.vec());
  EXPECT_NE(a.gt.vec(), s.gt.vec());
  // Value (max channel) is untouched by hue and saturation changes.
  const std::size_t n = s.height() * s.width();
  for (std::size_t i = 0; i < n; ++i) {
    const double v0 = std::max({s.gt[i], s.gt[n + i], s.gt[2 * n + i]});
    const double v1 = std::max({a.gt[i], a.gt[n + i], a.gt[2 * n + i]});
    EXPECT_NEAR(v0, v1, 1e-12);
  }
}

TEST(Augment, MixupBlendsWithUnionMask) {
  const auto a = generate_sample<double>(SynthConfig{}, 10), b = generate_sample<double>(SynthConfig{}, 11);
  Rng rng(7);
  const auto m = mixup(a, b, rng);
  Rng replay(7);
  const double lam = replay.uniform();
  for (std::size_t i = 0; i < a.gt.numel(); ++i) EXPECT_NEAR(m.gt[i], lam * a.gt[i] + (1 - lam) * b.gt[i], 1e-15);
  for (std::size_t i = 0; i < a.mask.numel(); ++i) EXPECT_EQ(m.mask[i], std::max(a.mask[i], b.mask[i]));
  EXPECT_NO_THROW(m.validate());
}

TEST(RandomCrop, WindowsAgreeAcrossTheTriple) {
  SynthConfig cfg;
  cfg.height = cfg.width = 128;
  const auto s = generate_sample<double>(cfg, 12);
  Rng rng(8);
  const auto c = random_crop(s, 64, 64, rng);
  EXPECT_EQ(c.shadow.shape(), (Shape{3, 64, 64}));
  EXPECT_EQ(c.mask.shape(), (Shape{1, 64, 64}));
  // Locate the window through the shadow image, then check mask and gt.
  bool found = false;
  for (std::size_t top = 0; top <= 64 && !found; ++top)
    for (std::size_t left = 0; left <= 64 && !found; ++left)
      if (crop(s.shadow, top, left, 64, 64).vec() == c.shadow.vec()) {
        EXPECT_EQ(crop(s.mask, top, left, 64, 64).vec(), c.mask.vec());
        EXPECT_EQ(crop(s.gt, top, left, 64, 64).vec(), c.gt.vec());
        found = true;
      }
  EXPECT_TRUE(found);
  const auto full = random_crop(s, 128, 128, rng);
  EXPECT_EQ(full.gt.vec(), s.gt.vec());
  Rng r1(9), r2(9);
  EXPECT_EQ(random_crop(s, 32, 48, r1).gt.vec(), random_crop(s, 32, 48, r2).gt.vec());
  EXPECT_THROW(random_crop(s, 129, 64, rng), DimensionError);
}

TEST(ImageIo, PngRoundTripWithinQuantizationBound) {
  TempDir dir("png");
  const auto img = uniform({3, 17, 23}, 13);
  for (const char* ext : {".png", ".ppm"}) {
    const auto path = dir / (std::string("a") + ext);
    save_image(img, path);
    EXPECT_LE(max_abs_diff(load_image<double>(path, 3), img), 1.0 / 510 + 1e-12) << ext;
  }
  const auto grey = uniform({1, 9, 4}, 14);
  for (const char* ext : {".png", ".pgm"}) {
    const auto path = dir / (std::string("g") + ext);
    save_image(grey, path);
    EXPECT_LE(max_abs_diff(load_image<double>(path, 1), grey), 1.0 / 510 + 1e-12) << ext;
  }
}

TEST(ImageIo, RoundHalfUpQuantization) {
  TempDir dir("quant");
  const auto path = dir / "q.pgm";
  save_image(TensorD({1, 1, 3}, {0.5 / 255, 1.49 / 255, 2.5 / 255}), path);
  const auto back = load_image<double>(path, 1);
  EXPECT_EQ(back[0], 1.0 / 255);
  EXPECT_EQ(back[1], 1.0 / 255);
  EXPECT_EQ(back[2], 3.0 / 255);
}

TEST(ImageIo, BlackPixelAndGreyReplication) {
  TempDir dir("black");
  const auto path = dir / "k.png";
  save_image(TensorD::zeros({1, 1, 1}), path);
  const auto rgb = load_image<double>(path, 3);
  EXPECT_EQ(rgb.shape(), (Shape{3, 1, 1}));
  for (double v : rgb.vec()) EXPECT_EQ(v, 0.0);
}

TEST(ImageIo, DistinctErrors) {
  TempDir dir("err");
  EXPECT_THROW(load_image<double>(dir / "missing.png"), FileNotFoundError);
  write_bytes(dir / "bad.png", "GIF89a-not-an-image");
  try {
    load_image<double>(dir / "bad.png");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.png"), std::string::npos);
  }
  write_bytes(dir / "deep.pgm", std::string("P5\n1 1\n65535\n") + std::string(2, '\0'));
  EXPECT_THROW(load_image<double>(dir / "deep.pgm", 1), UnsupportedFormatError);
  write_bytes(dir / "short.ppm", "P6\n4 4\n255\nabc");
  EXPECT_THROW(load_image<double>(dir / "short.ppm"), FormatError);
  EXPECT_THROW(save_image(TensorD::zeros({3, 2, 2}), dir / "x.bmp"), UnsupportedFormatError);
}

TEST(Dataset, WriteListLoadRoundTrip) {
  TempDir dir("ds");
  SynthConfig cfg;
  cfg.height = cfg.width = 32;
  const auto samples = synth_dataset<double>(cfg, 3, 10);
  for (const auto& s : samples) write_sample(dir.str(), s);
  EXPECT_EQ(list_dataset(dir.str()), (std::vector<std::string>{"synth_000010", "synth_000011", "synth_000012"}));
  const auto loaded = load_dataset<double>(dir.str());
  ASSERT_EQ(loaded.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded[i].mask.vec(), samples[i].mask.vec());
    EXPECT_LE(max_abs_diff(loaded[i].gt, samples[i].gt), 1.0 / 510 + 1e-12);
  }
  std::filesystem::remove(std::filesystem::path(dir.str()) / "gt" / "synth_000011.png");
  EXPECT_THROW(load_sample<double>(dir.str(), "synth_000011"), FileNotFoundError);
  EXPECT_THROW(list_dataset(dir / "nowhere"), FileNotFoundError);
}

TEST(Dataset, SampleValidationCatchesInconsistency) {
  auto s = generate_sample<double>(SynthConfig{}, 1);
  s.mask = TensorD::full({1, 64, 64}, 0.5);
  EXPECT_THROW(s.validate(), ContractError);
  s.mask = TensorD::zeros({1, 32, 64});
  EXPECT_THROW(s.validate(), DimensionError);
}
