// SPDX-License-Identifier: Apache-2.0
//
// Shadow/mask/ground-truth triples: procedural synthesis, geometric and
// photometric augmentation, random crops, and the on-disk layout
// root/{shadow,mask,gt}/NAME.png.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "rasm/image_io.hpp"
#include "rasm/rng.hpp"

namespace rasm {

template <typename T>
struct ShadowSample {
  Tensor<T> shadow;  // [3 x H x W]
  Tensor<T> mask;    // [1 x H x W], values in {0, 1}
  Tensor<T> gt;      // [3 x H x W]
  std::string name;

  std::size_t height() const { return shadow.dim(1); }
  std::size_t width() const { return shadow.dim(2); }

  /// Throws DimensionError / ContractError when the triple is inconsistent.
  void validate() const {
    if (shadow.rank() != 3 || shadow.dim(0) != 3) throw DimensionError(name + ": shadow must be [3xHxW], got " + shape_str(shadow.shape()));
    if (gt.shape() != shadow.shape()) throw DimensionError(name + ": gt " + shape_str(gt.shape()) + " vs shadow " + shape_str(shadow.shape()));
    if (mask.shape() != Shape{1, shadow.dim(1), shadow.dim(2)}) {
      throw DimensionError(name + ": mask " + shape_str(mask.shape()) + " vs shadow " + shape_str(shadow.shape()));
    }
    for (T v : mask.vec())
      if (v != T(0) && v != T(1)) throw ContractError(name + ": mask is not binary");
    for (const auto* t : {&shadow, &gt})
      for (T v : t->vec())
        if (!(v >= T(0) && v <= T(1))) throw ContractError(name + ": image value outside [0,1]");
  }
};

enum class TextureFamily { gradient = 1, checker = 2, noise = 4 };

/// Parameters of the procedural shadow generator. Gains and offsets are
/// drawn uniformly from [min, max]; equal bounds fix the value.
struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  unsigned textures = 7;  // bitwise OR of TextureFamily values
  std::size_t vertices_min = 5;
  std::size_t vertices_max = 9;
  double gamma_min = 0.2;  // per-channel gain inside the shadow
  double gamma_max = 0.7;
  double beta_min = 0.0;  // ambient offset subtracted inside the shadow
  double beta_max = 0.05;
  double penumbra = 3.0;  // soft-edge width in pixels

  void validate() const {
    if (height == 0 || width == 0) throw ConfigError("synth.height and synth.width must be positive");
    if (!(textures & 7u) || (textures & ~7u)) throw ConfigError("synth.textures must be a nonempty subset of 1|2|4");
    if (vertices_min < 3 || vertices_max < vertices_min) throw ConfigError("synth.vertices_min/max must satisfy 3 <= min <= max");
    if (!(gamma_min >= 0 && gamma_min <= gamma_max && gamma_max <= 1)) {
      throw ConfigError("synth.gamma_min/max must satisfy 0 <= min <= max <= 1");
    }
    if (!(beta_min >= 0 && beta_min <= beta_max)) throw ConfigError("synth.beta_min/max must satisfy 0 <= min <= max");
    if (!(penumbra >= 0)) throw ConfigError("synth.penumbra must be >= 0");
  }
};

namespace detail {

using Plane = std::vector<double>;

inline double smoothstep(double t) { return t * t * (3 - 2 * t); }

/// One RGB texture with values in [0.3, 0.95], stored channel-first.
inline std::vector<double> synth_texture(const SynthConfig& cfg, Rng& rng) {
  const std::size_t H = cfg.height, W = cfg.width, n = H * W;
  std::vector<TextureFamily> families;
  for (auto f : {TextureFamily::gradient, TextureFamily::checker, TextureFamily::noise})
    if (cfg.textures & unsigned(f)) families.push_back(f);
  const auto family = families[rng.below(families.size())];

  std::vector<double> img(3 * n);
  auto color = [&rng] { return std::array<double, 3>{rng.uniform(0.3, 0.95), rng.uniform(0.3, 0.95), rng.uniform(0.3, 0.95)}; };
  const auto c0 = color(), c1 = color();
  if (family == TextureFamily::gradient) {
    const double angle = rng.uniform(0, 2 * std::numbers::pi);
    const double dx = std::cos(angle), dy = std::sin(angle);
    const double span = std::abs(dx) * (W - 1) + std::abs(dy) * (H - 1) + 1e-9;
    const double off = std::min(0.0, dx * (W - 1)) + std::min(0.0, dy * (H - 1));
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double t = (dx * double(x) + dy * double(y) - off) / span;
        for (std::size_t c = 0; c < 3; ++c) img[c * n + y * W + x] = c0[c] + (c1[c] - c0[c]) * t;
      }
  } else if (family == TextureFamily::checker) {
    const std::size_t cell = std::size_t(rng.range(4, std::max<long long>(4, (long long)std::min(H, W) / 4)));
    const std::size_t oy = rng.below(cell), ox = rng.below(cell);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const bool odd = (((y + oy) / cell) + ((x + ox) / cell)) % 2;
        for (std::size_t c = 0; c < 3; ++c) img[c * n + y * W + x] = odd ? c1[c] : c0[c];
      }
  } else {
    // Two octaves of smoothly interpolated lattice noise per channel.
    for (std::size_t c = 0; c < 3; ++c) {
      Plane acc(n, 0.0);
      double amp = 1.0, total = 0.0;
      std::size_t cells = 4;
      for (int octave = 0; octave < 2; ++octave, amp *= 0.5, cells *= 2) {
        const std::size_t gh = cells + 1, gw = cells + 1;
        Plane grid(gh * gw);
        for (auto& g : grid) g = rng.uniform();
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const double fy = double(y) / double(std::max<std::size_t>(H - 1, 1)) * cells;
            const double fx = double(x) / double(std::max<std::size_t>(W - 1, 1)) * cells;
            const std::size_t iy = std::min<std::size_t>(std::size_t(fy), cells - 1);
            const std::size_t ix = std::min<std::size_t>(std::size_t(fx), cells - 1);
            const double ty = smoothstep(fy - iy), tx = smoothstep(fx - ix);
            const double top = grid[iy * gw + ix] * (1 - tx) + grid[iy * gw + ix + 1] * tx;
            const double bot = grid[(iy + 1) * gw + ix] * (1 - tx) + grid[(iy + 1) * gw + ix + 1] * tx;
            acc[y * W + x] += amp * (top * (1 - ty) + bot * ty);
          }
        total += amp;
      }
      const double lo = std::min(c0[c], c1[c]), hi = std::max(c0[c], c1[c]) + 0.05;
      for (std::size_t i = 0; i < n; ++i) img[c * n + i] = std::clamp(lo + (hi - lo) * acc[i] / total, 0.3, 0.95);
    }
  }
  return img;
}

/// Star-shaped polygon rasterized with the even-odd rule at pixel centres.
inline Plane synth_polygon(const SynthConfig& cfg, Rng& rng) {
  const std::size_t H = cfg.height, W = cfg.width;
  const std::size_t nv = std::size_t(rng.range((long long)cfg.vertices_min, (long long)cfg.vertices_max));
  const double side = double(std::min(H, W));
  const double cy = rng.uniform(0.35, 0.65) * H, cx = rng.uniform(0.35, 0.65) * W;
  const double radius = rng.uniform(0.2, 0.35) * side;
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  std::vector<std::pair<double, double>> v(nv);  // (y, x)
  for (std::size_t i = 0; i < nv; ++i) {
    const double a = phase + 2 * std::numbers::pi * (double(i) + rng.uniform(-0.3, 0.3)) / double(nv);
    const double r = radius * rng.uniform(0.55, 1.0);
    v[i] = {cy + r * std::sin(a), cx + r * std::cos(a)};
  }
  Plane m(H * W, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double py = y + 0.5, px = x + 0.5;
      bool inside = false;
      for (std::size_t i = 0, j = nv - 1; i < nv; j = i++) {
        const auto [yi, xi] = v[i];
        const auto [yj, xj] = v[j];
        if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
      }
      m[y * W + x] = inside ? 1.0 : 0.0;
    }
  return m;
}

/// Separable Gaussian blur with edge clamping; sigma 0 is the identity.
inline Plane gaussian_blur(const Plane& src, std::size_t H, std::size_t W, double sigma) {
  if (sigma <= 0) return src;
  const int radius = int(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  auto clampi = [](long v, long hi) { return std::clamp<long>(v, 0, hi); };
  Plane tmp(H * W), out(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * src[y * W + clampi(long(x) + i, long(W) - 1)];
      tmp[y * W + x] = acc;
    }
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[clampi(long(y) + i, long(H) - 1) * W + x];
      out[y * W + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Soft matte m in [0,1] and illumination draw behind one sample.
struct ShadowDraw {
  std::vector<double> matte;
  std::array<double, 3> gamma{};
  double beta = 0;
};

/// Sample `index` of the synthetic set; a pure function of (cfg, index).
/// shadow = clip(gt * (g + (1 - g)(1 - m)) - b * m), mask = [m > 0.5].
template <typename T>
ShadowSample<T> generate_sample(const SynthConfig& cfg, std::uint64_t index, ShadowDraw* draw = nullptr) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, {index}));
  const std::size_t H = cfg.height, W = cfg.width, n = H * W;
  const auto tex = detail::synth_texture(cfg, rng);
  auto matte = detail::gaussian_blur(detail::synth_polygon(cfg, rng), H, W, cfg.penumbra / 2);
  std::array<double, 3> gamma;
  for (auto& g : gamma) g = rng.uniform(cfg.gamma_min, cfg.gamma_max);
  const double beta = rng.uniform(cfg.beta_min, cfg.beta_max);

  std::vector<T> gt(3 * n), shadow(3 * n), mask(n);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      gt[c * n + i] = T(tex[c * n + i]);
      const double m = matte[i];
      const double v = double(gt[c * n + i]) * (gamma[c] + (1 - gamma[c]) * (1 - m)) - beta * m;
      shadow[c * n + i] = T(std::clamp(v, 0.0, 1.0));
    }
  for (std::size_t i = 0; i < n; ++i) mask[i] = matte[i] > 0.5 ? T(1) : T(0);
  if (draw) *draw = {std::move(matte), gamma, beta};
  char name[32];
  std::snprintf(name, sizeof name, "synth_%06llu", (unsigned long long)index);
  return {Tensor<T>({3, H, W}, std::move(shadow)), Tensor<T>({1, H, W}, std::move(mask)), Tensor<T>({3, H, W}, std::move(gt)),
          name};
}

// ---------------------------------------------------------------------------
// Geometric transforms of [C x H x W] tensors.

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& x) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<T> out(x.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t i = 0; i < W; ++i) out[(c * H + y) * W + i] = x.data()[(c * H + y) * W + (W - 1 - i)];
  return Tensor<T>(x.shape(), std::move(out));
}

template <typename T>
Tensor<T> flip_vertical(const Tensor<T>& x) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<T> out(x.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      std::copy_n(x.data().data() + (c * H + (H - 1 - y)) * W, W, out.begin() + (c * H + y) * W);
  return Tensor<T>(x.shape(), std::move(out));
}

/// Counter-clockwise rotation by k quarter turns.
template <typename T>
Tensor<T> rotate90(const Tensor<T>& x, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return x.detach();
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t oh = k == 2 ? H : W, ow = k == 2 ? W : H;
  std::vector<T> out(x.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t i = 0; i < ow; ++i) {
        std::size_t sy, sx;
        if (k == 1) sy = i, sx = W - 1 - y;
        else if (k == 2) sy = H - 1 - y, sx = W - 1 - i;
        else sy = H - 1 - i, sx = y;
        out[(c * oh + y) * ow + i] = x.data()[(c * H + sy) * W + sx];
      }
  return Tensor<T>({C, oh, ow}, std::move(out));
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (top + h > H || left + w > W) {
    throw DimensionError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(top) + "," +
                         std::to_string(left) + ") exceeds " + shape_str(x.shape()));
  }
  std::vector<T> out(C * h * w);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(x.data().data() + (c * H + top + y) * W + left, w, out.begin() + (c * h + y) * w);
  return Tensor<T>({C, h, w}, std::move(out));
}

/// Applies one transform to all three members of a sample.
template <typename T, typename F>
ShadowSample<T> map_sample(const ShadowSample<T>& s, F f) {
  return {f(s.shadow), f(s.mask), f(s.gt), s.name};
}

struct AugmentOptions {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_rotate = 0.5;  // then k in {1,2,3} quarter turns
  bool mixup = false;
  bool hsv = false;
  double hue_shift = 0.05;
  double sat_min = 0.8, sat_max = 1.2;
};

/// Blend of two equally sized samples with lambda ~ U(0,1) (= Beta(1,1)).
/// The mask is the union of both masks.
template <typename T>
ShadowSample<T> mixup(const ShadowSample<T>& a, const ShadowSample<T>& b, Rng& rng) {
  if (a.shadow.shape() != b.shadow.shape()) {
    throw DimensionError("mixup: " + shape_str(a.shadow.shape()) + " vs " + shape_str(b.shadow.shape()));
  }
  const T lam = T(rng.uniform());
  auto blend = [lam](const Tensor<T>& x, const Tensor<T>& y) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = lam * x.data()[i] + (T(1) - lam) * y.data()[i];
    return Tensor<T>(x.shape(), std::move(out));
  };
  std::vector<T> m(a.mask.numel());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::max(a.mask.data()[i], b.mask.data()[i]);
  return {blend(a.shadow, b.shadow), Tensor<T>(a.mask.shape(), std::move(m)), blend(a.gt, b.gt), a.name};
}

namespace detail {

inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  double h = 0;
  if (d > 0) {
    if (mx == r) h = std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = (b - r) / d + 2;
    else h = (r - g) / d + 4;
    h /= 6;
    if (h < 0) h += 1;
  }
  return {h, mx > 0 ? d / mx : 0, mx};
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6;
  const int i = int(hh) % 6;
  const double f = hh - std::floor(hh), p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

template <typename T>
Tensor<T> hsv_adjust(const Tensor<T>& x, double dh, double sat) {
  const std::size_t n = x.dim(1) * x.dim(2);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < n; ++i) {
    auto hsv = rgb_to_hsv(x.data()[i], x.data()[n + i], x.data()[2 * n + i]);
    double h = hsv[0] + dh;
    h -= std::floor(h);
    const auto rgb = hsv_to_rgb(h, std::clamp(hsv[1] * sat, 0.0, 1.0), hsv[2]);
    for (std::size_t c = 0; c < 3; ++c) out[c * n + i] = T(std::clamp(rgb[c], 0.0, 1.0));
  }
  return Tensor<T>(x.shape(), std::move(out));
}

}  // namespace detail

/// Random flips and quarter turns (each with its own probability) applied
/// identically to shadow, mask and gt; then, when enabled, hue/saturation
/// jitter shared by shadow and gt. MixUp needs a partner sample and is
/// applied by the caller through mixup().
template <typename T>
ShadowSample<T> augment(const ShadowSample<T>& s, Rng& rng, const AugmentOptions& opt = {}) {
  ShadowSample<T> out = map_sample(s, [](const Tensor<T>& t) { return t.detach(); });
  if (rng.bernoulli(opt.p_hflip)) out = map_sample(out, [](const Tensor<T>& t) { return flip_horizontal(t); });
  if (rng.bernoulli(opt.p_vflip)) out = map_sample(out, [](const Tensor<T>& t) { return flip_vertical(t); });
  if (rng.bernoulli(opt.p_rotate)) {
    const int k = int(rng.range(1, 3));
    out = map_sample(out, [k](const Tensor<T>& t) { return rotate90(t, k); });
  }
  if (opt.hsv) {
    const double dh = rng.uniform(-opt.hue_shift, opt.hue_shift);
    const double sat = rng.uniform(opt.sat_min, opt.sat_max);
    out.shadow = detail::hsv_adjust(out.shadow, dh, sat);
    out.gt = detail::hsv_adjust(out.gt, dh, sat);
  }
  return out;
}

/// Uniformly placed h x w window cut from all three members.
template <typename T>
ShadowSample<T> random_crop(const ShadowSample<T>& s, std::size_t h, std::size_t w, Rng& rng) {
  if (h == 0 || w == 0 || h > s.height() || w > s.width()) {
    throw DimensionError("random_crop: " + std::to_string(h) + "x" + std::to_string(w) + " does not fit " +
                         shape_str(s.shadow.shape()));
  }
  const std::size_t top = rng.below(s.height() - h + 1), left = rng.below(s.width() - w + 1);
  return map_sample(s, [&](const Tensor<T>& t) { return crop(t, top, left, h, w); });
}

// ---------------------------------------------------------------------------
// Dataset directories.

inline constexpr const char* kShadowDir = "shadow";
inline constexpr const char* kMaskDir = "mask";
inline constexpr const char* kGtDir = "gt";

/// Sample names (file stems under root/shadow), sorted.
inline std::vector<std::string> list_dataset(const std::string& root) {
  const auto dir = std::filesystem::path(root) / kShadowDir;
  if (!std::filesystem::is_directory(dir)) throw FileNotFoundError("dataset directory not found: " + dir.string());
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".ppm")) names.push_back(e.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

namespace detail {

inline std::string find_member(const std::string& root, const char* sub, const std::string& name) {
  for (const char* ext : {".png", ".ppm", ".pgm"}) {
    const auto p = std::filesystem::path(root) / sub / (name + ext);
    if (std::filesystem::exists(p)) return p.string();
  }
  throw FileNotFoundError("missing " + std::string(sub) + " image for " + name + " under " + root);
}

}  // namespace detail

/// Reads root/{shadow,mask,gt}/name.*; the mask is binarized at 0.5.
template <typename T>
ShadowSample<T> load_sample(const std::string& root, const std::string& name) {
  ShadowSample<T> s;
  s.name = name;
  s.shadow = load_image<T>(detail::find_member(root, kShadowDir, name), 3);
  s.gt = load_image<T>(detail::find_member(root, kGtDir, name), 3);
  auto m = load_image<T>(detail::find_member(root, kMaskDir, name), 1);
  std::vector<T> bin(m.numel());
  for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = m.data()[i] > T(0.5) ? T(1) : T(0);
  s.mask = Tensor<T>(m.shape(), std::move(bin));
  s.validate();
  return s;
}

template <typename T>
void write_sample(const std::string& root, const ShadowSample<T>& s) {
  save_image(s.shadow, (std::filesystem::path(root) / kShadowDir / (s.name + ".png")).string());
  save_image(s.mask, (std::filesystem::path(root) / kMaskDir / (s.name + ".png")).string());
  save_image(s.gt, (std::filesystem::path(root) / kGtDir / (s.name + ".png")).string());
}

template <typename T>
std::vector<ShadowSample<T>> load_dataset(const std::string& root) {
  std::vector<ShadowSample<T>> out;
  for (const auto& name : list_dataset(root)) out.push_back(load_sample<T>(root, name));
  if (out.empty()) throw FileNotFoundError("dataset " + root + " is empty");
  return out;
}

/// Samples first .. first+count-1 of the synthetic set.
template <typename T>
std::vector<ShadowSample<T>> synth_dataset(const SynthConfig& cfg, std::size_t count, std::uint64_t first = 0) {
  std::vector<ShadowSample<T>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample<T>(cfg, first + i));
  return out;
}

}  // namespace rasm
