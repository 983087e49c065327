// SPDX-License-Identifier: Apache-2.0
//
// Image-quality metrics for restored images: PSNR and SSIM in RGB, and
// RMSE / MAE in CIELAB (D65). Every metric accepts an optional binary mask
// [1 x H x W] that restricts it to the selected pixels. Metrics are
// computed in double precision regardless of the tensor type.
#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rasm/tensor.hpp"

namespace rasm {

namespace detail {

inline constexpr double kXyzFromRgb[3][3] = {
    {0.412453, 0.357580, 0.180423},
    {0.212671, 0.715160, 0.072169},
    {0.019334, 0.119193, 0.950227},
};
inline constexpr double kWhiteD65[3] = {0.95047, 1.0, 1.08883};

inline double clip01(double v) { return v < 0 ? 0 : (v > 1 ? 1 : v); }

inline double srgb_to_linear(double c) { return c > 0.04045 ? std::pow((c + 0.055) / 1.055, 2.4) : c / 12.92; }
inline double linear_to_srgb(double c) { return c > 0.0031308 ? 1.055 * std::pow(c, 1.0 / 2.4) - 0.055 : 12.92 * c; }

inline double lab_f(double t) { return t > 0.008856 ? std::cbrt(t) : 7.787 * t + 16.0 / 116.0; }
inline double lab_f_inv(double f) { return f > 0.2068966 ? f * f * f : (f - 16.0 / 116.0) / 7.787; }

inline std::array<double, 3> rgb_to_lab_pixel(double r, double g, double b) {
  const double lin[3] = {srgb_to_linear(clip01(r)), srgb_to_linear(clip01(g)), srgb_to_linear(clip01(b))};
  double f[3];
  for (int i = 0; i < 3; ++i) {
    const double xyz = kXyzFromRgb[i][0] * lin[0] + kXyzFromRgb[i][1] * lin[1] + kXyzFromRgb[i][2] * lin[2];
    f[i] = lab_f(xyz / kWhiteD65[i]);
  }
  return {116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])};
}

inline const Eigen::Matrix3d& rgb_from_xyz() {
  static const Eigen::Matrix3d inv = [] {
    Eigen::Matrix3d m;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m(i, j) = kXyzFromRgb[i][j];
    return Eigen::Matrix3d(m.inverse());
  }();
  return inv;
}

inline std::array<double, 3> lab_to_rgb_pixel(double L, double a, double b) {
  const double fy = (L + 16.0) / 116.0;
  const Eigen::Vector3d xyz(lab_f_inv(fy + a / 500.0) * kWhiteD65[0], lab_f_inv(fy) * kWhiteD65[1],
                            lab_f_inv(fy - b / 200.0) * kWhiteD65[2]);
  const Eigen::Vector3d lin = rgb_from_xyz() * xyz;
  return {linear_to_srgb(lin[0]), linear_to_srgb(lin[1]), linear_to_srgb(lin[2])};
}

template <typename T>
void require_image(const Tensor<T>& x, const char* op) {
  if (x.rank() != 3 || x.dim(0) != 3) throw DimensionError(std::string(op) + ": expected [3xHxW], got " + shape_str(x.shape()));
}

template <typename T>
void require_pair(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require_image(a, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

/// Per-pixel selection flags from an optional mask (nonzero = selected).
template <typename T>
std::vector<char> selection(const Tensor<T>& image, const std::optional<Tensor<T>>& mask, const char* op) {
  const std::size_t n = image.dim(1) * image.dim(2);
  std::vector<char> sel(n, 1);
  if (mask) {
    if (mask->rank() != 3 || mask->dim(0) != 1 || mask->dim(1) != image.dim(1) || mask->dim(2) != image.dim(2)) {
      throw DimensionError(std::string(op) + ": mask " + shape_str(mask->shape()) + " does not match image " +
                           shape_str(image.shape()));
    }
    for (std::size_t i = 0; i < n; ++i) sel[i] = mask->data()[i] != T(0);
  }
  return sel;
}

inline std::size_t count_selected(const std::vector<char>& sel, const char* op) {
  std::size_t n = 0;
  for (char s : sel) n += s != 0;
  if (!n) throw EvaluationError(std::string(op) + ": mask selects no pixels");
  return n;
}

/// 1-D Gaussian taps for sigma 1.5 truncated at radius 5 (11 taps).
inline const std::array<double, 11>& ssim_taps() {
  static const std::array<double, 11> taps = [] {
    std::array<double, 11> t{};
    double total = 0;
    for (int i = 0; i < 11; ++i) total += t[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
    for (auto& v : t) v /= total;
    return t;
  }();
  return taps;
}

/// Gaussian-filtered plane restricted to the windows that fit entirely in
/// the image: output is (H-10) x (W-10), entry (i, j) centred at (i+5, j+5).
inline std::vector<double> ssim_filter(const std::vector<double>& x, std::size_t H, std::size_t W) {
  const auto& k = ssim_taps();
  const std::size_t oh = H - 10, ow = W - 10;
  std::vector<double> rows(H * ow);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0;
      for (std::size_t t = 0; t < 11; ++t) acc += k[t] * x[y * W + j + t];
      rows[y * ow + j] = acc;
    }
  std::vector<double> out(oh * ow);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0;
      for (std::size_t t = 0; t < 11; ++t) acc += k[t] * rows[(i + t) * ow + j];
      out[i * ow + j] = acc;
    }
  return out;
}

}  // namespace detail

inline constexpr double kPsnrCap = 100.0;
inline constexpr std::size_t kSsimWindow = 11;

/// sRGB [3 x H x W] (clipped to [0,1]) to CIELAB under D65.
template <typename T>
Tensor<T> srgb_to_lab(const Tensor<T>& img) {
  detail::require_image(img, "srgb_to_lab");
  const std::size_t n = img.dim(1) * img.dim(2);
  const T* d = img.data().data();
  std::vector<T> out(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto lab = detail::rgb_to_lab_pixel(d[i], d[n + i], d[2 * n + i]);
    for (std::size_t c = 0; c < 3; ++c) out[c * n + i] = T(lab[c]);
  }
  return Tensor<T>(img.shape(), std::move(out));
}

/// Inverse of srgb_to_lab (no clipping of the result).
template <typename T>
Tensor<T> lab_to_srgb(const Tensor<T>& lab) {
  detail::require_image(lab, "lab_to_srgb");
  const std::size_t n = lab.dim(1) * lab.dim(2);
  const T* d = lab.data().data();
  std::vector<T> out(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto rgb = detail::lab_to_rgb_pixel(d[i], d[n + i], d[2 * n + i]);
    for (std::size_t c = 0; c < 3; ++c) out[c * n + i] = T(rgb[c]);
  }
  return Tensor<T>(lab.shape(), std::move(out));
}

/// Mean squared error over the selected pixels and all channels, after
/// clipping both images to [0,1].
template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b, const std::optional<Tensor<T>>& mask = std::nullopt) {
  detail::require_pair(a, b, "mse");
  const auto sel = detail::selection(a, mask, "mse");
  const std::size_t count = detail::count_selected(sel, "mse");
  const std::size_t n = sel.size();
  double acc = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i)
      if (sel[i]) {
        const double d = detail::clip01(a.data()[c * n + i]) - detail::clip01(b.data()[c * n + i]);
        acc += d * d;
      }
  return acc / double(3 * count);
}

inline double psnr_from_mse(double m) { return m < 1e-10 ? kPsnrCap : 10.0 * std::log10(1.0 / m); }

/// 10 log10(1 / MSE) in dB, capped at 100 dB.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, const std::optional<Tensor<T>>& mask = std::nullopt) {
  return psnr_from_mse(mse(a, b, mask));
}

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, range 1)
/// averaged over channels. Only windows lying fully inside the image are
/// used; with a mask, only windows whose centre pixel is selected.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const std::optional<Tensor<T>>& mask = std::nullopt) {
  detail::require_pair(a, b, "ssim");
  const std::size_t H = a.dim(1), W = a.dim(2), n = H * W;
  if (H < kSsimWindow || W < kSsimWindow) {
    throw DimensionError("ssim: image " + shape_str(a.shape()) + " is smaller than the 11x11 window");
  }
  const auto sel = detail::selection(a, mask, "ssim");
  const std::size_t oh = H - 10, ow = W - 10;
  std::vector<char> centre(oh * ow);
  std::size_t count = 0;
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) count += centre[i * ow + j] = sel[(i + 5) * W + j + 5];
  if (!count) throw EvaluationError("ssim: mask selects no window centres");

  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double total = 0;
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = detail::clip01(a.data()[c * n + i]);
      y[i] = detail::clip01(b.data()[c * n + i]);
      xx[i] = x[i] * x[i], yy[i] = y[i] * y[i], xy[i] = x[i] * y[i];
    }
    const auto mx = detail::ssim_filter(x, H, W), my = detail::ssim_filter(y, H, W);
    const auto mxx = detail::ssim_filter(xx, H, W), myy = detail::ssim_filter(yy, H, W);
    const auto mxy = detail::ssim_filter(xy, H, W);
    double acc = 0;
    for (std::size_t i = 0; i < oh * ow; ++i) {
      if (!centre[i]) continue;
      const double vx = mxx[i] - mx[i] * mx[i], vy = myy[i] - my[i] * my[i], cxy = mxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + C1) * (2 * cxy + C2)) / ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
    }
    total += acc / double(count);
  }
  return total / 3.0;
}

namespace detail {

template <typename T, typename F>
double lab_mean(const Tensor<T>& a, const Tensor<T>& b, const std::optional<Tensor<T>>& mask, const char* op, F f) {
  require_pair(a, b, op);
  const auto sel = selection(a, mask, op);
  const std::size_t count = count_selected(sel, op);
  const auto la = srgb_to_lab(a), lb = srgb_to_lab(b);
  const std::size_t n = sel.size();
  double acc = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i)
      if (sel[i]) acc += f(double(la.data()[c * n + i]) - double(lb.data()[c * n + i]));
  return acc / double(3 * count);
}

}  // namespace detail

/// Root-mean-square difference over selected pixels and the three Lab
/// channels.
template <typename T>
double rmse_lab(const Tensor<T>& a, const Tensor<T>& b, const std::optional<Tensor<T>>& mask = std::nullopt) {
  return std::sqrt(detail::lab_mean(a, b, mask, "rmse_lab", [](double d) { return d * d; }));
}

/// Mean absolute difference over selected pixels and the three Lab
/// channels (the quantity commonly reported as "RMSE" in shadow removal).
template <typename T>
double mae_lab(const Tensor<T>& a, const Tensor<T>& b, const std::optional<Tensor<T>>& mask = std::nullopt) {
  return detail::lab_mean(a, b, mask, "mae_lab", [](double d) { return std::abs(d); });
}

/// Complement of a binary mask.
template <typename T>
Tensor<T> invert_mask(const Tensor<T>& mask) {
  std::vector<T> out(mask.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask.data()[i] != T(0) ? T(0) : T(1);
  return Tensor<T>(mask.shape(), std::move(out));
}

/// Metrics of one image over the shadow (s), non-shadow (ns) and whole
/// (all) regions.
struct MetricRecord {
  std::string name;
  double psnr_s = 0, psnr_ns = 0, psnr_all = 0;
  double ssim_s = 0, ssim_ns = 0, ssim_all = 0;
  double rmse_lab_s = 0, rmse_lab_ns = 0, rmse_lab_all = 0;
  double mae_lab_s = 0, mae_lab_ns = 0, mae_lab_all = 0;

  static constexpr const char* kHeader =
      "name,psnr_s,psnr_ns,psnr_all,ssim_s,ssim_ns,ssim_all,rmse_lab_s,rmse_lab_ns,rmse_lab_all,mae_lab_s,mae_lab_"
      "ns,mae_lab_all";

  std::array<double, 12> values() const {
    return {psnr_s,     psnr_ns,     psnr_all,     ssim_s,    ssim_ns,    ssim_all,
            rmse_lab_s, rmse_lab_ns, rmse_lab_all, mae_lab_s, mae_lab_ns, mae_lab_all};
  }
};

/// Region metrics of a prediction against ground truth. A region that
/// the mask leaves empty raises EvaluationError.
template <typename T>
MetricRecord evaluate_pair(const std::string& name, const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
  const std::optional<Tensor<T>> s(mask), ns(invert_mask(mask)), all;
  MetricRecord r;
  r.name = name;
  r.psnr_s = psnr(pred, gt, s), r.psnr_ns = psnr(pred, gt, ns), r.psnr_all = psnr(pred, gt, all);
  r.ssim_s = ssim(pred, gt, s), r.ssim_ns = ssim(pred, gt, ns), r.ssim_all = ssim(pred, gt, all);
  r.rmse_lab_s = rmse_lab(pred, gt, s), r.rmse_lab_ns = rmse_lab(pred, gt, ns), r.rmse_lab_all = rmse_lab(pred, gt, all);
  r.mae_lab_s = mae_lab(pred, gt, s), r.mae_lab_ns = mae_lab(pred, gt, ns), r.mae_lab_all = mae_lab(pred, gt, all);
  return r;
}

/// Field-wise mean of records, named "mean".
inline MetricRecord mean_record(const std::vector<MetricRecord>& rows) {
  if (rows.empty()) throw EvaluationError("mean_record: no records");
  std::array<double, 12> acc{};
  for (const auto& r : rows) {
    const auto v = r.values();
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
  }
  for (auto& v : acc) v /= double(rows.size());
  return {"mean", acc[0], acc[1], acc[2], acc[3], acc[4], acc[5], acc[6], acc[7], acc[8], acc[9], acc[10], acc[11]};
}

/// CSV text: header, one line per record, then the mean row.
inline std::string format_metrics_csv(const std::vector<MetricRecord>& rows) {
  std::string out = std::string(MetricRecord::kHeader) + "\n";
  auto emit = [&out](const MetricRecord& r) {
    out += r.name;
    char buf[32];
    for (double v : r.values()) {
      std::snprintf(buf, sizeof buf, ",%.10g", v);
      out += buf;
    }
    out += '\n';
  };
  for (const auto& r : rows) emit(r);
  if (!rows.empty()) emit(mean_record(rows));
  return out;
}

}  // namespace rasm
