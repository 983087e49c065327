// SPDX-License-Identifier: Apache-2.0
#include "lcg_pairs.hpp"
#include "rasm/metrics.hpp"
#include "reference_values.hpp"
#include "test_util.hpp"

using namespace rasm;
using namespace rasm_test;

namespace {

using MaskD = std::optional<TensorD>;

TensorD color(double r, double g, double b, std::size_t H = 1, std::size_t W = 1) {
  std::vector<double> v;
  for (double c : {r, g, b}) v.insert(v.end(), H * W, c);
  return TensorD({3, H, W}, v);
}

TensorD half_mask(std::size_t H, std::size_t W) {
  std::vector<double> m(H * W, 0.0);
  for (std::size_t i = 0; i < H * W / 2; ++i) m[i] = 1.0;
  return TensorD({1, H, W}, m);
}

}  // namespace

TEST(Lab, MatchesReferenceImplementation) {
  for (const auto& row : kLabReference) {
    const auto lab = srgb_to_lab(color(row[0], row[1], row[2]));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(lab[c], row[3 + c], 0.05) << row[0] << "," << row[1] << "," << row[2];
  }
}

TEST(Lab, WhiteAndBlack) {
  const auto white = srgb_to_lab(color(1, 1, 1));
  EXPECT_NEAR(white[0], 100.0, 0.01);
  EXPECT_LT(std::abs(white[1]), 0.01);
  EXPECT_LT(std::abs(white[2]), 0.01);
  const auto black = srgb_to_lab(color(0, 0, 0));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(black[c], 0.0, 1e-12);
}

TEST(Lab, RoundTripOnThousandColors) {
  const auto img = uniform({3, 10, 100}, 1);
  const auto back = lab_to_srgb(srgb_to_lab(img));
  EXPECT_LT(max_abs_diff(back, img), 1e-4);
}

TEST(Lab, InputsAreClipped) {
  EXPECT_EQ(srgb_to_lab(color(1.3, -0.2, 0.5)).vec(), srgb_to_lab(color(1.0, 0.0, 0.5)).vec());
}

TEST(Psnr, AnalyticCases) {
  const auto a = uniform({3, 16, 16}, 2, 0.0, 0.9);
  EXPECT_NEAR(psnr(add_scalar(a, 0.1), a), 20.0, 1e-6);
  EXPECT_EQ(psnr(a, a), 100.0);
  EXPECT_EQ(psnr_from_mse(0.0), 100.0);
  EXPECT_NEAR(psnr_from_mse(1e-3), 30.0, 1e-12);
}

TEST(Psnr, MaskedAndRecombination) {
  const auto a = uniform({3, 12, 12}, 3), b = uniform({3, 12, 12}, 4);
  const auto m = half_mask(12, 12);
  const double s = mse(a, b, MaskD(m)), ns = mse(a, b, MaskD(invert_mask(m))), all = mse(a, b);
  EXPECT_NEAR(all, 0.5 * s + 0.5 * ns, 1e-12);
  const auto empty = TensorD::zeros({1, 12, 12});
  EXPECT_THROW(psnr(a, b, MaskD(empty)), EvaluationError);
  EXPECT_THROW(psnr(a, uniform({3, 12, 11}, 5)), DimensionError);
}

TEST(Ssim, IdentityAndSymmetry) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = uniform({3, 20, 24}, 10 + s), b = uniform({3, 20, 24}, 20 + s);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
    EXPECT_NEAR(psnr(a, b), psnr(b, a), 1e-12);
    EXPECT_NEAR(rmse_lab(a, b), rmse_lab(b, a), 1e-12);
    EXPECT_NEAR(mae_lab(a, b), mae_lab(b, a), 1e-12);
    const double v = ssim(a, b);
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Ssim, MatchesReferenceOnTwentyPairs) {
  for (std::size_t i = 0; i < kSsimReference.size(); ++i) {
    const auto [a, b] = lcg_pair(i);
    EXPECT_NEAR(ssim(a, b), kSsimReference[i], 1e-4) << "pair " << i;
  }
}

TEST(Ssim, MaskSelectsWindowCentres) {
  const auto a = uniform({3, 16, 16}, 30), b = uniform({3, 16, 16}, 31);
  const auto all = TensorD::ones({1, 16, 16});
  EXPECT_NEAR(ssim(a, b, MaskD(all)), ssim(a, b), 1e-14);
  // Only one valid window centre selected: equals the mean over channels
  // of that window's SSIM, which is an outlier-free value in [-1, 1].
  std::vector<double> one(256, 0.0);
  one[7 * 16 + 7] = 1.0;
  const double v = ssim(a, b, MaskD(TensorD({1, 16, 16}, one)));
  EXPECT_GE(v, -1.0);
  EXPECT_LE(v, 1.0);
  std::vector<double> edge(256, 0.0);
  edge[0] = 1.0;  // no window is centred on the corner
  EXPECT_THROW(ssim(a, b, MaskD(TensorD({1, 16, 16}, edge))), EvaluationError);
  EXPECT_THROW(ssim(uniform({3, 10, 16}, 1), uniform({3, 10, 16}, 2)), DimensionError);
}

TEST(LabErrors, AnalyticCases) {
  // Gray levels whose L* differ by exactly 1 with a = b = 0 in both.
  const auto ga = lab_to_srgb(TensorD({3, 1, 1}, {50.0, 0.0, 0.0}));
  const auto gb = lab_to_srgb(TensorD({3, 1, 1}, {51.0, 0.0, 0.0}));
  const auto a = color(ga[0], ga[1], ga[2], 4, 4), b = color(gb[0], gb[1], gb[2], 4, 4);
  EXPECT_NEAR(mae_lab(a, b), 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(rmse_lab(a, b), 1.0 / std::sqrt(3.0), 1e-6);
  EXPECT_EQ(mae_lab(a, a), 0.0);
  EXPECT_EQ(rmse_lab(a, a), 0.0);
}

TEST(LabErrors, MatchDirectElementwiseFormula) {
  const auto a = uniform({3, 6, 7}, 40), b = uniform({3, 6, 7}, 41);
  const auto m = half_mask(6, 7);
  const auto la = srgb_to_lab(a), lb = srgb_to_lab(b);
  double sq = 0, ab = 0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < 42; ++p) {
    if (m[p] == 0) continue;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = la[c * 42 + p] - lb[c * 42 + p];
      sq += d * d, ab += std::abs(d), ++n;
    }
  }
  EXPECT_NEAR(rmse_lab(a, b, MaskD(m)), std::sqrt(sq / double(n)), 1e-10);
  EXPECT_NEAR(mae_lab(a, b, MaskD(m)), ab / double(n), 1e-10);
  EXPECT_THROW(mae_lab(a, b, MaskD(TensorD::zeros({1, 6, 7}))), EvaluationError);
}

TEST(MetricRecord, PerfectPredictionAndCsv) {
  const auto gt = uniform({3, 16, 16}, 50);
  const auto m = half_mask(16, 16);
  const auto r = evaluate_pair("x", gt, gt, m);
  EXPECT_EQ(r.psnr_s, 100.0);
  EXPECT_EQ(r.psnr_all, 100.0);
  EXPECT_NEAR(r.ssim_all, 1.0, 1e-12);
  EXPECT_NEAR(r.ssim_s, 1.0, 1e-12);
  EXPECT_EQ(r.rmse_lab_ns, 0.0);
  EXPECT_EQ(r.mae_lab_all, 0.0);

  const auto r2 = evaluate_pair("y", add_scalar(gt, 0.01), gt, m);
  const auto csv = format_metrics_csv({r, r2});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), MetricRecord::kHeader);
  EXPECT_NE(csv.find("\nx,100,100,100,"), std::string::npos);
  EXPECT_NE(csv.find("\nmean,"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const auto mean = mean_record({r, r2});
  EXPECT_NEAR(mean.psnr_all, (r.psnr_all + r2.psnr_all) / 2, 1e-12);
  EXPECT_THROW(mean_record({}), EvaluationError);
}
