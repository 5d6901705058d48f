#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <set>

#include "phanes/evaluation.hpp"
#include "phanes/nn/ops.hpp"
#include "support/metric_oracles.hpp"

using namespace phanes;
using namespace phanes::eval;
using namespace phanes::oracle;

namespace {

ScoreMap as_map(const std::vector<double>& v) { return ScoreMap(1, static_cast<int>(v.size()), v); }
BinaryMask as_mask(const std::vector<std::uint8_t>& v) { return BinaryMask(1, static_cast<int>(v.size()), v); }

class ShiftFeatures final : public perceptual::FeatureExtractor<float> {
 public:
  std::vector<nn::Var<float>> features(const nn::Var<float>& x) const override {
    return {nn::concat<float>({x, nn::neg(x), nn::add_scalar(x, 0.5f)})};
  }
};

}  // namespace

TEST(Auprc, HandExample) {
  std::vector<double> s{.9, .8, .2, .1};
  std::vector<std::uint8_t> y{1, 0, 1, 0};
  EXPECT_NEAR(auprc(s, y), 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(oracle_auprc(s, y), 5.0 / 6.0, 1e-15);
}

TEST(Auprc, PerfectRankingAndErrors) {
  std::vector<double> s{.9, .8, .3, .1, .05};
  EXPECT_DOUBLE_EQ(auprc(s, std::vector<std::uint8_t>{1, 1, 0, 0, 0}), 1.0);
  EXPECT_THROW(auprc(s, std::vector<std::uint8_t>(5, 0)), std::invalid_argument);
  EXPECT_THROW(auprc(s, std::vector<std::uint8_t>(5, 1)), std::invalid_argument);
  try {
    auprc(s, std::vector<std::uint8_t>(5, 0));
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "undefined AUPRC");
  }
}

TEST(CeilingDice, HandExample) {
  std::vector<double> s{.9, .7, .7, .4, .2, .1};
  std::vector<std::uint8_t> y{1, 1, 0, 1, 0, 0};
  EXPECT_NEAR(ceiling_dice(s, y), 6.0 / 7.0, 1e-15);
  EXPECT_NEAR(oracle_dice(s, y), 6.0 / 7.0, 1e-15);
  EXPECT_THROW(ceiling_dice(s, std::vector<std::uint8_t>(6, 0)), std::invalid_argument);
}

TEST(CeilingDice, PerfectMap) {
  BinaryMask gt(4, 4, 0);
  gt(1, 1) = gt(2, 2) = gt(3, 0) = 1;
  ScoreMap s(4, 4);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = gt[i];
  EXPECT_DOUBLE_EQ(ceiling_dice(std::vector<ScoreMap>{s}, std::vector<BinaryMask>{gt}), 1.0);
  EXPECT_DOUBLE_EQ(auprc(std::vector<ScoreMap>{s}, std::vector<BinaryMask>{gt}), 1.0);
}

TEST(Metrics, MatchBruteForceOraclesOnSmallInstances) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto in = random_instance(rng);
    ASSERT_NEAR(auprc(in.s, in.y), oracle_auprc(in.s, in.y), 1e-9) << "trial " << trial;
    ASSERT_NEAR(ceiling_dice(in.s, in.y), oracle_dice(in.s, in.y), 1e-9) << "trial " << trial;
  }
}

TEST(Metrics, InvariantUnderIncreasingTransforms) {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const auto in = random_instance(rng);
    std::vector<double> t1, t2;
    for (double v : in.s) {
      t1.push_back(std::exp(3 * v) - 7);
      t2.push_back(v * v * v + 0.5 * v);
    }
    EXPECT_DOUBLE_EQ(auprc(t1, in.y), auprc(in.s, in.y));
    EXPECT_DOUBLE_EQ(auprc(t2, in.y), auprc(in.s, in.y));
    EXPECT_DOUBLE_EQ(ceiling_dice(t1, in.y), ceiling_dice(in.s, in.y));
    EXPECT_DOUBLE_EQ(ceiling_dice(t2, in.y), ceiling_dice(in.s, in.y));
  }
}

TEST(Metrics, CeilingBoundsEveryFixedThreshold) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const auto in = random_instance(rng);
    const double c = ceiling_dice(in.s, in.y);
    for (double t = -0.1; t <= 1.05; t += 0.05) {
      BinaryMask pred(1, static_cast<int>(in.s.size()));
      for (std::size_t i = 0; i < in.s.size(); ++i) pred[i] = in.s[i] > t;
      EXPECT_GE(c + 1e-12, dice(pred, as_mask(in.y)));
    }
  }
}

TEST(Metrics, PooledAndPerImage) {
  std::vector<ScoreMap> s{as_map({.9, .1, .2}), as_map({.3, .8, .4})};
  std::vector<BinaryMask> y{as_mask({1, 0, 0}), as_mask({0, 1, 1})};
  EXPECT_NEAR(auprc(s, y), oracle_auprc({.9, .1, .2, .3, .8, .4}, {1, 0, 0, 0, 1, 1}), 1e-12);
  EXPECT_NEAR(ceiling_dice(s, y, Pooling::per_image),
              0.5 * (oracle_dice({.9, .1, .2}, {1, 0, 0}) + oracle_dice({.3, .8, .4}, {0, 1, 1})), 1e-12);
  EXPECT_THROW(auprc(s, std::vector<BinaryMask>{y[0]}), std::invalid_argument);
}

TEST(Significance, IdenticalSamplesGiveOne) {
  std::vector<double> a{0.3, 0.5, 0.7, 0.1, 0.9};
  EXPECT_DOUBLE_EQ(paired_significance(a, a), 1.0);
  std::vector<double> big(40, 0.25);
  EXPECT_DOUBLE_EQ(paired_significance(big, big), 1.0);
}

TEST(Significance, MatchesExhaustiveEnumeration) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(2, 10);
    std::vector<double> a, b;
    for (int i = 0; i < n; ++i) {
      a.push_back(rng.uniform());
      b.push_back(rng.uniform());
    }
    const double p = paired_significance(a, b);
    EXPECT_NEAR(p, oracle_sign_flip(a, b), 1e-15);
    EXPECT_DOUBLE_EQ(paired_significance(b, a), p);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
  // n = 4 by hand: differences {1, 1, 1, 1}; only the two uniform sign patterns reach |mean| = 1.
  EXPECT_DOUBLE_EQ(paired_significance(std::vector<double>{2, 2, 2, 2}, std::vector<double>{1, 1, 1, 1}), 2.0 / 16.0);
}

TEST(Significance, MonteCarloIsSeededAndCloseToExact) {
  Rng rng(5);
  std::vector<double> a, b;
  for (int i = 0; i < 16; ++i) {
    a.push_back(rng.uniform() + 0.1);
    b.push_back(rng.uniform());
  }
  const double mc = paired_significance(a, b, 7);
  EXPECT_DOUBLE_EQ(paired_significance(a, b, 7), mc);
  EXPECT_NEAR(mc, oracle_sign_flip(a, b), 0.015);
  EXPECT_THROW(paired_significance(a, std::vector<double>(3, 0.0)), std::invalid_argument);
  EXPECT_THROW(paired_significance(std::vector<double>{1.0}, std::vector<double>{2.0}), std::invalid_argument);
}

TEST(Bootstrap, ClosedForms) {
  auto c = bootstrap_interval(std::vector<double>(6, 0.4));
  EXPECT_DOUBLE_EQ(c.mean, 0.4);
  EXPECT_NEAR(c.half_width, 0.0, 1e-15);

  // Two values: the four ordered resamples have means a, (a+b)/2, (a+b)/2, b.
  auto two = bootstrap_interval(std::vector<double>{0.2, 0.9});
  EXPECT_DOUBLE_EQ(two.mean, 0.55);
  EXPECT_NEAR(two.half_width, 0.7 / (2 * std::sqrt(2.0)), 1e-15);

  // Enumeration of all n^n resamples gives sqrt(population variance / n).
  std::vector<double> v{0.1, 0.5, 0.6, 1.3};
  double m = 0, var = 0;
  for (double x : v) m += x / 4;
  for (double x : v) var += (x - m) * (x - m) / 4;
  auto four = bootstrap_interval(v);
  EXPECT_NEAR(four.mean, m, 1e-15);
  EXPECT_NEAR(four.half_width, std::sqrt(var / 4), 1e-12);
}

TEST(Bootstrap, MonteCarloIsSeededAndNearTheAnalyticValue) {
  Rng rng(6);
  std::vector<double> v;
  for (int i = 0; i < 60; ++i) v.push_back(rng.uniform());
  double m = 0, var = 0;
  for (double x : v) m += x / 60;
  for (double x : v) var += (x - m) * (x - m) / 60;
  auto a = bootstrap_interval(v, 4000, 3);
  EXPECT_EQ(a.half_width, bootstrap_interval(v, 4000, 3).half_width);
  EXPECT_NEAR(a.mean, m, 1e-12);
  EXPECT_NEAR(a.half_width, std::sqrt(var / 60), 0.1 * std::sqrt(var / 60));
  EXPECT_THROW(bootstrap_interval(std::vector<double>{1.0}), std::invalid_argument);
}

TEST(RelativeChange, TableAnnotations) {
  EXPECT_EQ(relative_change(77.93, 73.01), 7);
  EXPECT_EQ(relative_change(75.47, 68.52), 10);
  EXPECT_EQ(relative_change(100, 73.01), 37);
  EXPECT_EQ(relative_change(2.25, 9.74), -77);
  EXPECT_EQ(relative_change(8.10, 15.27), -47);
  EXPECT_THROW(relative_change(1, 0), std::invalid_argument);
}

TEST(RegionLpips, ZeroOnMatchingRegionAndSymmetric) {
  ShiftFeatures fx;
  Rng rng(7);
  Image a(8, 8), b(8, 8);
  for (auto& v : a) v = rng.uniform();
  for (auto& v : b) v = rng.uniform();
  BinaryMask region(8, 8, 0);
  for (int r = 2; r < 5; ++r)
    for (int c = 1; c < 6; ++c) region(r, c) = 1;
  auto c = b;
  for (std::size_t i = 0; i < c.size(); ++i)
    if (region[i]) c[i] = a[i];
  EXPECT_DOUBLE_EQ(region_lpips(fx, a, c, region), 0.0);
  EXPECT_GT(region_lpips(fx, a, b, region), 0.0);
  EXPECT_NEAR(region_lpips(fx, a, b, region), region_lpips(fx, b, a, region), 1e-9);
  EXPECT_THROW(region_lpips(fx, a, b, BinaryMask(8, 8, 0)), std::invalid_argument);
}

namespace {

std::vector<LabeledSample> toy_samples(int n, Rng& rng) {
  std::vector<LabeledSample> out;
  for (int i = 0; i < n; ++i) {
    Image ref(8, 8);
    for (auto& v : ref) v = rng.uniform(0.2, 0.8);
    BinaryMask gt(8, 8, 0);
    const int r0 = rng.uniform_int(0, 5), c0 = rng.uniform_int(0, 5);
    for (int r = r0; r < r0 + 3; ++r)
      for (int c = c0; c < c0 + 3; ++c) gt(r, c) = 1;
    Image img = ref;
    for (std::size_t k = 0; k < img.size(); ++k)
      if (gt[k]) img[k] = std::min(1.0, img[k] + 0.3);
    img.id = "img" + std::to_string(i);
    out.push_back(LabeledSample{img, gt, ref});
  }
  return out;
}

scoring::DetectionResult oracle_result(const LabeledSample& s) {
  scoring::DetectionResult r;
  r.input = s.image;
  r.x_cph = s.image;
  r.mask = *s.gt_mask;
  r.x_ph = *s.healthy_reference;
  r.score = ScoreMap(8, 8);
  for (std::size_t k = 0; k < r.score.size(); ++k) r.score[k] = (*s.gt_mask)[k];
  return r;
}

}  // namespace

TEST(Report, PerfectDetectorScoresOneHundred) {
  Rng rng(8);
  auto samples = toy_samples(6, rng);
  MethodResults perfect{"perfect", {}}, noisy{"noisy", {}};
  for (const auto& s : samples) {
    perfect.results.push_back(oracle_result(s));
    auto r = oracle_result(s);
    for (auto& v : r.score) v = rng.uniform();
    r.x_ph = s.image;
    noisy.results.push_back(r);
  }
  ShiftFeatures fx;
  ReportOptions o;
  o.baseline = "noisy";
  auto rep = build_report({perfect, noisy}, samples, &fx, o);
  const auto& p = rep.method("perfect");
  EXPECT_DOUBLE_EQ(p.auprc, 1.0);
  EXPECT_DOUBLE_EQ(p.ceiling_dice, 1.0);
  EXPECT_DOUBLE_EQ(*p.lpips_healthy, 0.0);
  EXPECT_DOUBLE_EQ(*p.lpips_anomaly, 0.0);
  EXPECT_DOUBLE_EQ(p.auprc_interval.half_width, 0.0);
  EXPECT_GT(*rep.method("noisy").lpips_anomaly, 0.0);
  EXPECT_LT(rep.method("noisy").auprc, 1.0);
  ASSERT_EQ(rep.significance.size(), 2u);
  for (const auto& s : rep.significance) {
    EXPECT_GE(s.p_value, 0.0);
    EXPECT_LE(s.p_value, 1.0);
    EXPECT_EQ(s.n, 6);
  }

  const auto text = rep.to_text();
  EXPECT_NE(text.find("perfect\t0.00\t0.00 (-100%)\t100.00 +- 0.00"), std::string::npos) << text;
  const auto j = rep.to_json();
  EXPECT_EQ(j["methods"][0]["relative_change"]["auprc"].get<long>(),
            relative_change(1.0, rep.method("noisy").auprc));
  EXPECT_EQ(j["methods"][0]["per_image"].size(), 6u);
}

TEST(Report, GroundTruthMaskingLeavesHealthyRegionUntouched) {
  Rng rng(9);
  auto samples = toy_samples(4, rng);
  MethodResults gt{"gt", {}};
  for (const auto& s : samples) {
    auto r = oracle_result(s);
    for (std::size_t k = 0; k < r.x_ph.size(); ++k)
      if ((*s.gt_mask)[k]) r.x_ph[k] = 0.5;  // imperfect fill inside the mask only
      else r.x_ph[k] = s.image[k];
    gt.results.push_back(r);
  }
  ShiftFeatures fx;
  auto rep = build_report({gt}, samples, &fx);
  EXPECT_DOUBLE_EQ(*rep.methods[0].lpips_healthy, 0.0);
  EXPECT_GT(*rep.methods[0].lpips_anomaly, 0.0);
}

TEST(Report, Errors) {
  Rng rng(10);
  auto samples = toy_samples(2, rng);
  EXPECT_THROW(build_report({}, samples, nullptr), std::invalid_argument);
  EXPECT_THROW(build_report({MethodResults{"m", {}}}, samples, nullptr), std::invalid_argument);
  auto no_gt = samples;
  no_gt[0].gt_mask.reset();
  MethodResults m{"m", {oracle_result(samples[0]), oracle_result(samples[1])}};
  EXPECT_THROW(build_report({m}, no_gt, nullptr), std::invalid_argument);
  auto rep = build_report({m}, samples, nullptr);
  EXPECT_FALSE(rep.methods[0].lpips_healthy.has_value());
  EXPECT_THROW(rep.method("other"), std::out_of_range);
}

TEST(Figure, WritesAGrid) {
  Rng rng(11);
  auto samples = toy_samples(3, rng);
  std::vector<scoring::DetectionResult> rs;
  for (const auto& s : samples) rs.push_back(oracle_result(s));
  const auto path = std::filesystem::temp_directory_path() / "phanes_figure.png";
  write_figure(path, rs);
  EXPECT_TRUE(std::filesystem::exists(path));
  std::filesystem::remove(path);
}
