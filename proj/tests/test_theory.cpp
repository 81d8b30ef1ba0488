#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "lnwarm/theory.hpp"

namespace lnwarm {
namespace {

TEST(Lemma1, EstimateNearHalfSigmaSquaredD) {
  Rng rng(7);
  const Lemma1Result r = check_lemma1(512, 1.0, 10000, rng);
  EXPECT_EQ(r.target, 256.0);
  EXPECT_LT(r.rel_err, 0.02);
}

TEST(Lemma1, TargetForOtherSigma) {
  Rng rng(1);
  EXPECT_EQ(check_lemma1(100, 2.0, 1000, rng).target, 200.0);
}

TEST(Lemma1, ZeroSigmaIsExactlyZero) {
  Rng rng(1);
  EXPECT_EQ(check_lemma1(16, 0.0, 1000, rng).estimate, 0.0);
}

TEST(Lemma1, ErrorShrinksWithSamples) {
  // Average |rel_err| over repetitions: 16x the samples should cut it ~4x.
  auto mean_err = [](std::size_t samples) {
    double acc = 0.0;
    for (std::uint64_t s = 0; s < 40; ++s) {
      Rng rng(100 + s);
      acc += check_lemma1(32, 1.0, samples, rng).rel_err;
    }
    return acc / 40.0;
  };
  const double coarse = mean_err(1000), fine = mean_err(16000);
  EXPECT_GT(coarse / fine, 2.5);
  EXPECT_LT(coarse / fine, 6.5);
}

TEST(Lemma1, RejectsTooFewSamples) {
  Rng rng(1);
  EXPECT_THROW(check_lemma1(8, 1.0, 999, rng), ArgumentError);
}

TEST(Lemma2, PostLnMeansNearThreeHalvesD) {
  Rng rng(11);
  const auto rep = check_lemma2(ModelConfig::theory(64, 6, 4, 32, Variant::PostLN), 200, rng);
  ASSERT_EQ(rep.rows.size(), 6u);
  for (const auto& r : rep.rows) EXPECT_NEAR(r.mean_sq_norm, 96.0, 96.0 * 0.05) << "layer " << r.layer;
  EXPECT_TRUE(rep.passed);
}

TEST(Lemma2, PreLnWithinBand) {
  Rng rng(12);
  const auto rep = check_lemma2(ModelConfig::theory(64, 6, 4, 32, Variant::PreLN), 200, rng);
  ASSERT_EQ(rep.rows.size(), 7u);
  EXPECT_NEAR(rep.rows[0].mean_sq_norm, 64.0, 64.0 * 0.05);
  EXPECT_EQ(rep.rows[4].lower, 192.0);
  EXPECT_EQ(rep.rows[4].upper, 448.0);
  for (const auto& r : rep.rows) EXPECT_TRUE(r.passed) << "layer " << r.layer;
}

TEST(Lemma2, RejectsEmptyStackAndNonTheoryConfigs) {
  Rng rng(1);
  EXPECT_THROW(check_lemma2(ModelConfig::theory(8, 0, 4, 8, Variant::PreLN), 100, rng), ArgumentError);
  EXPECT_THROW(check_lemma2(ModelConfig::trainable(8, 16, 2, 4, 2, 8, Variant::PreLN), 100, rng),
               ArgumentError);
}

TEST(Lemma3, RatioBoundedByOne) {
  for (std::size_t d : {4u, 64u, 512u}) {
    Rng rng(d);
    EXPECT_LE(check_lemma3(d, d == 512 ? 100 : 1000, rng), 1.0 + kLemma3Slack) << "d=" << d;
  }
}

TEST(Lemma3, TwoDimensionalCaseIsZero) {
  const std::vector<double> x = {0.0, 2.0};
  EXPECT_NEAR(ln_jacobian_ratio(x), 0.0, 1e-12);
}

TEST(Lemma3, JacobianMatchesFiniteDifferences) {
  Rng rng(3);
  EXPECT_LT(ln_jacobian_fd_error(8, 20, 1e-5, rng), kJacobianFdTol);
}

TEST(Lemma3, CoarseStepShowsTruncationError) {
  Rng a(3), b(3);
  const double fine = ln_jacobian_fd_error(6, 5, 1e-5, a), coarse = ln_jacobian_fd_error(6, 5, 1e-1, b);
  EXPECT_GT(coarse, 100.0 * fine);
  EXPECT_THROW(ln_jacobian_fd_error(1, 5, 1e-5, a), ArgumentError);
}

TEST(Concentration, ChiSquareWithinBound) {
  Rng rng(5);
  const double delta = chi_square_delta(64, 0.5);
  EXPECT_NEAR(delta, std::exp(-2.0), 1e-15);
  const BoundedCheck b = check_concentration(chi_square_sampler(64, rng), 0.5, delta, 10000);
  EXPECT_TRUE(b.passed);
  EXPECT_DOUBLE_EQ(b.threshold, delta + 2.0 * std::sqrt(delta / 10000.0));
}

TEST(Concentration, ConstantSamplerNeverExceeds) {
  const BoundedCheck b = check_concentration([] { return 3.0; }, 0.01, 0.1, 1000);
  EXPECT_EQ(b.empirical_exceed_fraction, 0.0);
  EXPECT_TRUE(b.passed);
}

TEST(Concentration, ZeroMeanAndBadArgumentsRejected) {
  EXPECT_THROW(check_concentration([] { return 0.0; }, 0.1, 0.1, 1000), ArgumentError);
  EXPECT_THROW(check_concentration([] { return 1.0; }, 0.1, 0.1, 999), ArgumentError);
  EXPECT_THROW(check_concentration([] { return 1.0; }, 0.0, 0.1, 1000), ArgumentError);
}

TEST(Concentration, HiddenStateSamplerIsNonNegativeAndDeterministic) {
  const ModelConfig c = ModelConfig::theory(16, 2, 4, 8, Variant::PostLN);
  Rng a(3), b(3);
  auto sa = hidden_state_sampler(c, a), sb = hidden_state_sampler(c, b);
  for (int i = 0; i < 5; ++i) {
    const double x = sa();
    EXPECT_GE(x, 0.0);
    EXPECT_EQ(x, sb());
  }
}

TEST(Stats, RanksSpearmanPearsonSlope) {
  const std::vector<double> x = {1, 2, 3, 4}, y = {10, 20, 20, 40};
  EXPECT_EQ(ranks(y), (std::vector<double>{1, 2.5, 2.5, 4}));
  EXPECT_NEAR(pearson(x, x), 1.0, 1e-15);
  EXPECT_NEAR(spearman(x, std::vector<double>{4, 3, 2, 1}), -1.0, 1e-15);
  EXPECT_NEAR(ls_slope(x, std::vector<double>{1, 3, 5, 7}), 2.0, 1e-14);
  EXPECT_NEAR(coefficient_of_variation(std::vector<double>{1, 3}), 0.5, 1e-15);
}

GradStatsProtocol quick_protocol() {
  GradStatsProtocol p;
  p.seeds = 3;
  p.batches = 2;
  p.batch_size = 2;
  return p;
}

TEST(DepthSweep, SingleDepthGivesOneFiniteRow) {
  const std::vector<std::size_t> depths = {2};
  const auto rows = depth_sweep(depths, ModelConfig::theory(8, 1, 4, 8, Variant::PostLN), quick_protocol());
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].L, 2u);
  EXPECT_EQ(rows[0].seeds, 3u);
  EXPECT_GE(rows[0].mean_grad_norm, 0.0);
  EXPECT_TRUE(std::isfinite(rows[0].std));
}

TEST(DepthSweep, DeterministicAndThreadCountIndependent) {
  const std::vector<std::size_t> depths = {1, 3};
  const ModelConfig c = ModelConfig::theory(8, 1, 4, 8, Variant::PreLN);
  GradStatsProtocol one = quick_protocol(), many = quick_protocol();
  one.threads = 1;
  many.threads = 3;
  const auto a = depth_sweep(depths, c, one), b = depth_sweep(depths, c, many);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].mean_grad_norm, b[i].mean_grad_norm);
    EXPECT_EQ(a[i].std, b[i].std);
  }
}

TEST(DepthSweep, EmptyDepthListRejected) {
  EXPECT_THROW(depth_sweep({}, ModelConfig::theory(8, 1, 4, 8, Variant::PostLN), quick_protocol()),
               ArgumentError);
}

TEST(ExpectedGradient, AveragesPerElementBeforeTheNorm) {
  const ModelConfig c = ModelConfig::theory(8, 2, 4, 8, Variant::PostLN);
  GradStatsProtocol p = quick_protocol();
  p.batches = 3;
  const GradBundle mean = expected_gradient(c, p, 1);
  const Rng root(p.base_seed);
  Rng init_rng = root.fork(2), data_rng = root.fork(3);
  const ModelParams params = init_model(c, init_rng);
  Matrix acc(mean.layers[1].w_2.rows(), mean.layers[1].w_2.cols());
  double norm_of_each = 0.0;
  for (int b = 0; b < 3; ++b) {
    const Matrix g = loss_and_grad(random_token_batch(p.batch_size, c, data_rng, p.targets), params, c)
                         .grads.layers[1].w_2;
    acc += g;
    norm_of_each += frobenius_norm(g) / 3.0;
  }
  acc *= 1.0 / 3.0;
  EXPECT_NEAR(frobenius_norm(mean.layers[1].w_2), frobenius_norm(acc), 1e-14);
  EXPECT_LE(frobenius_norm(acc), norm_of_each + 1e-15);
}

TEST(LayerProfile, RowPerLayerAndMatrix) {
  const auto rows = layer_profile(ModelConfig::theory(8, 4, 4, 8, Variant::PreLN), quick_protocol());
  ASSERT_EQ(rows.size(), 8u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].layer, i / 2 + 1);
    EXPECT_EQ(rows[i].matrix, i % 2 == 0 ? "W1" : "W2");
    EXPECT_GT(rows[i].mean_grad_norm, 0.0);
  }
}

TEST(DepthSweep, ReportsHeadInputGradientNorm) {
  const std::vector<std::size_t> depths = {2};
  const auto rows = depth_sweep(depths, ModelConfig::theory(8, 1, 4, 8, Variant::PreLN), quick_protocol());
  EXPECT_GT(rows[0].mean_head_grad_norm, 0.0);
  EXPECT_TRUE(std::isfinite(rows[0].mean_head_grad_norm));
}

TEST(Verdicts, ThresholdsApplied) {
  std::vector<DepthSweepRow> flat = {{6, Variant::PostLN, 8, 1.0, 0, 1}, {8, Variant::PostLN, 8, 1.2, 0, 1}};
  EXPECT_TRUE(post_ln_constancy(flat).passed);
  flat[1].mean_grad_norm = 1.31;
  EXPECT_FALSE(post_ln_constancy(flat).passed);

  std::vector<DepthSweepRow> scaled;
  for (std::size_t L : {4u, 16u}) scaled.push_back({L, Variant::PreLN, 8, 1.0 / std::sqrt(double(L)), 0, 1});
  EXPECT_NEAR(pre_ln_sqrt_scaling(scaled).value, 0.0, 1e-15);

  std::vector<LayerProfileRow> rising;
  for (std::size_t l = 1; l <= 6; ++l) rising.push_back({l, "W2", std::exp(0.2 * double(l)), 0});
  EXPECT_TRUE(post_ln_increasing(rising).passed);
  EXPECT_TRUE(post_ln_log_slope(rising).passed);
  EXPECT_FALSE(pre_ln_flat(rising).passed);
}

}  // namespace
}  // namespace lnwarm
