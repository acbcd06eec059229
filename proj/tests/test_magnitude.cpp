#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace layercull;
using testutil::config;

TEST(GainRatios, IdentityLayersHaveZeroGain) {
  const auto cfg = config(4);
  auto w = random_weights<float>(cfg, 1);
  for (std::size_t l = 0; l < 4; ++l) make_identity_layer(w, l);
  const auto calib = testutil::random_calib(cfg, 4, 12, 2);
  const auto report = gain_ratios(w, cfg, calib);
  ASSERT_EQ(report.delta_percent.size(), 4u);
  for (const double d : report.delta_percent) EXPECT_NEAR(d, 0.0, 1e-6);
  for (std::size_t l = 0; l < 4; ++l) EXPECT_NEAR(estimate_alpha(w, cfg, calib, l).alpha, 1.0, 1e-6);
  EXPECT_EQ(report.computed_over, calib.fingerprint());
}

TEST(GainRatios, MatchesFormulaOracleSingleSequence) {
  const auto cfg = config(2, 16, 2, 32, 24);
  const auto w = random_weights<double>(cfg, 5);
  const auto calib = testutil::random_calib(cfg, 1, 15, 6);
  const auto report = gain_ratios(w, cfg, calib);
  const auto om = oracle::load(w, cfg);
  for (std::size_t l = 0; l < 2; ++l) {
    const double want = (oracle::span_gain(om, calib.sequences, l, 1) - 1.0) * 100.0;
    EXPECT_NEAR(report.delta_percent[l], want, 1e-9);
  }
}

TEST(GainRatios, AlphaIsTheSameStatistic) {
  const auto cfg = config(5);
  const auto w = random_weights<float>(cfg, 8);
  const auto calib = testutil::random_calib(cfg, 6, 10, 9);
  const auto report = gain_ratios(w, cfg, calib);
  for (std::size_t l = 0; l < 5; ++l) {
    const double alpha = estimate_alpha(w, cfg, calib, l).alpha;
    const double from_delta = 1.0 + report.delta_percent[l] / 100.0;
    EXPECT_LE(std::abs(alpha - from_delta), 1e-12 * alpha) << l;
  }
}

TEST(EstimateAlpha, SpanMatchesTraceRatioOracle) {
  const auto cfg = config(6, 16, 2, 32, 24);
  const auto w = random_weights<double>(cfg, 10);
  const auto calib = testutil::random_calib(cfg, 3, 12, 11);
  const auto f = estimate_alpha(w, cfg, calib, 2, 2);
  EXPECT_EQ(f.span_start, 2u);
  EXPECT_EQ(f.span_len, 2u);
  EXPECT_EQ(f.sample_count, 3u);
  EXPECT_NEAR(f.alpha, oracle::span_gain(oracle::load(w, cfg), calib.sequences, 2, 2), 1e-9);
}

TEST(EstimateAlpha, OutOfRangeSpan) {
  const auto cfg = config(3);
  const auto w = random_weights<float>(cfg, 1);
  const auto calib = testutil::random_calib(cfg, 2, 8, 1);
  for (const auto& [start, len] : {std::pair<std::size_t, std::size_t>{3, 1}, {2, 2}, {0, 0}}) {
    try {
      estimate_alpha(w, cfg, calib, start, len);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kIndex);
    }
  }
  EXPECT_NO_THROW(estimate_alpha(w, cfg, calib, 0, 3));
}

TEST(GainRatios, FlatMeanOverSequences) {
  const auto cfg = config(3);
  const auto w = random_weights<double>(cfg, 2);
  const auto corpus = testutil::random_tokens(20 * 11, cfg.vocab_size, 3);
  const auto all = make_calibration(corpus, 11, 20, 4);
  const auto whole = gain_ratios(w, cfg, all).delta_percent;
  std::vector<double> mean(3, 0.0);
  for (std::size_t i = 0; i < all.count; ++i) {
    CalibrationSet one = all;
    one.sequences = slice_rows(all.sequences, i, 1);
    one.count = 1;
    const auto d = gain_ratios(w, cfg, one).delta_percent;
    for (std::size_t l = 0; l < 3; ++l) mean[l] += d[l] / 20.0;
  }
  for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(whole[l], mean[l], 1e-10);
}

TEST(GainRatios, DeadChannelStaysFinite) {
  const auto cfg = config(2);
  auto w = random_weights<float>(cfg, 3);
  for (std::size_t v = 0; v < cfg.vocab_size; ++v) w.w_embed.at(v, 0) = 0.0f;
  const auto calib = testutil::random_calib(cfg, 2, 8, 1);
  const auto report = gain_ratios(w, cfg, calib);
  for (const double d : report.delta_percent) EXPECT_TRUE(std::isfinite(d));
  EXPECT_GT(report.delta_percent[0], 1e6);
}

TEST(GainRatios, IndependentOfThreadCount) {
  const auto cfg = config(3);
  const auto w = random_weights<float>(cfg, 4);
  const auto calib = testutil::random_calib(cfg, 11, 9, 2);
  set_thread_count(1);
  const auto a = gain_ratios(w, cfg, calib);
  set_thread_count(4);
  const auto b = gain_ratios(w, cfg, calib);
  set_thread_count(0);
  EXPECT_EQ(a.delta_percent, b.delta_percent);
}

TEST(GainRatios, IncludesPositionZero) {
  // On two-token sequences, dropping position 0 would halve the token axis.
  const auto cfg = config(2);
  const auto w = random_weights<double>(cfg, 6);
  const auto calib = testutil::random_calib(cfg, 2, 2, 7);
  const auto om = oracle::load(w, cfg);
  EXPECT_NEAR(gain_ratios(w, cfg, calib).delta_percent[1],
              (oracle::span_gain(om, calib.sequences, 1, 1) - 1.0) * 100.0, 1e-9);
}
