#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace layercull;
using testutil::config;

TEST(Perplexity, UniformLogitsGiveVocabSize) {
  const auto cfg = config(2, 8, 2, 16, 37);
  auto w = random_weights<float>(cfg, 1);
  w.lm_head.fill(0.0f);
  const auto calib = testutil::random_calib(cfg, 3, 9, 2);
  EXPECT_NEAR(perplexity(w, cfg, calib), 37.0, 1e-9);
}

TEST(Perplexity, IdentityLayerRemoval) {
  const auto cfg = config(4);
  auto w = random_weights<float>(cfg, 3);
  make_identity_layer(w, 1);
  const auto calib = testutil::random_calib(cfg, 4, 12, 2);
  const auto pruned = prune_layers(w, cfg, 1);
  EXPECT_NEAR(perplexity(pruned.weights, pruned.config, calib), perplexity(w, cfg, calib), 1e-6);
}

TEST(Perplexity, MatchesTwoPassOracle) {
  const auto cfg = config(3, 16, 2, 32, 40);
  const auto w = random_weights<double>(cfg, 4);
  const auto calib = testutil::random_calib(cfg, 11, 10, 5);
  const auto r = evaluate_perplexity(w, cfg, calib.sequences);
  EXPECT_NEAR(r.perplexity, oracle::perplexity(oracle::load(w, cfg), calib.sequences), 1e-9);
  EXPECT_EQ(r.positions, 11u * 9u);
  EXPECT_TRUE(r.warnings.empty());
}

TEST(Perplexity, EqualsExpCrossEntropyAndAtLeastOne) {
  const auto cfg = config(2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = random_weights<double>(cfg, seed);
    const auto calib = testutil::random_calib(cfg, 5, 8, seed);
    const auto [in, tg] = shift_for_next_token(calib.sequences);
    const double ce = cross_entropy(forward(w, cfg, in).logits, tg);
    const double ppl = perplexity(w, cfg, calib);
    EXPECT_NEAR(ppl, std::exp(ce), 1e-9 * ppl);
    EXPECT_GE(ppl, 1.0);
  }
}

TEST(Perplexity, FusedModelMatchesRuntimeScaledSkip) {
  const auto cfg = config(5);
  const auto w = random_weights<float>(cfg, 6);
  const auto calib = testutil::random_calib(cfg, 4, 10, 7);
  const double alpha = 1.37;
  auto pruned = prune_layers(w, cfg, 2);
  fuse_alpha_inplace(pruned.weights, 2, alpha);
  const double fused = perplexity(pruned.weights, pruned.config, calib);
  const double runtime = evaluate_perplexity(w, cfg, calib.sequences, {2}, {{3, alpha}}).perplexity;
  EXPECT_NEAR(fused, runtime, 1e-6 * runtime);
}

TEST(Perplexity, OverflowBecomesInfinityWithWarning) {
  const auto cfg = config(1, 8, 2, 16, 16);
  auto w = random_weights<double>(cfg, 1);
  w.lm_head *= 1e305;
  const auto calib = testutil::random_calib(cfg, 2, 6, 1);
  const auto r = evaluate_perplexity(w, cfg, calib.sequences);
  EXPECT_TRUE(std::isinf(r.perplexity));
  EXPECT_GT(r.perplexity, 0.0);
  ASSERT_EQ(r.warnings.size(), 1u);
}

TEST(Perplexity, ChunkingDoesNotChangeResult) {
  const auto cfg = config(2);
  const auto w = random_weights<double>(cfg, 9);
  const auto calib = testutil::random_calib(cfg, kEvalChunk * 2 + 3, 6, 2);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < calib.count; ++i) {
    const auto r = evaluate_perplexity(w, cfg, slice_rows(calib.sequences, i, 1));
    sum += r.mean_nll * static_cast<double>(r.positions);
    n += r.positions;
  }
  EXPECT_NEAR(evaluate_perplexity(w, cfg, calib.sequences).mean_nll, sum / double(n), 1e-12);
}
