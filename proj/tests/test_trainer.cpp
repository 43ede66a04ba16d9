#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "canary_audit/textgen.hpp"
#include "canary_audit/trainer.hpp"

namespace canary_audit {
namespace {

NlmConfig small_config() {
  NlmConfig c;
  c.context_len = 4;
  c.embed_dim = 6;
  c.hidden_dim = 16;
  return c;
}

TrainingCorpus small_corpus(long lines, std::uint64_t seed = 3) {
  BackgroundSpec spec;
  spec.word_vocab_size = 40;
  spec.sentence_count = lines;
  spec.seed = seed;
  return gen_background(spec);
}

TEST(ClipGrad, HalvesAtTwiceTheBound) {
  NlmGrad g = init_params(small_config(), 1);
  const double c = g.norm() / 2.0;
  const NlmGrad clipped = clip_grad(g, c);
  const auto a = g.flatten(), b = clipped.flatten();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i] * 0.5, 1e-15);
  EXPECT_NEAR(clipped.norm(), c, 1e-12);
}

TEST(ClipGrad, WithinBoundIsBitwiseUnchanged) {
  const NlmGrad g = init_params(small_config(), 2);
  EXPECT_EQ(clip_grad(g, g.norm()), g);
  EXPECT_EQ(clip_grad(g, g.norm() * 3.0), g);
  const NlmGrad zero = g.zeros_like();
  EXPECT_EQ(clip_grad(zero, 0.1), zero);
}

TEST(ClipGrad, RejectsNonFinite) {
  NlmGrad g = init_params(small_config(), 2);
  g.w1(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(clip_grad(g, 1.0), InvalidState);
  g.w1(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(clip_grad(g, 1.0), InvalidState);
  EXPECT_THROW(clip_grad(init_params(small_config(), 2), 0.0), InvalidArgument);
}

TEST(Train, PostClipNormsRespectBound) {
  const TrainingCorpus corpus = small_corpus(300);
  TrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 16;
  tc.clip_norm = 0.3;
  tc.record_norms_after = 0;
  const auto [p, r] = train(corpus, tc, init_params(small_config(), 1));
  EXPECT_LE(r.max_post_clip_norm, 0.3 + 1e-9);
  EXPECT_GT(r.overall_fraction_clipped, 0.0);
  EXPECT_EQ(r.observed_norms.size(), 60u * 16u);
}

TEST(Train, ClipOffEqualsHugeClip) {
  const TrainingCorpus corpus = small_corpus(1000);
  TrainConfig tc;
  tc.steps = 50;
  tc.batch_size = 32;
  tc.seed = 9;
  const NlmParams init = init_params(small_config(), 4);
  const auto [off, r_off] = train(corpus, tc, init);
  tc.clip_norm = 1e9;
  const auto [huge, r_huge] = train(corpus, tc, init);
  EXPECT_EQ(off, huge);
  EXPECT_EQ(r_huge.overall_fraction_clipped, 0.0);
  EXPECT_EQ(r_off.mean_nll, r_huge.mean_nll);
}

TEST(Train, DeterministicAcrossThreadCounts) {
  const TrainingCorpus corpus = small_corpus(200);
  TrainConfig tc;
  tc.steps = 20;
  tc.batch_size = 8;
  tc.clip_norm = 0.5;
  const NlmParams init = init_params(small_config(), 4);
  const auto serial = train(corpus, tc, init).first;
  tc.threads = 3;
  EXPECT_EQ(train(corpus, tc, init).first, serial);
}

TEST(Train, OverfitsSingleLine) {
  TrainingCorpus corpus;
  corpus.sequences = {"memorize this line"};
  TrainConfig tc;
  tc.steps = 500;
  tc.batch_size = 1;
  const NlmParams init = init_params(small_config(), 6);
  const double before = sequence_nll(init, corpus.sequences[0]);
  const auto [p, r] = train(corpus, tc, init);
  EXPECT_LT(sequence_nll(p, corpus.sequences[0]), 0.5 * before);
}

TEST(Train, FullBatchDescent) {
  const TrainingCorpus corpus = small_corpus(100);
  TrainConfig tc;
  tc.steps = 200;
  tc.batch_size = 128;
  tc.probe_interval = 1;
  const auto [p, r] = train(corpus, tc, init_params(small_config(), 7));
  ASSERT_EQ(r.mean_nll.size(), 200u);
  for (std::size_t t = 0; t + 20 < r.mean_nll.size(); ++t) EXPECT_LE(r.mean_nll[t + 20], r.mean_nll[t]) << t;
}

TEST(Train, DivergenceCarriesLastGoodStep) {
  const TrainingCorpus corpus = small_corpus(50);
  TrainConfig tc;
  tc.steps = 5;
  NlmParams init = init_params(small_config(), 1);
  init.b2(0) = std::numeric_limits<double>::infinity();
  try {
    train(corpus, tc, init);
    FAIL() << "expected an error";
  } catch (const InvalidState&) {
  }
  tc.learning_rate = 1e300;
  tc.batch_size = 4;
  try {
    train(corpus, tc, init_params(small_config(), 1));
    SUCCEED();
  } catch (const TrainingDiverged& e) {
    EXPECT_GE(e.last_good_step(), 0);
  } catch (const InvalidState&) {
  }
}

TEST(Probe, PureAndClosedForm) {
  CanarySpec spec;
  spec.scale_divisor = 64;
  const auto can = build_canary_sets(spec).first;
  const std::vector<NamedSet> sets{{"CAN0", can.subset(0)}};
  const NlmParams zero = NlmParams::zeros(NlmConfig{});
  const auto a = probe(zero, sets, 6);
  EXPECT_NEAR(a.at("CAN0"), 6.0 * (std::log2(26.0) - std::log2(28.0)) - std::log2(28.0), 1e-9);
  const NlmParams p = init_params(NlmConfig{}, 3);
  EXPECT_EQ(probe(p, sets, 6), probe(p, sets, 6));
  EXPECT_THROW(probe(p, {{"empty", SequenceSet{}}}, 6), InvalidArgument);
}

TEST(Percentile, NearestRank) {
  EXPECT_EQ(percentile({5, 1, 3, 2, 4}, 0.0), 1);
  EXPECT_EQ(percentile({5, 1, 3, 2, 4}, 1.0), 5);
  EXPECT_EQ(percentile({5, 1, 3, 2, 4}, 0.5), 3);
  EXPECT_THROW(percentile({}, 0.5), InvalidArgument);
}

}  // namespace
}  // namespace canary_audit
