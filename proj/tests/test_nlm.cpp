#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <vector>

#include "canary_audit/nlm.hpp"
#include "canary_audit/trainer.hpp"

namespace canary_audit {
namespace {

NlmConfig tiny_config(int k, int e, int h, int v) {
  NlmConfig c;
  c.context_len = k;
  c.embed_dim = e;
  c.hidden_dim = h;
  c.vocab_size = v;
  return c;
}

NlmParams random_params(const NlmConfig& c, std::uint64_t seed, double scale = 0.5) {
  NlmParams p = NlmParams::zeros(c);
  Rng rng(seed);
  p.for_each_block([&](double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) d[i] = rng.uniform(-scale, scale);
  });
  return p;
}

// Scalar re-derivation of the network: embed, concat, affine, tanh, affine, log-softmax.
std::vector<double> oracle_log_probs(const NlmParams& p, const std::vector<Symbol>& ctx) {
  const NlmConfig& c = p.config;
  const int e = c.embed(), h = c.hidden(), v = c.vocab_size;
  std::vector<double> x;
  for (Symbol s : ctx) {
    for (int d = 0; d < e; ++d) x.push_back(p.embedding(s, d));
  }
  std::vector<double> hid(static_cast<std::size_t>(h));
  for (int j = 0; j < h; ++j) {
    double a = p.b1(j);
    for (std::size_t i = 0; i < x.size(); ++i) a += x[i] * p.w1(static_cast<Eigen::Index>(i), j);
    hid[static_cast<std::size_t>(j)] = std::tanh(a);
  }
  std::vector<double> z(static_cast<std::size_t>(v));
  double mx = -1e300;
  for (int o = 0; o < v; ++o) {
    double a = p.b2(o);
    for (int j = 0; j < h; ++j) a += hid[static_cast<std::size_t>(j)] * p.w2(j, o);
    z[static_cast<std::size_t>(o)] = a;
    mx = std::max(mx, a);
  }
  double s = 0.0;
  for (double a : z) s += std::exp(a - mx);
  for (double& a : z) a -= mx + std::log(s);
  return z;
}

double oracle_nll(const NlmParams& p, const std::vector<Symbol>& text) {
  std::vector<Symbol> full = text;
  full.push_back(p.config.eos());
  double nll = 0.0;
  for (std::size_t t = 0; t < full.size(); ++t) {
    const auto ctx = context_at(text, t, p.config.context_len, p.config.pad());
    nll -= oracle_log_probs(p, ctx)[static_cast<std::size_t>(full[t])];
  }
  return nll;
}

std::vector<Symbol> random_text(Rng& rng, int len, int letters) {
  std::vector<Symbol> t;
  for (int i = 0; i < len; ++i) t.push_back(static_cast<Symbol>(rng.uniform_below(static_cast<std::uint64_t>(letters))));
  return t;
}

TEST(NlmConfig, ParameterCount) {
  const NlmConfig c;
  EXPECT_EQ(c.parameter_count(), 29 * 16 + 8 * 16 * 64 + 64 + 64 * 28 + 28);
  EXPECT_EQ(init_params(c, 1).size(), c.parameter_count());
  NlmConfig half = c;
  half.size_multiplier = 0.5;
  EXPECT_EQ(half.embed(), 8);
  EXPECT_EQ(half.hidden(), 32);
}

TEST(InitParams, ZeroBiasBoundedAndDeterministic) {
  const NlmConfig c;
  const NlmParams p = init_params(c, 17);
  EXPECT_TRUE(p.b1.isZero());
  EXPECT_TRUE(p.b2.isZero());
  EXPECT_LE(p.embedding.cwiseAbs().maxCoeff(), 1.0);
  EXPECT_LE(p.w1.cwiseAbs().maxCoeff(), 1.0 / std::sqrt(c.input_width()));
  EXPECT_LE(p.w2.cwiseAbs().maxCoeff(), 1.0 / std::sqrt(c.hidden()));
  EXPECT_EQ(init_params(c, 17), p);
  EXPECT_FALSE(init_params(c, 18) == p);
}

TEST(LogProbs, ZeroParamsUniform) {
  const NlmParams p = NlmParams::zeros(NlmConfig{});
  const std::vector<Symbol> ctx(8, vocab::kPad);
  const RowVector lp = log_probs(p, ctx);
  for (int i = 0; i < 28; ++i) EXPECT_DOUBLE_EQ(lp(i), -std::log(28.0));
}

TEST(LogProbs, MatchesScalarOracle) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const NlmParams p = random_params(tiny_config(2, 2, 3, 3), seed);
    Rng rng(seed);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Symbol> ctx{static_cast<Symbol>(rng.uniform_below(4)), static_cast<Symbol>(rng.uniform_below(4))};
      const RowVector lp = log_probs(p, ctx);
      const auto want = oracle_log_probs(p, ctx);
      for (int i = 0; i < 3; ++i) EXPECT_NEAR(lp(i), want[static_cast<std::size_t>(i)], 1e-12);
    }
  }
}

TEST(LogProbs, NormalizedOverRandomContexts) {
  const NlmParams p = init_params(NlmConfig{}, 3);
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Symbol> ctx(8);
    for (auto& s : ctx) s = static_cast<Symbol>(rng.uniform_below(29));
    EXPECT_NEAR(log_probs(p, ctx).array().exp().sum(), 1.0, 1e-12);
  }
}

TEST(LogProbs, RejectsBadContext) {
  const NlmParams p = init_params(NlmConfig{}, 3);
  EXPECT_THROW(log_probs(p, std::vector<Symbol>(7, 0)), InvalidArgument);
  std::vector<Symbol> ctx(8, 0);
  ctx[3] = 29;
  EXPECT_THROW(log_probs(p, ctx), InvalidArgument);
  ctx[3] = -1;
  EXPECT_THROW(log_probs(p, ctx), InvalidArgument);
}

TEST(SequenceNll, UniformClosedForm) {
  const NlmParams p = NlmParams::zeros(NlmConfig{});
  EXPECT_NEAR(sequence_nll(p, "a"), 2.0 * std::log(28.0), 1e-12);
  EXPECT_NEAR(sequence_nll(p, "hello world"), 12.0 * std::log(28.0), 1e-12);
  EXPECT_THROW(sequence_nll(p, ""), InvalidArgument);
}

TEST(SequenceNll, MatchesChainedOracle) {
  Rng rng(21);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const NlmParams p = random_params(tiny_config(3, 2, 4, 6), seed);
    const auto text = random_text(rng, 1 + static_cast<int>(rng.uniform_below(7)), 5);
    EXPECT_NEAR(sequence_nll(p, text), oracle_nll(p, text), 1e-10);
  }
  const NlmParams p = init_params(NlmConfig{}, 5);
  const auto text = vocab::encode("the quick brown fox");
  double chained = 0.0;
  std::vector<Symbol> full = text;
  full.push_back(vocab::kEos);
  for (std::size_t t = 0; t < full.size(); ++t) chained -= log_probs(p, context_at(text, t, 8, vocab::kPad))(full[t]);
  EXPECT_NEAR(sequence_nll(p, text), chained, 1e-10);
}

double max_fd_rel_error(const NlmParams& p, const std::vector<Symbol>& text) {
  const NlmGrad g = per_example_grad(p, text);
  const auto analytic = g.flatten();
  auto theta = p.flatten();
  NlmParams q = p;
  const double step = 1e-4;
  double worst = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + step;
    q.unflatten(theta);
    const double up = sequence_nll(q, text);
    theta[i] = orig - step;
    q.unflatten(theta);
    const double down = sequence_nll(q, text);
    theta[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double rel = std::abs(numeric - analytic[i]) / std::max(1e-6, std::abs(numeric) + std::abs(analytic[i]));
    worst = std::max(worst, rel);
  }
  return worst;
}

TEST(PerExampleGrad, FiniteDifferencesTinyModels) {
  Rng rng(99);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const NlmParams p = random_params(tiny_config(2, 3, 4, 28), seed);
    const auto text = random_text(rng, 1 + static_cast<int>(rng.uniform_below(6)), 27);
    EXPECT_LT(max_fd_rel_error(p, text), 1e-4) << "seed " << seed;
  }
}

TEST(PerExampleGrad, UntouchedEmbeddingRowsAreZero) {
  const NlmParams p = init_params(tiny_config(2, 3, 4, 28), 2);
  const NlmGrad g = per_example_grad(p, "ab");
  for (Symbol s = 0; s <= 28; ++s) {
    const bool used = s == 0 || s == 1 || s == 28;
    if (!used) {
      EXPECT_TRUE(g.embedding.row(s).isZero()) << s;
    }
  }
  EXPECT_FALSE(g.embedding.row(0).isZero());
}

TEST(PerExampleGrad, Pure) {
  const NlmParams p = init_params(NlmConfig{}, 8);
  EXPECT_EQ(per_example_grad(p, "some text"), per_example_grad(p, "some text"));
}

TEST(CanaryProbe, ZeroParamsClosedForm) {
  const NlmParams p = NlmParams::zeros(NlmConfig{});
  const CanaryProbe r = canary_probe(p, "o e g d b u", 6);
  EXPECT_NEAR(r.letter_log2 + 6 * std::log2(26.0), 6.0 * (std::log2(26.0) - std::log2(28.0)), 1e-12);
  EXPECT_NEAR(r.eos_log2, -std::log2(28.0), 1e-12);
  EXPECT_NEAR(r.ratio_to_baseline, r.total_log2_likelihood + 6 * std::log2(26.0), 1e-12);
  EXPECT_THROW(canary_probe(p, "oe g d b u", 6), InvalidArgument);
}

TEST(CanaryProbe, UniformLetterModelHasOnlyEosTerm) {
  NlmParams p = NlmParams::zeros(NlmConfig{});
  // Uniform 1/26 over letters and a fixed residual split between space and EOS.
  const double letters = std::log(1.0 / 26.0 * 0.5);
  for (int i = 0; i < 26; ++i) p.b2(i) = letters;
  p.b2(vocab::kSpace) = std::log(0.25);
  p.b2(vocab::kEos) = std::log(0.25);
  const CanaryProbe r = canary_probe(p, "a b c d e f", 6);
  EXPECT_NEAR(r.letter_log2 + 6 * std::log2(26.0), 6 * std::log2(0.5), 1e-9);
  EXPECT_NEAR(r.ratio_to_baseline, 6 * std::log2(0.5) + r.eos_log2, 1e-9);
}

TEST(CanaryProbe, OverfitModelRisesAboveBaseline) {
  NlmConfig c;
  c.hidden_dim = 32;
  TrainingCorpus corpus;
  corpus.sequences = {"q z x j v k"};
  TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 1;
  tc.learning_rate = 1e-2;
  tc.probe_interval = 300;
  const auto [p, report] = train(corpus, tc, init_params(c, 1));
  EXPECT_GT(canary_probe(p, "q z x j v k", 6).ratio_to_baseline, 10.0);
}

TEST(Checkpoint, RoundTripBitExact) {
  NlmConfig c;
  c.size_multiplier = 0.5;
  const NlmParams p = init_params(c, 77);
  const auto path = (std::filesystem::temp_directory_path() / "canary_nlm_rt.nlm").string();
  save_checkpoint(path, p);
  const NlmParams q = load_checkpoint(path);
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(q.seed, p.seed);
  EXPECT_EQ(q, p);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_checkpoint(path), InvalidArgument);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace canary_audit
