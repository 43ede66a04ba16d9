#include <gtest/gtest.h>

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "canary_audit/metrics.hpp"
#include "canary_audit/rng.hpp"

namespace canary_audit {
namespace {

using Words = std::vector<std::string>;

long brute_edit_distance(const Words& a, const Words& b, std::size_t i, std::size_t j,
                         std::map<std::pair<std::size_t, std::size_t>, long>& memo) {
  if (i == a.size()) return static_cast<long>(b.size() - j);
  if (j == b.size()) return static_cast<long>(a.size() - i);
  const auto key = std::make_pair(i, j);
  if (auto it = memo.find(key); it != memo.end()) return it->second;
  const long best = std::min({brute_edit_distance(a, b, i + 1, j + 1, memo) + (a[i] == b[j] ? 0 : 1),
                              brute_edit_distance(a, b, i + 1, j, memo) + 1,
                              brute_edit_distance(a, b, i, j + 1, memo) + 1});
  memo[key] = best;
  return best;
}

long brute_edit_distance(const Words& a, const Words& b) {
  std::map<std::pair<std::size_t, std::size_t>, long> memo;
  return brute_edit_distance(a, b, 0, 0, memo);
}

std::vector<Words> all_lists(std::size_t max_len, const Words& alphabet) {
  std::vector<Words> out{{}};
  std::vector<Words> frontier{{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<Words> next;
    for (const auto& w : frontier) {
      for (const auto& a : alphabet) {
        Words x = w;
        x.push_back(a);
        next.push_back(x);
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

TEST(Wer, MatchesBruteForceOnAllShortLists) {
  const auto lists = all_lists(6, {"x", "y"});
  long checked = 0;
  for (const auto& ref : lists) {
    if (ref.empty()) continue;
    for (const auto& hyp : lists) {
      const EditStats s = wer(ref, hyp);
      ASSERT_EQ(s.edits(), brute_edit_distance(ref, hyp)) << checked;
      ASSERT_EQ(static_cast<long>(ref.size()) - s.deletions + s.insertions, static_cast<long>(hyp.size()));
      ++checked;
    }
  }
  EXPECT_EQ(checked, 126L * 127L);
}

TEST(Wer, MatchesBruteForceOnRandomThreeLetterLists) {
  Rng rng(3);
  const Words alphabet{"a", "b", "c"};
  for (int trial = 0; trial < 2000; ++trial) {
    Words ref, hyp;
    const auto n = 1 + rng.uniform_below(6), m = rng.uniform_below(7);
    for (std::uint64_t i = 0; i < n; ++i) ref.push_back(alphabet[rng.uniform_below(3)]);
    for (std::uint64_t i = 0; i < m; ++i) hyp.push_back(alphabet[rng.uniform_below(3)]);
    EXPECT_EQ(wer(ref, hyp).edits(), brute_edit_distance(ref, hyp));
  }
}

TEST(Wer, EdgeCases) {
  const EditStats same = wer({"a", "b"}, {"a", "b"});
  EXPECT_EQ(same.edits(), 0);
  EXPECT_EQ(same.wer(), 0.0);
  const EditStats empty = wer({"a", "b", "c"}, {});
  EXPECT_EQ(empty.deletions, 3);
  EXPECT_EQ(empty.wer(), 1.0);
  const EditStats sub = wer({"a", "b", "c"}, {"a", "x", "c"});
  EXPECT_EQ(sub.substitutions, 1);
  EXPECT_EQ(sub.deletions + sub.insertions, 0);
  EXPECT_NEAR(sub.wer(), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(wer({}, {"a"}), InvalidArgument);
}

TEST(CorpusWer, Pooled) {
  const std::vector<EditStats> one{wer({"a", "b", "c"}, {"a", "x", "c"})};
  EXPECT_EQ(corpus_wer(one), one[0].wer());
  const std::vector<EditStats> two{wer({"a", "b", "c"}, {"a", "x", "c"}), wer({"a", "b", "c"}, {"a", "b", "c"})};
  EXPECT_NEAR(corpus_wer(two), 1.0 / 6.0, 1e-15);
  EXPECT_THROW(corpus_wer(std::vector<EditStats>{}), InvalidArgument);
}

TEST(Werr, TableArithmetic) {
  EXPECT_NEAR(werr(20.45, 24.21), -15.5, 0.05);
  EXPECT_NEAR(werr(23.50, 24.39), -3.6, 0.05);
  EXPECT_EQ(werr(12.0, 12.0), 0.0);
  EXPECT_THROW(werr(1.0, 0.0), UndefinedMetric);
}

TEST(PrecisionRecall, Counts) {
  std::vector<bool> pred, label;
  for (int i = 0; i < 8; ++i) pred.push_back(true), label.push_back(true);
  for (int i = 0; i < 2; ++i) pred.push_back(true), label.push_back(false);
  for (int i = 0; i < 8; ++i) pred.push_back(false), label.push_back(true);
  const PrecisionRecall r = precision_recall(pred, label);
  EXPECT_DOUBLE_EQ(r.precision, 0.8);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);

  const std::vector<bool> all(10, true);
  std::vector<bool> balanced(10, false);
  for (int i = 0; i < 5; ++i) balanced[static_cast<std::size_t>(i)] = true;
  const PrecisionRecall a = precision_recall(all, balanced);
  EXPECT_DOUBLE_EQ(a.precision, 0.5);
  EXPECT_DOUBLE_EQ(a.recall, 1.0);
  EXPECT_THROW(precision_recall(std::vector<bool>(10, false), balanced), UndefinedMetric);
  EXPECT_THROW(precision_recall({true}, {true, false}), InvalidArgument);
}

TEST(PrecisionRecall, IndependentPredictionsApproachHalf) {
  Rng rng(12);
  std::vector<bool> pred, label;
  for (int i = 0; i < 40000; ++i) {
    label.push_back(i % 2 == 0);
    pred.push_back(rng.uniform01() < 0.3);
  }
  const PrecisionRecall r = precision_recall(pred, label);
  EXPECT_NEAR(r.precision, 0.5, binomial_halfwidth(0.5, r.true_positives + r.false_positives));
}

TEST(BinomialHalfwidth, ThreeSigma) {
  EXPECT_NEAR(binomial_halfwidth(0.5, 1000), 3.0 * std::sqrt(0.25 / 1000.0), 1e-15);
  EXPECT_THROW(binomial_halfwidth(0.5, 0), InvalidArgument);
}

}  // namespace
}  // namespace canary_audit
