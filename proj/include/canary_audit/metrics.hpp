#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "canary_audit/errors.hpp"

namespace canary_audit {

struct EditStats {
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;
  long ref_words = 0;

  long edits() const { return substitutions + deletions + insertions; }
  double wer() const { return static_cast<double>(edits()) / static_cast<double>(ref_words); }
};

/// Unit-cost Levenshtein alignment over words. Traceback prefers
/// substitution (or match), then deletion, then insertion.
inline EditStats wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis) {
  if (reference.empty()) throw InvalidArgument("WER needs a nonempty reference");
  const std::size_t n = reference.size(), m = hypothesis.size();
  std::vector<std::vector<long>> d(n + 1, std::vector<long>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<long>(i);
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<long>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const long diag = d[i - 1][j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      d[i][j] = std::min({diag, d[i - 1][j] + 1, d[i][j - 1] + 1});
    }
  }
  EditStats s;
  s.ref_words = static_cast<long>(n);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = reference[i - 1] == hypothesis[j - 1];
      if (d[i][j] == d[i - 1][j - 1] + (same ? 0 : 1)) {
        if (!same) ++s.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      ++s.deletions;
      --i;
    } else {
      ++s.insertions;
      --j;
    }
  }
  return s;
}

/// Edit-weighted corpus WER: total edits over total reference words.
inline double corpus_wer(std::span<const EditStats> pairs) {
  if (pairs.empty()) throw InvalidArgument("corpus WER over an empty corpus");
  long edits = 0, words = 0;
  for (const auto& p : pairs) {
    edits += p.edits();
    words += p.ref_words;
  }
  return static_cast<double>(edits) / static_cast<double>(words);
}

/// Relative WER change of the canary-trained model against its extraneous-trained pair, in percent.
inline double werr(double wer_can, double wer_ext) {
  if (wer_ext == 0.0) throw UndefinedMetric("WERR undefined: extraneous-model WER is zero");
  return 100.0 * (wer_can - wer_ext) / wer_ext;
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  long true_positives = 0;
  long false_positives = 0;
  long false_negatives = 0;
  long true_negatives = 0;
};

/// predictions[i]: classifier said "member"; labels[i]: example is a trained canary.
inline PrecisionRecall precision_recall(const std::vector<bool>& predictions, const std::vector<bool>& labels) {
  if (predictions.empty() || predictions.size() != labels.size()) {
    throw InvalidArgument("predictions and labels must be nonempty and equally long");
  }
  PrecisionRecall r;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] && labels[i]) ++r.true_positives;
    else if (predictions[i]) ++r.false_positives;
    else if (labels[i]) ++r.false_negatives;
    else ++r.true_negatives;
  }
  if (r.true_positives + r.false_negatives == 0) throw InvalidArgument("no canary labels present");
  if (r.true_positives + r.false_positives == 0) {
    throw UndefinedMetric("precision undefined: no positive predictions");
  }
  r.precision = static_cast<double>(r.true_positives) / static_cast<double>(r.true_positives + r.false_positives);
  r.recall = static_cast<double>(r.true_positives) / static_cast<double>(r.true_positives + r.false_negatives);
  return r;
}

/// z-sigma half width of a binomial proportion estimate.
inline double binomial_halfwidth(double p, long n, double z = 3.0) {
  if (n <= 0) throw InvalidArgument("binomial bound needs n > 0");
  return z * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

}  // namespace canary_audit
