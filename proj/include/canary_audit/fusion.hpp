#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "canary_audit/channel.hpp"
#include "canary_audit/errors.hpp"
#include "canary_audit/metrics.hpp"
#include "canary_audit/nlm.hpp"
#include "canary_audit/parallel.hpp"
#include "canary_audit/vocab.hpp"

namespace canary_audit {

/// Shallow-fusion interpolation weights: lambda1 scales the external LM
/// log-probability, lambda2 scales the subtracted internal-LM log-probability.
///
/// The LM term enters as lambda1 * log p_LM (standard shallow fusion), the
/// same log domain as the acoustic and internal-LM terms.
struct FusionWeights {
  double lambda1 = 0.0;
  double lambda2 = 0.0;

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0) || !std::isfinite(lambda1) || !std::isfinite(lambda2)) {
      throw InvalidArgument("fusion weights must be finite and nonnegative");
    }
  }

  bool operator==(const FusionWeights&) const = default;
};

struct BeamConfig {
  int width = 8;

  void validate() const {
    if (width < 1) throw InvalidArgument("beam width must be at least 1");
  }
};

struct DecodeResult {
  std::vector<Symbol> transcript;
  double fused_score = 0.0;
  double acoustic = 0.0;
  double lm = 0.0;
  double ilm = 0.0;
};

inline double combine_scores(double acoustic, double lm, double ilm, const FusionWeights& w) {
  return acoustic + w.lambda1 * lm - w.lambda2 * ilm;
}

/// Memoizes LM log-probabilities by context. Values are those of log_probs,
/// so cached and uncached scoring agree bit for bit.
class LmScorer {
 public:
  explicit LmScorer(const NlmParams& lm) : lm_(&lm) {
    const double states = std::pow(static_cast<double>(lm.config.pad() + 1), lm.config.context_len);
    cacheable_ = states < 1.8e19;
  }

  const RowVector& log_probs(std::span<const Symbol> context) {
    if (!cacheable_) {
      scratch_ = canary_audit::log_probs(*lm_, context);
      return scratch_;
    }
    std::uint64_t key = 0;
    for (Symbol s : context) key = key * static_cast<std::uint64_t>(lm_->config.pad() + 1) + static_cast<std::uint64_t>(s);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, canary_audit::log_probs(*lm_, context)).first;
    return it->second;
  }

  const NlmParams& params() const { return *lm_; }

 private:
  const NlmParams* lm_;
  bool cacheable_ = true;
  std::unordered_map<std::uint64_t, RowVector> cache_;
  RowVector scratch_;
};

namespace detail {

inline void check_fusion_inputs(const EmissionLattice& lattice, const NlmParams& lm, const InternalLm& ilm) {
  if (lattice.length() < 1) throw InvalidArgument("empty lattice");
  if (lattice.vocab_size() != lm.config.vocab_size || ilm.vocab_size() != lm.config.vocab_size) {
    throw InvalidArgument("lattice, LM and internal LM disagree on vocabulary size");
  }
}

inline void shift_context(std::vector<Symbol>& ctx, Symbol s) {
  std::rotate(ctx.begin(), ctx.begin() + 1, ctx.end());
  ctx.back() = s;
}

}  // namespace detail

inline DecodeResult fused_score_breakdown(const EmissionLattice& lattice, std::span<const Symbol> hypothesis,
                                          LmScorer& scorer, const InternalLm& ilm, const FusionWeights& w) {
  const NlmParams& lm = scorer.params();
  detail::check_fusion_inputs(lattice, lm, ilm);
  if (static_cast<Eigen::Index>(hypothesis.size()) != lattice.length()) {
    throw InvalidArgument("hypothesis length " + std::to_string(hypothesis.size()) + " != lattice length " +
                          std::to_string(lattice.length()));
  }
  const int v = lm.config.vocab_size;
  DecodeResult r;
  r.transcript.assign(hypothesis.begin(), hypothesis.end());
  std::vector<Symbol> ctx(static_cast<std::size_t>(lm.config.context_len), lm.config.pad());
  for (std::size_t t = 0; t < hypothesis.size(); ++t) {
    const Symbol y = hypothesis[t];
    if (y < 0 || y >= v) throw InvalidArgument("hypothesis symbol out of range");
    r.acoustic += lattice.frames(static_cast<Eigen::Index>(t), y);
    r.lm += scorer.log_probs(ctx)(y);
    r.ilm += ilm.log_prob(y);
    detail::shift_context(ctx, y);
  }
  r.lm += scorer.log_probs(ctx)(lm.config.eos());
  r.fused_score = combine_scores(r.acoustic, r.lm, r.ilm, w);
  return r;
}

/// sum_t emission(t, y_t) + lambda1 * [sum_t log p_LM(y_t | y_<t) + log p_LM(EOS | y)]
///   - lambda2 * sum_t log p_ILM(y_t)
inline double fused_score(const EmissionLattice& lattice, std::span<const Symbol> hypothesis, const NlmParams& lm,
                          const InternalLm& ilm, const FusionWeights& w) {
  LmScorer scorer(lm);
  return fused_score_breakdown(lattice, hypothesis, scorer, ilm, w).fused_score;
}

/// Frame-synchronous beam search over the fused objective. Ties are broken
/// toward the lexicographically smallest transcript.
inline DecodeResult beam_decode(const EmissionLattice& lattice, LmScorer& scorer, const InternalLm& ilm,
                                const FusionWeights& w, const BeamConfig& beam) {
  const NlmParams& lm = scorer.params();
  detail::check_fusion_inputs(lattice, lm, ilm);
  w.validate();
  beam.validate();
  const int v = lm.config.vocab_size;

  struct Hyp {
    std::vector<Symbol> symbols;
    std::vector<Symbol> context;
    double acoustic = 0.0, lm = 0.0, ilm = 0.0, score = 0.0;
  };
  auto better = [](const Hyp& a, const Hyp& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.symbols < b.symbols;
  };

  std::vector<Hyp> beams(1);
  beams[0].context.assign(static_cast<std::size_t>(lm.config.context_len), lm.config.pad());
  std::vector<Hyp> candidates;
  for (Eigen::Index t = 0; t < lattice.length(); ++t) {
    candidates.clear();
    candidates.reserve(beams.size() * static_cast<std::size_t>(v));
    for (const Hyp& h : beams) {
      const RowVector& lp = scorer.log_probs(h.context);
      for (Symbol y = 0; y < v; ++y) {
        Hyp c;
        c.acoustic = h.acoustic + lattice.frames(t, y);
        c.lm = h.lm + lp(y);
        c.ilm = h.ilm + ilm.log_prob(y);
        c.score = combine_scores(c.acoustic, c.lm, c.ilm, w);
        c.symbols = h.symbols;
        c.symbols.push_back(y);
        c.context = h.context;
        detail::shift_context(c.context, y);
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(candidates.size(), static_cast<std::size_t>(beam.width));
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    candidates.resize(keep);
    beams.swap(candidates);
  }
  for (Hyp& h : beams) {
    h.lm += scorer.log_probs(h.context)(lm.config.eos());
    h.score = combine_scores(h.acoustic, h.lm, h.ilm, w);
  }
  const Hyp& best = *std::min_element(beams.begin(), beams.end(), better);
  return {best.symbols, best.score, best.acoustic, best.lm, best.ilm};
}

inline DecodeResult beam_decode(const EmissionLattice& lattice, const NlmParams& lm, const InternalLm& ilm,
                                const FusionWeights& w, const BeamConfig& beam) {
  LmScorer scorer(lm);
  return beam_decode(lattice, scorer, ilm, w, beam);
}

struct DevUtterance {
  EmissionLattice lattice;
  std::string reference;
};

inline std::vector<double> linear_grid(double lo, double hi, double step) {
  std::vector<double> out;
  const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
  for (long i = 0; i <= n; ++i) out.push_back(lo + static_cast<double>(i) * step);
  return out;
}

/// Corpus WER of the fused decoder on a set of rendered utterances.
inline double decode_wer(const std::vector<DevUtterance>& dev, LmScorer& scorer, const InternalLm& ilm,
                         const FusionWeights& w, const BeamConfig& beam) {
  std::vector<EditStats> stats;
  stats.reserve(dev.size());
  for (const auto& u : dev) {
    const DecodeResult r = beam_decode(u.lattice, scorer, ilm, w, beam);
    stats.push_back(wer(split_words(u.reference), split_words(vocab::decode(r.transcript))));
  }
  return corpus_wer(stats);
}

struct TuneResult {
  FusionWeights best;
  double best_wer = 0.0;
  /// (lambda1, lambda2, wer) for every grid point, lambda1-major.
  std::vector<std::tuple<double, double, double>> table;
};

/// Exhaustive grid search for the weights minimizing corpus WER; ties go
/// to the smaller lambda1, then the smaller lambda2.
inline TuneResult tune_weights_detailed(const std::vector<DevUtterance>& dev, const NlmParams& lm,
                                        const InternalLm& ilm, std::vector<double> grid1, std::vector<double> grid2,
                                        const BeamConfig& beam = {}) {
  if (dev.empty()) throw InvalidArgument("tuning needs a nonempty dev set");
  if (grid1.empty() || grid2.empty()) throw InvalidArgument("tuning grid is empty");
  std::sort(grid1.begin(), grid1.end());
  std::sort(grid2.begin(), grid2.end());
  LmScorer scorer(lm);
  TuneResult result;
  bool first = true;
  for (double l1 : grid1) {
    for (double l2 : grid2) {
      const FusionWeights w{l1, l2};
      const double e = decode_wer(dev, scorer, ilm, w, beam);
      result.table.emplace_back(l1, l2, e);
      if (first || e < result.best_wer) {
        result.best = w;
        result.best_wer = e;
        first = false;
      }
    }
  }
  return result;
}

inline FusionWeights tune_weights(const std::vector<DevUtterance>& dev, const NlmParams& lm, const InternalLm& ilm,
                                  const std::vector<double>& grid1, const std::vector<double>& grid2,
                                  const BeamConfig& beam = {}) {
  return tune_weights_detailed(dev, lm, ilm, grid1, grid2, beam).best;
}

struct DecodeRow {
  std::string utterance_id;
  std::string reference;
  DecodeResult result;
};

inline void write_decode_csv(const std::string& path, const std::vector<DecodeRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open for writing: " + path);
  out.precision(17);
  out << "utterance_id,reference,hypothesis,fused_score,acoustic,lm,ilm\n";
  for (const auto& r : rows) {
    out << r.utterance_id << ',' << r.reference << ',' << vocab::decode(r.result.transcript) << ','
        << r.result.fused_score << ',' << r.result.acoustic << ',' << r.result.lm << ',' << r.result.ilm << '\n';
  }
}

}  // namespace canary_audit
