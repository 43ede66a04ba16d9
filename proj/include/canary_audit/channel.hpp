#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "canary_audit/errors.hpp"
#include "canary_audit/nlm.hpp"
#include "canary_audit/rng.hpp"
#include "canary_audit/textgen.hpp"
#include "canary_audit/vocab.hpp"

namespace canary_audit {

/// Simulated TTS + acoustic model: one frame per text symbol.
struct ChannelConfig {
  /// Probability mass spread uniformly over the non-target symbols.
  double epsilon = 0.1;
  /// Std of the Gaussian perturbation added to noised frames' logits.
  double noise_sigma = 2.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw InvalidArgument("epsilon must lie in (0, 1)");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
      throw InvalidArgument("noise_sigma must be finite and nonnegative");
    }
  }
};

/// T x V frame log-probabilities (V = scored symbols, columns match LM outputs).
struct EmissionLattice {
  Matrix frames;

  Eigen::Index length() const { return frames.rows(); }
  int vocab_size() const { return static_cast<int>(frames.cols()); }
};

/// Number of leading letters rendered clean; everything after is noised.
struct ObscureSpec {
  int prefix_letters = 0;

  /// ceil(n / 2) for an n-letter canary.
  static ObscureSpec half(int n_letters) { return {(n_letters + 1) / 2}; }
};

inline EmissionLattice render_clean(std::span<const Symbol> text, const ChannelConfig& config,
                                    int vocab_size = vocab::kScored) {
  config.validate();
  if (text.empty()) throw InvalidArgument("cannot render empty text");
  const double hit = std::log(1.0 - config.epsilon);
  const double miss = std::log(config.epsilon / (vocab_size - 1));
  EmissionLattice lat;
  lat.frames = Matrix::Constant(static_cast<Eigen::Index>(text.size()), vocab_size, miss);
  for (std::size_t t = 0; t < text.size(); ++t) {
    if (text[t] < 0 || text[t] >= vocab_size - 1) throw InvalidArgument("symbol cannot be rendered");
    lat.frames(static_cast<Eigen::Index>(t), text[t]) = hit;
  }
  return lat;
}

inline EmissionLattice render_clean(std::string_view text, const ChannelConfig& config) {
  const auto symbols = vocab::encode(text);
  return render_clean(symbols, config);
}

/// Index of the first noised frame: frames for the first `prefix_letters`
/// letters stay clean, together with a space that directly follows the last one.
inline std::size_t clean_prefix_frames(std::span<const Symbol> text, int prefix_letters) {
  if (prefix_letters < 0) throw InvalidArgument("prefix_letters must be nonnegative");
  int letters = 0;
  for (Symbol s : text) letters += vocab::is_letter(s) ? 1 : 0;
  if (prefix_letters > letters) {
    throw InvalidArgument("prefix_letters " + std::to_string(prefix_letters) + " exceeds the " +
                          std::to_string(letters) + " letters of the text");
  }
  if (prefix_letters == 0) return 0;
  std::size_t t = 0;
  int seen = 0;
  while (t < text.size() && seen < prefix_letters) {
    if (vocab::is_letter(text[t])) ++seen;
    ++t;
  }
  if (t < text.size() && text[t] == vocab::kSpace) ++t;
  return t;
}

/// Clean prefix, Gaussian-perturbed then renormalized suffix. The noise
/// stream is derived from the channel seed and a digest of the text.
inline EmissionLattice render_obscured(std::span<const Symbol> text, const ChannelConfig& config,
                                       const ObscureSpec& spec, int vocab_size = vocab::kScored) {
  EmissionLattice lat = render_clean(text, config, vocab_size);
  const std::size_t first_noised = clean_prefix_frames(text, spec.prefix_letters);
  if (config.noise_sigma == 0.0) return lat;
  const std::string digest_source = vocab::decode(std::vector<Symbol>(text.begin(), text.end()));
  Rng rng(derive_seed(config.seed, "channel") ^ fnv1a64(digest_source) ^
          (static_cast<std::uint64_t>(spec.prefix_letters) * 0x9e3779b97f4a7c15ULL));
  for (auto t = static_cast<Eigen::Index>(first_noised); t < lat.length(); ++t) {
    auto row = lat.frames.row(t);
    for (Eigen::Index v = 0; v < row.size(); ++v) row(v) += config.noise_sigma * rng.normal();
    const double lse = detail::log_sum_exp(row.data(), static_cast<int>(row.size()));
    row.array() -= lse;
  }
  return lat;
}

inline EmissionLattice render_obscured(std::string_view text, const ChannelConfig& config,
                                       const ObscureSpec& spec) {
  const auto symbols = vocab::encode(text);
  return render_obscured(symbols, config, spec);
}

/// Unigram stand-in for the acoustic model's internal LM, fit on AM-side
/// transcripts with add-one smoothing. EOS is counted once per line.
struct InternalLm {
  RowVector log_unigram;

  int vocab_size() const { return static_cast<int>(log_unigram.size()); }
  double log_prob(Symbol s) const { return log_unigram(s); }

  static InternalLm uniform(int vocab_size) {
    return {RowVector::Constant(vocab_size, -std::log(static_cast<double>(vocab_size)))};
  }
};

inline InternalLm fit_internal_lm(const TrainingCorpus& corpus) {
  if (corpus.sequences.empty()) throw InvalidArgument("cannot fit internal LM on an empty corpus");
  std::vector<double> counts(vocab::kScored, 1.0);
  for (const auto& line : corpus.sequences) {
    for (char c : line) counts[static_cast<std::size_t>(vocab::from_char(c))] += 1.0;
    counts[vocab::kEos] += 1.0;
  }
  double total = 0.0;
  for (double c : counts) total += c;
  InternalLm ilm{RowVector(vocab::kScored)};
  for (int s = 0; s < vocab::kScored; ++s) ilm.log_unigram(s) = std::log(counts[static_cast<std::size_t>(s)] / total);
  return ilm;
}

/// Debug dump: frame index, source symbol, then one column per scored symbol.
inline void write_lattice_csv(const std::string& path, const EmissionLattice& lat, std::span<const Symbol> text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open for writing: " + path);
  out.precision(10);
  out << "frame,symbol";
  for (int v = 0; v < lat.vocab_size(); ++v) out << ",p" << v;
  out << '\n';
  for (Eigen::Index t = 0; t < lat.length(); ++t) {
    out << t << ',' << (static_cast<std::size_t>(t) < text.size() ? text[static_cast<std::size_t>(t)] : -1);
    for (int v = 0; v < lat.vocab_size(); ++v) out << ',' << lat.frames(t, v);
    out << '\n';
  }
}

}  // namespace canary_audit
