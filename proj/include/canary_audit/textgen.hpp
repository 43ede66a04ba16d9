#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "canary_audit/errors.hpp"
#include "canary_audit/rng.hpp"
#include "canary_audit/vocab.hpp"

namespace canary_audit {

struct FrequencyClass {
  int frequency = 0;
  long count = 0;
};

/// Layout of the canary and extraneous sets: CAN0 is held out, CANk is
/// inserted k times per canary, and every inserted class carries the same
/// total number of occurrences.
struct CanarySpec {
  int n_letters = 6;
  std::vector<FrequencyClass> frequency_classes = default_classes();
  long scale_divisor = 1;
  std::uint64_t seed = 0;

  static std::vector<FrequencyClass> default_classes() {
    return {{0, 16384}, {1, 16384}, {2, 8192}, {4, 4096}, {8, 2048}, {16, 1024}, {32, 512}};
  }

  long scaled_count(const FrequencyClass& fc) const { return fc.count / scale_divisor; }

  void validate() const {
    if (n_letters < 1) throw InvalidArgument("n_letters must be positive");
    if (scale_divisor < 1) throw InvalidArgument("scale_divisor must be positive");
    for (const auto& fc : frequency_classes) {
      if (fc.frequency < 0 || fc.count < 0) throw InvalidArgument("negative frequency class entry");
      if (fc.count % scale_divisor != 0) {
        throw InvalidArgument("scale_divisor " + std::to_string(scale_divisor) +
                              " does not divide class count " + std::to_string(fc.count));
      }
    }
  }
};

enum class SetKind { kCanary, kExtraneous, kFormat };

struct SequenceEntry {
  std::string text;
  int frequency = 0;

  bool operator==(const SequenceEntry&) const = default;
};

struct SequenceSet {
  std::vector<SequenceEntry> entries;
  SetKind kind = SetKind::kCanary;

  std::vector<SequenceEntry> with_frequency(int frequency) const {
    std::vector<SequenceEntry> out;
    for (const auto& e : entries) {
      if (e.frequency == frequency) out.push_back(e);
    }
    return out;
  }

  SequenceSet subset(int frequency) const { return {with_frequency(frequency), kind}; }

  /// Entries with frequency >= 1, i.e. everything that may be merged into training.
  SequenceSet inserted() const {
    SequenceSet out{{}, kind};
    for (const auto& e : entries) {
      if (e.frequency > 0) out.entries.push_back(e);
    }
    return out;
  }
};

/// True when text is exactly n single letters separated by single spaces.
inline bool matches_canary_grammar(std::string_view text, int n) {
  if (n < 1 || text.size() != static_cast<std::size_t>(2 * n - 1)) return false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (i % 2 == 0) {
      if (c < 'a' || c > 'z') return false;
    } else if (c != ' ') {
      return false;
    }
  }
  return true;
}

inline std::string sample_canary(Rng& rng, int n) {
  if (n < 1) throw InvalidArgument("canary length must be at least 1");
  std::string out;
  out.reserve(static_cast<std::size_t>(2 * n - 1));
  for (int i = 0; i < n; ++i) {
    if (i > 0) out.push_back(' ');
    out.push_back(static_cast<char>('a' + rng.uniform_below(vocab::kLetters)));
  }
  return out;
}

inline std::pair<SequenceSet, SequenceSet> build_canary_sets(const CanarySpec& spec) {
  spec.validate();
  long per_set = 0;
  for (const auto& fc : spec.frequency_classes) per_set += spec.scaled_count(fc);
  const double space = std::pow(26.0, spec.n_letters);
  if (2.0 * static_cast<double>(per_set) > 0.1 * space) {
    throw InvalidArgument("requested " + std::to_string(2 * per_set) + " distinct sequences of " +
                          std::to_string(spec.n_letters) +
                          " letters; collision probability too high, increase n_letters");
  }

  std::unordered_set<std::string> seen;
  auto draw = [&](std::uint64_t seed, SetKind kind) {
    Rng rng(seed);
    SequenceSet set;
    set.kind = kind;
    set.entries.reserve(static_cast<std::size_t>(per_set));
    for (const auto& fc : spec.frequency_classes) {
      const long count = spec.scaled_count(fc);
      for (long i = 0; i < count; ++i) {
        std::string text = sample_canary(rng, spec.n_letters);
        while (!seen.insert(text).second) text = sample_canary(rng, spec.n_letters);
        set.entries.push_back({std::move(text), fc.frequency});
      }
    }
    return set;
  };
  SequenceSet canaries = draw(derive_seed(spec.seed, "canary"), SetKind::kCanary);
  SequenceSet extraneous = draw(derive_seed(spec.seed, "extraneous"), SetKind::kExtraneous);
  return {std::move(canaries), std::move(extraneous)};
}

/// A third set with the canary grammar and layout, disjoint from `a` and `b`.
inline SequenceSet build_format_set(const CanarySpec& spec, const SequenceSet& a, const SequenceSet& b) {
  spec.validate();
  std::unordered_set<std::string> seen;
  for (const auto& e : a.entries) seen.insert(e.text);
  for (const auto& e : b.entries) seen.insert(e.text);
  Rng rng(derive_seed(spec.seed, "format"));
  SequenceSet set{{}, SetKind::kFormat};
  for (const auto& fc : spec.frequency_classes) {
    const long count = spec.scaled_count(fc);
    for (long i = 0; i < count; ++i) {
      std::string text = sample_canary(rng, spec.n_letters);
      while (!seen.insert(text).second) text = sample_canary(rng, spec.n_letters);
      set.entries.push_back({std::move(text), fc.frequency});
    }
  }
  return set;
}

/// Synthetic background text: a fixed word lexicon and a word-level Markov chain.
struct BackgroundSpec {
  int word_vocab_size = 1000;
  int markov_order = 1;
  long sentence_count = 1000;
  int min_words = 2;
  int max_words = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (word_vocab_size < 1) throw InvalidArgument("word_vocab_size must be positive");
    if (markov_order != 0 && markov_order != 1) throw InvalidArgument("markov_order must be 0 or 1");
    if (sentence_count < 1) throw InvalidArgument("sentence_count must be at least 1");
    if (min_words < 1 || max_words < min_words) throw InvalidArgument("invalid words_per_sentence range");
  }
};

struct TrainingCorpus {
  std::vector<std::string> sequences;
  std::size_t background_lines = 0;
  std::size_t canary_lines = 0;
  std::vector<std::string> warnings;
};

class BackgroundGenerator {
 public:
  static constexpr int kMinWordLen = 3;
  static constexpr int kMaxWordLen = 8;
  static constexpr int kSuccessors = 16;
  static constexpr double kSuccessorMass = 0.5;

  explicit BackgroundGenerator(const BackgroundSpec& spec) : spec_(spec) {
    spec_.validate();
    Rng rng(derive_seed(spec_.seed, "background"));

    // Letter weights fall off as 1/sqrt(1 + rank) over a shuffled alphabet.
    std::vector<int> letter_rank(vocab::kLetters);
    for (int i = 0; i < vocab::kLetters; ++i) letter_rank[static_cast<std::size_t>(i)] = i;
    rng.shuffle(letter_rank);
    std::vector<double> letter_cdf(vocab::kLetters);
    double acc = 0.0;
    for (int i = 0; i < vocab::kLetters; ++i) {
      acc += 1.0 / std::sqrt(1.0 + letter_rank[static_cast<std::size_t>(i)]);
      letter_cdf[static_cast<std::size_t>(i)] = acc;
    }

    std::unordered_set<std::string> taken;
    while (static_cast<int>(words_.size()) < spec_.word_vocab_size) {
      const int len = kMinWordLen + static_cast<int>(rng.uniform_below(kMaxWordLen - kMinWordLen + 1));
      std::string w;
      for (int i = 0; i < len; ++i) w.push_back(static_cast<char>('a' + rng.weighted(letter_cdf)));
      if (taken.insert(w).second) words_.push_back(std::move(w));
    }

    unigram_.resize(words_.size());
    unigram_cdf_.resize(words_.size());
    acc = 0.0;
    for (std::size_t i = 0; i < words_.size(); ++i) {
      unigram_[i] = 1.0 / static_cast<double>(i + 1);
      acc += unigram_[i];
      unigram_cdf_[i] = acc;
    }
    for (double& w : unigram_) w /= acc;

    if (spec_.markov_order == 1) {
      successors_.resize(words_.size());
      std::vector<double> succ_cdf(kSuccessors);
      double s = 0.0;
      for (int k = 0; k < kSuccessors; ++k) {
        s += 1.0 / (k + 1.0);
        succ_cdf[static_cast<std::size_t>(k)] = s;
      }
      successor_cdf_ = succ_cdf;
      for (auto& succ : successors_) {
        succ.resize(kSuccessors);
        for (auto& w : succ) w = rng.weighted(unigram_cdf_);
      }
    }
  }

  const std::vector<std::string>& words() const { return words_; }
  /// Stationary word weights of the order-0 chain (normalized).
  const std::vector<double>& unigram() const { return unigram_; }

  std::size_t sample_word(Rng& rng, std::size_t previous, bool has_previous) const {
    if (spec_.markov_order == 1 && has_previous && rng.uniform01() < kSuccessorMass) {
      return successors_[previous][rng.weighted(successor_cdf_)];
    }
    return rng.weighted(unigram_cdf_);
  }

  std::string sample_sentence(Rng& rng) const {
    const int span = spec_.max_words - spec_.min_words + 1;
    const int n = spec_.min_words + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(span)));
    std::string out;
    std::size_t prev = 0;
    for (int i = 0; i < n; ++i) {
      prev = sample_word(rng, prev, i > 0);
      if (i > 0) out.push_back(' ');
      out += words_[prev];
    }
    return out;
  }

  TrainingCorpus generate(long count, std::string_view stream_tag) const {
    Rng rng(derive_seed(spec_.seed, stream_tag));
    TrainingCorpus corpus;
    corpus.sequences.reserve(static_cast<std::size_t>(count));
    for (long i = 0; i < count; ++i) corpus.sequences.push_back(sample_sentence(rng));
    corpus.background_lines = corpus.sequences.size();
    return corpus;
  }

 private:
  BackgroundSpec spec_;
  std::vector<std::string> words_;
  std::vector<double> unigram_;
  std::vector<double> unigram_cdf_;
  std::vector<std::vector<std::size_t>> successors_;
  std::vector<double> successor_cdf_;
};

inline TrainingCorpus gen_background(const BackgroundSpec& spec) {
  return BackgroundGenerator(spec).generate(spec.sentence_count, "background-sentences");
}

/// Held-out sentences from the same lexicon and chain as gen_background.
inline TrainingCorpus gen_background_dev(const BackgroundSpec& spec, long count) {
  return BackgroundGenerator(spec).generate(count, "dev-sentences");
}

inline constexpr double kCanaryFractionWarning = 0.001;

inline TrainingCorpus merge_corpus(const TrainingCorpus& background, const SequenceSet& inserted,
                                   std::uint64_t seed) {
  TrainingCorpus merged;
  merged.sequences = background.sequences;
  merged.background_lines = background.sequences.size();
  for (const auto& e : inserted.entries) {
    if (e.frequency <= 0) {
      throw InvalidArgument("frequency-0 sequence '" + e.text + "' must never enter training");
    }
    for (int k = 0; k < e.frequency; ++k) merged.sequences.push_back(e.text);
    merged.canary_lines += static_cast<std::size_t>(e.frequency);
  }
  Rng rng(derive_seed(seed, "shuffle"));
  rng.shuffle(merged.sequences);
  if (!merged.sequences.empty()) {
    const double fraction =
        static_cast<double>(merged.canary_lines) / static_cast<double>(merged.sequences.size());
    if (fraction >= kCanaryFractionWarning) {
      merged.warnings.push_back("inserted sequences make up " + std::to_string(100.0 * fraction) +
                                "% of the corpus (>= 0.1%)");
    }
  }
  return merged;
}

// File formats: corpus is one sequence per line; sequence sets are
// "frequency<TAB>text" per line.

inline void write_corpus(const std::string& path, const TrainingCorpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open for writing: " + path);
  for (const auto& s : corpus.sequences) out << s << '\n';
}

inline TrainingCorpus read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open corpus: " + path);
  TrainingCorpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    for (char c : line) vocab::from_char(c);
    corpus.sequences.push_back(line);
  }
  corpus.background_lines = corpus.sequences.size();
  return corpus;
}

inline void write_sequence_set(const std::string& path, const SequenceSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open for writing: " + path);
  for (const auto& e : set.entries) out << e.frequency << '\t' << e.text << '\n';
}

inline SequenceSet read_sequence_set(const std::string& path, SetKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open sequence set: " + path);
  SequenceSet set;
  set.kind = kind;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw InvalidArgument("malformed sequence line: " + line);
    SequenceEntry e;
    try {
      e.frequency = std::stoi(line.substr(0, tab));
    } catch (const std::exception&) {
      throw InvalidArgument("malformed frequency in line: " + line);
    }
    e.text = line.substr(tab + 1);
    for (char c : e.text) vocab::from_char(c);
    set.entries.push_back(std::move(e));
  }
  return set;
}

}  // namespace canary_audit
