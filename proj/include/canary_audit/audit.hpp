#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "canary_audit/channel.hpp"
#include "canary_audit/config.hpp"
#include "canary_audit/errors.hpp"
#include "canary_audit/fusion.hpp"
#include "canary_audit/metrics.hpp"
#include "canary_audit/nlm.hpp"
#include "canary_audit/parallel.hpp"
#include "canary_audit/textgen.hpp"
#include "canary_audit/trainer.hpp"

namespace canary_audit {

/// A required input artifact (usually a checkpoint) does not exist.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream out;
  out << std::setprecision(10) << v;
  return out.str();
}

/// Clip setting: off, an absolute norm ("0.5"), or a percentile of the
/// per-example norms observed while training the unclipped model ("p1").
struct ClipLevel {
  enum class Kind { kOff, kAbsolute, kPercentile };
  Kind kind = Kind::kOff;
  double value = 0.0;

  static ClipLevel off() { return {}; }

  static ClipLevel parse(const std::string& raw) {
    if (raw == "off") return {};
    ClipLevel c;
    if (!raw.empty() && raw.front() == 'p') {
      c.kind = Kind::kPercentile;
      c.value = FlatConfig::parse_number<double>("clip level", raw.substr(1));
      if (c.value < 0.0 || c.value > 100.0) throw InvalidArgument("clip percentile must be in [0, 100]: " + raw);
    } else {
      c.kind = Kind::kAbsolute;
      c.value = FlatConfig::parse_number<double>("clip level", raw);
      if (!(c.value > 0.0)) throw InvalidArgument("clip norm must be positive: " + raw);
    }
    return c;
  }

  std::string label() const {
    switch (kind) {
      case Kind::kOff:
        return "off";
      case Kind::kPercentile:
        return "p" + format_number(value);
      case Kind::kAbsolute:
        break;
    }
    return format_number(value);
  }

  bool operator==(const ClipLevel&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;

  BackgroundSpec background{300, 1, 10000, 2, 5, 0};
  long dev_sentences = 200;
  CanarySpec canary = [] {
    CanarySpec c;
    c.scale_divisor = 64;
    return c;
  }();

  NlmConfig lm;

  long steps = 2000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  long probe_interval = 500;
  /// Per-example norms seen after this fraction of training feed percentile clip levels.
  double norm_warmup_fraction = 0.1;

  ChannelConfig channel;
  /// Noise on every frame of the renders used for the WER experiments.
  double eval_sigma = 2.0;

  BeamConfig beam;
  std::vector<double> lambda1_grid = linear_grid(0.0, 1.0, 0.1);
  std::vector<double> lambda2_grid = linear_grid(0.0, 0.5, 0.1);
  bool tuned_weights = true;
  FusionWeights explicit_weights;

  /// Clean leading letters of the membership probe; -1 means ceil(n/2).
  int prefix_letters = -1;
  long null_examples = 500;
  double null_tolerance = 0.1;
  /// Cap on examples per side and frequency class (0 = all).
  long max_per_class = 0;

  std::vector<double> size_multipliers{0.5, 1.0, 2.0};
  std::vector<ClipLevel> clip_levels{ClipLevel::off(), ClipLevel::parse("p1")};
  ClipLevel mia_clip = ClipLevel::parse("p1");
  double reference_size = 1.0;
  /// Train the baseline on background plus a disjoint canary-format set.
  bool baseline_format_set = true;
  int threads = 0;

  ObscureSpec mia_obscure() const {
    return prefix_letters < 0 ? ObscureSpec::half(canary.n_letters) : ObscureSpec{prefix_letters};
  }

  ChannelConfig eval_channel() const {
    ChannelConfig c = channel;
    c.noise_sigma = eval_sigma;
    return c;
  }

  static const std::set<std::string>& sections() {
    static const std::set<std::string> s{"corpus", "canary", "lm", "train", "channel", "fusion", "mia", "audit"};
    return s;
  }

  static ExperimentConfig from_flat(FlatConfig flat) {
    ExperimentConfig c;
    flat.take_number("audit.seed", c.seed);
    flat.take_number("corpus.word_vocab_size", c.background.word_vocab_size);
    flat.take_number("corpus.markov_order", c.background.markov_order);
    flat.take_number("corpus.sentence_count", c.background.sentence_count);
    flat.take_number("corpus.min_words", c.background.min_words);
    flat.take_number("corpus.max_words", c.background.max_words);
    flat.take_number("corpus.dev_sentences", c.dev_sentences);
    flat.take_number("canary.n_letters", c.canary.n_letters);
    flat.take_number("canary.scale_divisor", c.canary.scale_divisor);
    flat.take_number("lm.context_len", c.lm.context_len);
    flat.take_number("lm.embed_dim", c.lm.embed_dim);
    flat.take_number("lm.hidden_dim", c.lm.hidden_dim);
    flat.take_number("lm.size_multiplier", c.lm.size_multiplier);
    flat.take_number("train.steps", c.steps);
    flat.take_number("train.batch_size", c.batch_size);
    flat.take_number("train.learning_rate", c.learning_rate);
    flat.take_number("train.probe_interval", c.probe_interval);
    flat.take_number("train.norm_warmup_fraction", c.norm_warmup_fraction);
    flat.take_number("channel.epsilon", c.channel.epsilon);
    flat.take_number("channel.noise_sigma", c.channel.noise_sigma);
    flat.take_number("channel.eval_sigma", c.eval_sigma);
    flat.take_number("fusion.beam_width", c.beam.width);
    flat.take_list("fusion.lambda1_grid", c.lambda1_grid);
    flat.take_list("fusion.lambda2_grid", c.lambda2_grid);
    std::string source;
    if (flat.take("fusion.weights", source)) {
      if (source == "tuned") c.tuned_weights = true;
      else if (source == "explicit") c.tuned_weights = false;
      else throw InvalidArgument("fusion.weights must be 'tuned' or 'explicit'");
    }
    flat.take_number("fusion.lambda1", c.explicit_weights.lambda1);
    flat.take_number("fusion.lambda2", c.explicit_weights.lambda2);
    flat.take_number("mia.prefix_letters", c.prefix_letters);
    flat.take_number("mia.null_examples", c.null_examples);
    flat.take_number("mia.null_tolerance", c.null_tolerance);
    flat.take_number("mia.max_per_class", c.max_per_class);
    flat.take_list("audit.size_multipliers", c.size_multipliers);
    std::vector<std::string> levels;
    flat.take_string_list("audit.clip_levels", levels);
    if (!levels.empty()) {
      c.clip_levels.clear();
      for (const auto& l : levels) c.clip_levels.push_back(ClipLevel::parse(l));
    }
    std::string mia_clip;
    if (flat.take("audit.mia_clip", mia_clip)) c.mia_clip = ClipLevel::parse(mia_clip);
    flat.take_number("audit.reference_size", c.reference_size);
    std::string format_set;
    if (flat.take("audit.baseline_format_set", format_set)) {
      if (format_set == "on") c.baseline_format_set = true;
      else if (format_set == "off") c.baseline_format_set = false;
      else throw InvalidArgument("audit.baseline_format_set must be 'on' or 'off'");
    }
    flat.check_all_used(sections());
    c.validate();
    return c;
  }

  static ExperimentConfig load(const std::string& path) { return from_flat(FlatConfig::load(path)); }

  void validate() const {
    background.validate();
    canary.validate();
    lm.validate();
    channel.validate();
    beam.validate();
    explicit_weights.validate();
    if (dev_sentences < 1) throw InvalidArgument("corpus.dev_sentences must be at least 1");
    if (steps < 1 || batch_size < 1 || !(learning_rate > 0.0) || probe_interval < 1) {
      throw InvalidArgument("invalid train section");
    }
    if (norm_warmup_fraction < 0.0 || norm_warmup_fraction >= 1.0) {
      throw InvalidArgument("train.norm_warmup_fraction must be in [0, 1)");
    }
    if (!(eval_sigma >= 0.0)) throw InvalidArgument("channel.eval_sigma must be nonnegative");
    if (lambda1_grid.empty() || lambda2_grid.empty()) throw InvalidArgument("fusion grids must be nonempty");
    for (double l : lambda1_grid) FusionWeights{l, 0.0}.validate();
    for (double l : lambda2_grid) FusionWeights{0.0, l}.validate();
    if (prefix_letters > canary.n_letters) throw InvalidArgument("mia.prefix_letters exceeds canary length");
    if (null_examples < 1 || !(null_tolerance > 0.0)) throw InvalidArgument("invalid null calibration settings");
    if (size_multipliers.empty()) throw InvalidArgument("audit.size_multipliers is empty");
    for (double m : size_multipliers) {
      if (!(m > 0.0)) throw InvalidArgument("size multipliers must be positive");
    }
    if (clip_levels.empty()) throw InvalidArgument("audit.clip_levels is empty");
    if (!(reference_size > 0.0)) throw InvalidArgument("audit.reference_size must be positive");
  }

  /// Every setting in config-file form; loading it back reproduces this config.
  std::string to_text() const {
    auto list = [](const std::vector<double>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_number(v[i]);
      return s;
    };
    std::string levels;
    for (std::size_t i = 0; i < clip_levels.size(); ++i) levels += (i ? ", " : "") + clip_levels[i].label();
    std::ostringstream o;
    o << "audit.seed = " << seed << '\n'
      << "audit.size_multipliers = " << list(size_multipliers) << '\n'
      << "audit.clip_levels = " << levels << '\n'
      << "audit.mia_clip = " << mia_clip.label() << '\n'
      << "audit.reference_size = " << format_number(reference_size) << '\n'
      << "audit.baseline_format_set = " << (baseline_format_set ? "on" : "off") << '\n'
      << "corpus.word_vocab_size = " << background.word_vocab_size << '\n'
      << "corpus.markov_order = " << background.markov_order << '\n'
      << "corpus.sentence_count = " << background.sentence_count << '\n'
      << "corpus.min_words = " << background.min_words << '\n'
      << "corpus.max_words = " << background.max_words << '\n'
      << "corpus.dev_sentences = " << dev_sentences << '\n'
      << "canary.n_letters = " << canary.n_letters << '\n'
      << "canary.scale_divisor = " << canary.scale_divisor << '\n'
      << "lm.context_len = " << lm.context_len << '\n'
      << "lm.embed_dim = " << lm.embed_dim << '\n'
      << "lm.hidden_dim = " << lm.hidden_dim << '\n'
      << "lm.size_multiplier = " << format_number(lm.size_multiplier) << '\n'
      << "train.steps = " << steps << '\n'
      << "train.batch_size = " << batch_size << '\n'
      << "train.learning_rate = " << format_number(learning_rate) << '\n'
      << "train.probe_interval = " << probe_interval << '\n'
      << "train.norm_warmup_fraction = " << format_number(norm_warmup_fraction) << '\n'
      << "channel.epsilon = " << format_number(channel.epsilon) << '\n'
      << "channel.noise_sigma = " << format_number(channel.noise_sigma) << '\n'
      << "channel.eval_sigma = " << format_number(eval_sigma) << '\n'
      << "fusion.beam_width = " << beam.width << '\n'
      << "fusion.lambda1_grid = " << list(lambda1_grid) << '\n'
      << "fusion.lambda2_grid = " << list(lambda2_grid) << '\n'
      << "fusion.weights = " << (tuned_weights ? "tuned" : "explicit") << '\n'
      << "fusion.lambda1 = " << format_number(explicit_weights.lambda1) << '\n'
      << "fusion.lambda2 = " << format_number(explicit_weights.lambda2) << '\n'
      << "mia.prefix_letters = " << prefix_letters << '\n'
      << "mia.null_examples = " << null_examples << '\n'
      << "mia.null_tolerance = " << format_number(null_tolerance) << '\n'
      << "mia.max_per_class = " << max_per_class << '\n';
    return o.str();
  }
};

enum class CorpusKind { kBaseline, kCanary, kExtraneous };

inline std::string corpus_kind_name(CorpusKind k) {
  switch (k) {
    case CorpusKind::kCanary:
      return "CAN";
    case CorpusKind::kExtraneous:
      return "EXT";
    case CorpusKind::kBaseline:
      break;
  }
  return "baseline";
}

inline CorpusKind parse_corpus_kind(const std::string& s) {
  if (s == "CAN" || s == "can") return CorpusKind::kCanary;
  if (s == "EXT" || s == "ext") return CorpusKind::kExtraneous;
  if (s == "baseline") return CorpusKind::kBaseline;
  throw InvalidArgument("unknown model corpus '" + s + "' (expected CAN, EXT or baseline)");
}

struct ModelSpec {
  CorpusKind corpus = CorpusKind::kCanary;
  double size_multiplier = 1.0;
  ClipLevel clip;

  std::string tag() const {
    return corpus_kind_name(corpus) + "-m" + format_number(size_multiplier) + "-" + clip.label();
  }
};

/// A trained LM with everything the fused recognizer needs.
struct ModelBundle {
  ModelSpec spec;
  std::string tag;
  NlmParams params;
  InternalLm ilm;
  FusionWeights weights;
  double dev_wer = 0.0;
  /// Resolved clip norm; 0 when clipping is off.
  double clip_norm = 0.0;
  double fraction_clipped = 0.0;
  /// Everything that shaped training except which sequence set was merged.
  std::uint64_t pair_fingerprint = 0;
  /// 0th..100th percentiles of pre-clip per-example norms after warmup.
  std::vector<double> norm_percentiles;
};

struct ReportRow {
  std::string experiment;
  std::string model_tag;
  std::string metric;
  std::string key;
  double value = 0.0;
};

/// Long-format result table; every WER cell has a decode CSV beside it.
struct AuditReport {
  std::vector<ReportRow> rows;

  void add(std::string experiment, std::string tag, std::string metric, std::string key, double value) {
    rows.push_back({std::move(experiment), std::move(tag), std::move(metric), std::move(key), value});
  }

  std::optional<double> find(const std::string& tag, const std::string& metric, const std::string& key) const {
    for (const auto& r : rows) {
      if (r.model_tag == tag && r.metric == metric && r.key == key) return r.value;
    }
    return std::nullopt;
  }

  double at(const std::string& tag, const std::string& metric, const std::string& key) const {
    const auto v = find(tag, metric, key);
    if (!v) throw InvalidArgument("report has no cell (" + tag + ", " + metric + ", " + key + ")");
    return *v;
  }

  void append(const AuditReport& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }
};

inline void write_report_csv(const std::string& path, const AuditReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open for writing: " + path);
  out << "experiment,model_tag,metric,key,value\n";
  for (const auto& r : report.rows) {
    out << r.experiment << ',' << r.model_tag << ',' << r.metric << ',' << r.key << ',' << format_number(r.value)
        << '\n';
  }
}

inline AuditReport read_report_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open report fragment: " + path);
  AuditReport report;
  std::string line;
  std::getline(in, line);
  if (line != "experiment,model_tag,metric,key,value") throw InvalidArgument("bad report header in " + path);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw InvalidArgument("malformed report row in " + path + ": " + line);
    const double v = f[4] == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[4]);
    report.add(f[0], f[1], f[2], f[3], v);
  }
  return report;
}

inline std::string class_key(int frequency) { return "CAN" + std::to_string(frequency); }

enum class ModelPolicy { kTrainIfMissing, kRequireExisting };

/// Shared state of one audit run rooted at an output directory: generated
/// data, rendered dev set, and the trained-model store (memory + checkpoints).
class AuditSession {
 public:
  AuditSession(ExperimentConfig config, std::filesystem::path out_dir)
      : config_(std::move(config)), out_(std::move(out_dir)) {
    config_.validate();
    std::filesystem::create_directories(out_ / "checkpoints");
    std::filesystem::create_directories(out_ / "train");
    std::filesystem::create_directories(out_ / "decodes");
    config_.threads = std::max(config_.threads, threads_from_env());

    BackgroundSpec bs = config_.background;
    bs.seed = config_.seed;
    BackgroundGenerator gen(bs);
    background_ = gen.generate(bs.sentence_count, "background-sentences");
    dev_ = gen.generate(config_.dev_sentences, "dev-sentences");

    CanarySpec cs = config_.canary;
    cs.seed = config_.seed;
    auto sets = build_canary_sets(cs);
    canaries_ = std::move(sets.first);
    extraneous_ = std::move(sets.second);
    format_ = build_format_set(cs, canaries_, extraneous_);

    ilm_ = fit_internal_lm(background_);
    const ChannelConfig eval = eval_channel();
    for (const auto& s : dev_.sequences) dev_lattices_.push_back({render_obscured(s, eval, ObscureSpec{0}), s});
  }

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out_dir() const { return out_; }
  const TrainingCorpus& background() const { return background_; }
  const TrainingCorpus& dev() const { return dev_; }
  const SequenceSet& canaries() const { return canaries_; }
  const SequenceSet& extraneous() const { return extraneous_; }
  const SequenceSet& format_set() const { return format_; }
  const InternalLm& ilm() const { return ilm_; }
  const std::vector<DevUtterance>& dev_lattices() const { return dev_lattices_; }

  ChannelConfig eval_channel() const {
    ChannelConfig c = config_.eval_channel();
    c.seed = config_.seed;
    return c;
  }

  ChannelConfig mia_channel() const {
    ChannelConfig c = config_.channel;
    c.seed = config_.seed;
    return c;
  }

  std::vector<int> frequencies() const {
    std::vector<int> f;
    for (const auto& fc : config_.canary.frequency_classes) f.push_back(fc.frequency);
    return f;
  }

  TrainingCorpus corpus_for(CorpusKind kind) const {
    switch (kind) {
      case CorpusKind::kCanary:
        return merge_corpus(background_, canaries_.inserted(), config_.seed);
      case CorpusKind::kExtraneous:
        return merge_corpus(background_, extraneous_.inserted(), config_.seed);
      case CorpusKind::kBaseline:
        break;
    }
    if (config_.baseline_format_set) return merge_corpus(background_, format_.inserted(), config_.seed);
    return merge_corpus(background_, SequenceSet{}, config_.seed);
  }

  NlmConfig lm_config(double size_multiplier) const {
    NlmConfig c = config_.lm;
    c.size_multiplier = size_multiplier;
    return c;
  }

  std::filesystem::path checkpoint_path(const std::string& tag) const { return out_ / "checkpoints" / (tag + ".nlm"); }
  std::filesystem::path meta_path(const std::string& tag) const { return out_ / "checkpoints" / (tag + ".meta"); }

  /// Clip norm for a level at a given model size. Percentile levels read the
  /// norm distribution of the unclipped canary-trained model of that size.
  double resolve_clip(const ClipLevel& level, double size_multiplier, ModelPolicy policy) {
    switch (level.kind) {
      case ClipLevel::Kind::kOff:
        return 0.0;
      case ClipLevel::Kind::kAbsolute:
        return level.value;
      case ClipLevel::Kind::kPercentile:
        break;
    }
    const ModelBundle& ref = model({CorpusKind::kCanary, size_multiplier, ClipLevel::off()}, policy);
    const auto lo = static_cast<std::size_t>(std::floor(level.value));
    const auto hi = std::min<std::size_t>(lo + 1, 100);
    const double frac = level.value - static_cast<double>(lo);
    return ref.norm_percentiles[lo] + frac * (ref.norm_percentiles[hi] - ref.norm_percentiles[lo]);
  }

  TrainConfig train_config(double clip_norm) const {
    TrainConfig tc;
    tc.steps = config_.steps;
    tc.batch_size = config_.batch_size;
    tc.learning_rate = config_.learning_rate;
    tc.seed = config_.seed;
    tc.probe_interval = config_.probe_interval;
    tc.n_letters = config_.canary.n_letters;
    tc.threads = config_.threads;
    tc.record_norms_after = static_cast<long>(std::floor(config_.norm_warmup_fraction * static_cast<double>(tc.steps)));
    if (clip_norm > 0.0) tc.clip_norm = clip_norm;
    for (int f : frequencies()) tc.probe_sets.push_back({class_key(f), canaries_.subset(f)});
    return tc;
  }

  std::uint64_t pair_fingerprint(const ModelSpec& spec, double clip_norm) const {
    std::ostringstream o;
    o << config_.to_text() << "size=" << format_number(spec.size_multiplier) << " clip=" << std::setprecision(17)
      << clip_norm;
    return fnv1a64(o.str());
  }

  /// Trained and fusion-tuned model for `spec`, from memory, from the
  /// checkpoint directory, or (policy permitting) trained now.
  const ModelBundle& model(const ModelSpec& spec, ModelPolicy policy = ModelPolicy::kTrainIfMissing) {
    const std::string tag = spec.tag();
    if (auto it = models_.find(tag); it != models_.end()) return *it->second;
    const double clip_norm = resolve_clip(spec.clip, spec.size_multiplier, policy);

    auto bundle = std::make_unique<ModelBundle>();
    bundle->spec = spec;
    bundle->tag = tag;
    bundle->ilm = ilm_;
    bundle->clip_norm = clip_norm;
    bundle->pair_fingerprint = pair_fingerprint(spec, clip_norm);

    const auto ckpt = checkpoint_path(tag);
    if (std::filesystem::exists(ckpt) && std::filesystem::exists(meta_path(tag))) {
      bundle->params = load_checkpoint(ckpt.string());
      if (!(bundle->params.config == lm_config(spec.size_multiplier))) {
        throw InvalidState("checkpoint " + ckpt.string() + " does not match the configured LM");
      }
      read_meta(*bundle);
    } else if (policy == ModelPolicy::kRequireExisting) {
      throw MissingArtifact("missing trained model checkpoint: " + ckpt.string() + " (train it with train-lm)");
    } else {
      train_model(*bundle);
    }
    return *models_.emplace(tag, std::move(bundle)).first->second;
  }

  /// Trains (never loads) and persists a model; used by the train-lm command.
  const ModelBundle& train_and_store(const ModelSpec& spec) {
    const std::string tag = spec.tag();
    models_.erase(tag);
    std::filesystem::remove(checkpoint_path(tag));
    std::filesystem::remove(meta_path(tag));
    return model(spec);
  }

  void write_fragment(const std::string& name, const AuditReport& report) const {
    write_report_csv((out_ / (name + ".csv")).string(), report);
  }

  /// Corpus WER of a bundle on rendered sequences, with the decode CSV stored
  /// under decodes/<experiment>/.
  double decode_wer_logged(const ModelBundle& bundle, const FusionWeights& weights, const std::string& tag,
                           const std::vector<SequenceEntry>& entries, const std::string& set_name,
                           const std::string& experiment) {
    const ChannelConfig eval = eval_channel();
    std::vector<DevUtterance> utts;
    for (const auto& e : entries) utts.push_back({render_obscured(e.text, eval, ObscureSpec{0}), e.text});
    return decode_wer_logged(bundle, weights, tag, utts, set_name, experiment);
  }

  double decode_wer_logged(const ModelBundle& bundle, const FusionWeights& weights, const std::string& tag,
                           const std::vector<DevUtterance>& utts, const std::string& set_name,
                           const std::string& experiment) {
    if (utts.empty()) return std::numeric_limits<double>::quiet_NaN();
    LmScorer scorer(bundle.params);
    std::vector<DecodeRow> rows(utts.size());
    std::vector<EditStats> stats(utts.size());
    for (std::size_t i = 0; i < utts.size(); ++i) {
      rows[i] = {set_name + "-" + std::to_string(i), utts[i].reference,
                 beam_decode(utts[i].lattice, scorer, bundle.ilm, weights, config_.beam)};
      stats[i] = wer(split_words(utts[i].reference), split_words(vocab::decode(rows[i].result.transcript)));
    }
    const auto dir = out_ / "decodes" / experiment;
    std::filesystem::create_directories(dir);
    write_decode_csv((dir / (tag + "__" + set_name + ".csv")).string(), rows);
    return corpus_wer(stats);
  }

  /// Membership decisions (exact top-1 match on the obscured render) for a
  /// list of texts, logged as a decode CSV.
  std::vector<bool> mia_decisions(const ModelBundle& bundle, const std::vector<SequenceEntry>& entries,
                                  const std::string& set_name, const std::string& experiment);

  const std::optional<AuditReport>& null_report() const { return null_report_; }
  void set_null_report(AuditReport r) { null_report_ = std::move(r); }

 private:
  void train_model(ModelBundle& b) {
    const TrainingCorpus corpus = corpus_for(b.spec.corpus);
    const TrainConfig tc = train_config(b.clip_norm);
    const NlmParams init = init_params(lm_config(b.spec.size_multiplier), config_.seed);
    TrainReport report;
    try {
      std::tie(b.params, report) = train(corpus, tc, init);
    } catch (const TrainingDiverged& e) {
      throw TrainingDiverged(b.tag + ": " + e.what(), e.last_good_step());
    }
    write_train_report_csv((out_ / "train" / (b.tag + ".csv")).string(), report);
    b.fraction_clipped = report.overall_fraction_clipped;
    b.norm_percentiles.resize(101);
    std::vector<double> norms = report.observed_norms;
    if (norms.empty()) norms.push_back(0.0);
    std::sort(norms.begin(), norms.end());
    for (int q = 0; q <= 100; ++q) {
      const auto idx = static_cast<std::size_t>(std::floor(q / 100.0 * static_cast<double>(norms.size() - 1)));
      b.norm_percentiles[static_cast<std::size_t>(q)] = norms[idx];
    }
    if (config_.tuned_weights) {
      const TuneResult tr = tune_weights_detailed(dev_lattices_, b.params, b.ilm, config_.lambda1_grid,
                                                  config_.lambda2_grid, config_.beam);
      b.weights = tr.best;
      b.dev_wer = tr.best_wer;
    } else {
      b.weights = config_.explicit_weights;
      LmScorer scorer(b.params);
      b.dev_wer = decode_wer(dev_lattices_, scorer, b.ilm, b.weights, config_.beam);
    }
    save_checkpoint(checkpoint_path(b.tag).string(), b.params);
    write_meta(b);
  }

  void write_meta(const ModelBundle& b) const {
    std::ofstream out(meta_path(b.tag), std::ios::binary);
    out << std::setprecision(17);
    out << "lambda1 " << b.weights.lambda1 << "\nlambda2 " << b.weights.lambda2 << "\ndev_wer " << b.dev_wer
        << "\nclip_norm " << b.clip_norm << "\nfraction_clipped " << b.fraction_clipped << "\nfingerprint "
        << b.pair_fingerprint << "\nnorm_percentiles";
    for (double v : b.norm_percentiles) out << ' ' << v;
    out << '\n';
  }

  void read_meta(ModelBundle& b) const {
    std::ifstream in(meta_path(b.tag), std::ios::binary);
    std::string key;
    std::uint64_t fingerprint = 0;
    double clip = 0.0;
    while (in >> key) {
      if (key == "lambda1") in >> b.weights.lambda1;
      else if (key == "lambda2") in >> b.weights.lambda2;
      else if (key == "dev_wer") in >> b.dev_wer;
      else if (key == "clip_norm") in >> clip;
      else if (key == "fraction_clipped") in >> b.fraction_clipped;
      else if (key == "fingerprint") in >> fingerprint;
      else if (key == "norm_percentiles") {
        b.norm_percentiles.resize(101);
        for (double& v : b.norm_percentiles) in >> v;
      } else {
        throw InvalidState("unknown field in " + meta_path(b.tag).string() + ": " + key);
      }
    }
    if (fingerprint != b.pair_fingerprint) {
      throw InvalidState("checkpoint " + b.tag + " was trained under a different configuration");
    }
  }

  ExperimentConfig config_;
  std::filesystem::path out_;
  TrainingCorpus background_;
  TrainingCorpus dev_;
  SequenceSet canaries_;
  SequenceSet extraneous_;
  SequenceSet format_;
  InternalLm ilm_;
  std::vector<DevUtterance> dev_lattices_;
  std::map<std::string, std::unique_ptr<ModelBundle>> models_;
  std::optional<AuditReport> null_report_;
};

struct MiaConfig {
  ObscureSpec obscure;
  ChannelConfig channel;
  BeamConfig beam;
  /// Replaces the bundle's tuned weights when set.
  std::optional<FusionWeights> weights;
};

/// Label-only membership test: obscure the suffix, decode, and call the
/// example a member iff the top-1 transcript reproduces it exactly.
inline bool mia_predict(const ModelBundle& bundle, LmScorer& scorer, std::string_view example, const MiaConfig& cfg,
                        DecodeResult* decoded = nullptr) {
  const auto symbols = vocab::encode(example);
  const EmissionLattice lat = render_obscured(symbols, cfg.channel, cfg.obscure);
  DecodeResult r = beam_decode(lat, scorer, bundle.ilm, cfg.weights.value_or(bundle.weights), cfg.beam);
  std::vector<Symbol> stripped;
  for (Symbol s : r.transcript) {
    if (s != vocab::kEos) stripped.push_back(s);
  }
  const bool member = stripped == symbols;
  if (decoded) *decoded = std::move(r);
  return member;
}

inline bool mia_predict(const ModelBundle& bundle, std::string_view example, const MiaConfig& cfg) {
  LmScorer scorer(bundle.params);
  return mia_predict(bundle, scorer, example, cfg);
}

inline std::vector<bool> AuditSession::mia_decisions(const ModelBundle& bundle,
                                                     const std::vector<SequenceEntry>& entries,
                                                     const std::string& set_name, const std::string& experiment) {
  const MiaConfig cfg{config_.mia_obscure(), mia_channel(), config_.beam, std::nullopt};
  LmScorer scorer(bundle.params);
  std::vector<bool> out(entries.size());
  std::vector<DecodeRow> rows(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!matches_canary_grammar(entries[i].text, config_.canary.n_letters)) {
      throw InvalidArgument("membership probe expects canary-format text: '" + entries[i].text + "'");
    }
    rows[i].utterance_id = set_name + "-" + std::to_string(i);
    rows[i].reference = entries[i].text;
    out[i] = mia_predict(bundle, scorer, entries[i].text, cfg, &rows[i].result);
  }
  const auto dir = out_ / "decodes" / experiment;
  std::filesystem::create_directories(dir);
  write_decode_csv((dir / (bundle.tag + "__" + set_name + ".csv")).string(), rows);
  return out;
}

namespace detail {

inline void check_pair(const ModelBundle& can, const ModelBundle& ext) {
  if (can.pair_fingerprint != ext.pair_fingerprint) {
    throw InvalidState("models " + can.tag + " and " + ext.tag + " differ in more than the merged sequence set");
  }
}

inline std::vector<SequenceEntry> capped(std::vector<SequenceEntry> v, long cap) {
  if (cap > 0 && static_cast<long>(v.size()) > cap) v.resize(static_cast<std::size_t>(cap));
  return v;
}

}  // namespace detail

inline void add_precision_recall(AuditReport& report, const std::string& exp, const std::string& tag,
                                 const std::string& key, const std::vector<bool>& predictions,
                                 const std::vector<bool>& labels) {
  long positives = 0;
  for (bool p : predictions) positives += p ? 1 : 0;
  double precision = std::numeric_limits<double>::quiet_NaN(), recall = 0.0;
  if (positives > 0) {
    const PrecisionRecall pr = precision_recall(predictions, labels);
    precision = pr.precision;
    recall = pr.recall;
  }
  report.add(exp, tag, "precision", key, precision);
  report.add(exp, tag, "recall", key, recall);
  report.add(exp, tag, "positives", key, static_cast<double>(positives));
}

/// Null calibration: precision of the classifier on a model trained on
/// neither set must sit at chance.
inline AuditReport run_null_calibration(AuditSession& s, ModelPolicy policy = ModelPolicy::kTrainIfMissing) {
  const auto& cfg = s.config();
  const ModelBundle& baseline = s.model({CorpusKind::kBaseline, cfg.reference_size, ClipLevel::off()}, policy);
  const auto n = static_cast<std::size_t>(cfg.null_examples);
  std::vector<SequenceEntry> pos(s.canaries().entries.begin(),
                                 s.canaries().entries.begin() + static_cast<std::ptrdiff_t>(std::min(n, s.canaries().entries.size())));
  std::vector<SequenceEntry> neg(s.extraneous().entries.begin(),
                                 s.extraneous().entries.begin() + static_cast<std::ptrdiff_t>(std::min(n, s.extraneous().entries.size())));
  const auto p1 = s.mia_decisions(baseline, pos, "null-canary", "mia");
  const auto p2 = s.mia_decisions(baseline, neg, "null-extraneous", "mia");
  std::vector<bool> predictions(p1), labels(p1.size(), true);
  predictions.insert(predictions.end(), p2.begin(), p2.end());
  labels.insert(labels.end(), p2.size(), false);
  AuditReport report;
  add_precision_recall(report, "mia", baseline.tag, "null", predictions, labels);
  const double precision = report.at(baseline.tag, "precision", "null");
  if (std::isnan(precision) || std::abs(precision - 0.5) > cfg.null_tolerance) {
    throw CalibrationError("null calibration failed: baseline precision " + format_number(precision) +
                           " is not within " + format_number(cfg.null_tolerance) +
                           " of 0.5; the channel settings let the classifier fake memorization");
  }
  return report;
}

/// Runs the null calibration once per session; every audit calls this first.
inline const AuditReport& ensure_null_calibration(AuditSession& s,
                                                  ModelPolicy policy = ModelPolicy::kTrainIfMissing) {
  if (!s.null_report()) s.set_null_report(run_null_calibration(s, policy));
  return *s.null_report();
}

/// WER on every frequency class for canary- and extraneous-trained models of
/// each configured size, plus an acoustic-model-only row.
inline AuditReport run_memorization_audit(AuditSession& s) {
  const auto& cfg = s.config();
  ensure_null_calibration(s);
  AuditReport report;
  const std::string exp = "memorization";
  for (double size : cfg.size_multipliers) {
    const ModelBundle& can = s.model({CorpusKind::kCanary, size, ClipLevel::off()});
    const ModelBundle& ext = s.model({CorpusKind::kExtraneous, size, ClipLevel::off()});
    detail::check_pair(can, ext);
    for (const ModelBundle* b : {&can, &ext}) {
      report.add(exp, b->tag, "lambda1", "", b->weights.lambda1);
      report.add(exp, b->tag, "lambda2", "", b->weights.lambda2);
      report.add(exp, b->tag, "parameters", "", static_cast<double>(b->params.size()));
      report.add(exp, b->tag, "wer", "dev", s.decode_wer_logged(*b, b->weights, b->tag, s.dev_lattices(), "dev", exp));
      for (int f : s.frequencies()) {
        const auto entries = s.canaries().with_frequency(f);
        report.add(exp, b->tag, "wer", class_key(f),
                   s.decode_wer_logged(*b, b->weights, b->tag, entries, class_key(f), exp));
        double bits = 0.0;
        for (const auto& e : entries) bits += canary_probe(b->params, e.text, cfg.canary.n_letters).ratio_to_baseline;
        report.add(exp, b->tag, "probe_bits", class_key(f), entries.empty() ? 0.0 : bits / static_cast<double>(entries.size()));
      }
    }
  }
  // Acoustic model alone: the LM and internal-LM weights are zero.
  const ModelBundle& any = s.model({CorpusKind::kCanary, cfg.size_multipliers.front(), ClipLevel::off()});
  const FusionWeights none{};
  report.add(exp, "AM-only", "wer", "dev", s.decode_wer_logged(any, none, "AM-only", s.dev_lattices(), "dev", exp));
  for (int f : s.frequencies()) {
    report.add(exp, "AM-only", "wer", class_key(f),
               s.decode_wer_logged(any, none, "AM-only", s.canaries().with_frequency(f), class_key(f), exp));
  }
  return report;
}

/// Paired CAN/EXT models per clip level; WERR per frequency class and dev WER per model.
inline AuditReport run_clip_sweep(AuditSession& s) {
  const auto& cfg = s.config();
  ensure_null_calibration(s);
  AuditReport report;
  const std::string exp = "clip";
  for (const ClipLevel& level : cfg.clip_levels) {
    const ModelBundle& can = s.model({CorpusKind::kCanary, cfg.reference_size, level});
    const ModelBundle& ext = s.model({CorpusKind::kExtraneous, cfg.reference_size, level});
    detail::check_pair(can, ext);
    const std::string row_tag = "clip-" + level.label();
    report.add(exp, row_tag, "clip_norm", "", can.clip_norm);
    for (const ModelBundle* b : {&can, &ext}) {
      report.add(exp, b->tag, "fraction_clipped", "", b->fraction_clipped);
      report.add(exp, b->tag, "wer", "dev", s.decode_wer_logged(*b, b->weights, b->tag, s.dev_lattices(), "dev", exp));
    }
    for (int f : s.frequencies()) {
      const auto entries = s.canaries().with_frequency(f);
      const double wc = s.decode_wer_logged(can, can.weights, can.tag, entries, class_key(f), exp);
      const double we = s.decode_wer_logged(ext, ext.weights, ext.tag, entries, class_key(f), exp);
      report.add(exp, can.tag, "wer", class_key(f), wc);
      report.add(exp, ext.tag, "wer", class_key(f), we);
      double w = std::numeric_limits<double>::quiet_NaN();
      if (we > 0.0) w = werr(wc, we);
      report.add(exp, row_tag, "werr", class_key(f), w);
    }
  }
  return report;
}

/// Precision and recall per frequency class for the unclipped and clipped
/// canary-trained models and the baseline model.
inline AuditReport run_mia_eval(AuditSession& s, ModelPolicy policy = ModelPolicy::kTrainIfMissing) {
  const auto& cfg = s.config();
  AuditReport report = ensure_null_calibration(s, policy);
  const std::string exp = "mia";
  const ModelBundle* models[] = {
      &s.model({CorpusKind::kBaseline, cfg.reference_size, ClipLevel::off()}, policy),
      &s.model({CorpusKind::kCanary, cfg.reference_size, ClipLevel::off()}, policy),
      &s.model({CorpusKind::kCanary, cfg.reference_size, cfg.mia_clip}, policy),
  };
  for (const ModelBundle* b : models) {
    for (int f : s.frequencies()) {
      const auto pos = detail::capped(s.canaries().with_frequency(f), cfg.max_per_class);
      const auto neg = detail::capped(s.extraneous().with_frequency(f), cfg.max_per_class);
      if (pos.empty()) continue;
      const auto p1 = s.mia_decisions(*b, pos, class_key(f) + "-canary", exp);
      const auto p2 = s.mia_decisions(*b, neg, class_key(f) + "-extraneous", exp);
      std::vector<bool> predictions(p1), labels(p1.size(), true);
      predictions.insert(predictions.end(), p2.begin(), p2.end());
      labels.insert(labels.end(), p2.size(), false);
      add_precision_recall(report, exp, b->tag, class_key(f), predictions, labels);
    }
  }
  return report;
}

}  // namespace canary_audit
