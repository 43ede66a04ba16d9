#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "canary_audit/errors.hpp"
#include "canary_audit/nlm.hpp"
#include "canary_audit/parallel.hpp"
#include "canary_audit/rng.hpp"
#include "canary_audit/textgen.hpp"

namespace canary_audit {

/// Rescales g to global L2 norm at most C: g * min(1, C / ||g||).
/// Gradients already within the bound are left untouched.
inline double clip_grad_in_place(NlmGrad& g, double clip_norm) {
  if (!(clip_norm > 0.0)) throw InvalidArgument("clip norm must be positive");
  const double norm = g.norm();
  if (!std::isfinite(norm)) throw InvalidState("non-finite gradient");
  if (norm > clip_norm) g.scale(clip_norm / norm);
  return norm;
}

inline NlmGrad clip_grad(NlmGrad g, double clip_norm) {
  clip_grad_in_place(g, clip_norm);
  return g;
}

struct NamedSet {
  std::string name;
  SequenceSet set;
};

struct TrainConfig {
  long steps = 1000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Per-example clip norm; empty means clipping is off.
  std::optional<double> clip_norm;
  std::uint64_t seed = 0;
  long probe_interval = 100;
  std::vector<NamedSet> probe_sets;
  int n_letters = 6;
  /// Keep every pre-clip per-example norm after this many steps (for percentile calibration).
  long record_norms_after = std::numeric_limits<long>::max();
  int threads = 0;

  void validate() const {
    if (steps < 1 || batch_size < 1) throw InvalidArgument("steps and batch_size must be at least 1");
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
    if (clip_norm && !(*clip_norm > 0.0)) throw InvalidArgument("clip norm must be positive when enabled");
    if (probe_interval < 1) throw InvalidArgument("probe_interval must be at least 1");
  }
};

struct TrainReport {
  std::vector<long> steps;
  std::vector<double> mean_nll;
  std::vector<double> fraction_clipped;
  std::vector<std::string> probe_names;
  /// probe_values[i][j]: mean ratio_to_baseline of probe set j at steps[i].
  std::vector<std::vector<double>> probe_values;
  /// Largest per-example norm after clipping, over all steps.
  double max_post_clip_norm = 0.0;
  /// Share of all per-example gradients that were clipped.
  double overall_fraction_clipped = 0.0;
  std::vector<double> observed_norms;
};

/// Mean canary_probe ratio per named set.
inline std::map<std::string, double> probe(const NlmParams& p, const std::vector<NamedSet>& sets, int n) {
  std::map<std::string, double> out;
  for (const auto& [name, set] : sets) {
    if (set.entries.empty()) throw InvalidArgument("probe set '" + name + "' is empty");
    double sum = 0.0;
    for (const auto& e : set.entries) sum += canary_probe(p, e.text, n).ratio_to_baseline;
    out[name] = sum / static_cast<double>(set.entries.size());
  }
  return out;
}

namespace detail {

class Adam {
 public:
  Adam(const NlmParams& like, const TrainConfig& c)
      : m_(like.zeros_like()), v_(like.zeros_like()), c_(c) {}

  void step(NlmParams& p, const NlmGrad& g) {
    ++t_;
    const double b1t = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
    const double b2t = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
    const double lr = c_.learning_rate;
    const double b1 = c_.beta1, b2 = c_.beta2, eps = c_.adam_eps;
    auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
      m = b1 * m + (1.0 - b1) * grad;
      v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
      param.array() -= lr * (m.array() / b1t) / ((v.array() / b2t).sqrt() + eps);
    };
    update(p.embedding, g.embedding, m_.embedding, v_.embedding);
    update(p.w1, g.w1, m_.w1, v_.w1);
    update(p.b1, g.b1, m_.b1, v_.b1);
    update(p.w2, g.w2, m_.w2, v_.w2);
    update(p.b2, g.b2, m_.b2, v_.b2);
  }

 private:
  NlmParams m_, v_;
  TrainConfig c_;
  long t_ = 0;
};

}  // namespace detail

/// Mini-batch Adam with optional per-example clipping (no noise).
///
/// Each step: next batch from a seeded without-replacement epoch permutation,
/// per-example gradients, clip each, average in index order, one Adam update.
inline std::pair<NlmParams, TrainReport> train(const TrainingCorpus& corpus, const TrainConfig& config,
                                               const NlmParams& init) {
  config.validate();
  if (corpus.sequences.empty()) throw InvalidArgument("training corpus is empty");

  std::vector<std::vector<Symbol>> encoded;
  encoded.reserve(corpus.sequences.size());
  for (const auto& s : corpus.sequences) encoded.push_back(vocab::encode(s));

  NlmParams params = init;
  if (!params.all_finite()) throw InvalidState("initial parameters are not finite");
  detail::Adam adam(params, config);
  TrainReport report;
  for (const auto& ps : config.probe_sets) report.probe_names.push_back(ps.name);

  const std::size_t n = encoded.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n);
  Rng batch_rng(derive_seed(config.seed, "batches"));
  std::vector<std::size_t> order = seeded_permutation(n, batch_rng);
  std::size_t cursor = 0;

  std::vector<NlmGrad> grads(batch, params.zeros_like());
  std::vector<double> losses(batch), norms(batch), post_norms(batch);
  std::vector<NlmWorkspace> workspaces(static_cast<std::size_t>(std::max(1, config.threads)));
  NlmGrad mean = params.zeros_like();
  long clipped_total = 0, examples_total = 0;

  for (long step = 1; step <= config.steps; ++step) {
    if (cursor + batch > n) {
      order = seeded_permutation(n, batch_rng);
      cursor = 0;
    }
    const std::size_t base = cursor;
    cursor += batch;

    parallel_for(batch, config.threads, [&](std::size_t i, std::size_t worker) {
      const auto& text = encoded[order[base + i]];
      losses[i] = per_example_grad(params, text, grads[i], workspaces[worker]);
      if (config.clip_norm) {
        norms[i] = clip_grad_in_place(grads[i], *config.clip_norm);
        post_norms[i] = norms[i] > *config.clip_norm ? grads[i].norm() : norms[i];
      } else {
        norms[i] = grads[i].norm();
        if (!std::isfinite(norms[i])) throw InvalidState("non-finite gradient");
        post_norms[i] = norms[i];
      }
    });

    double loss_sum = 0.0;
    long clipped = 0;
    mean.set_zero();
    for (std::size_t i = 0; i < batch; ++i) {
      loss_sum += losses[i];
      mean.add_scaled(grads[i], 1.0);
      if (config.clip_norm && norms[i] > *config.clip_norm) ++clipped;
      report.max_post_clip_norm = std::max(report.max_post_clip_norm, post_norms[i]);
      if (step > config.record_norms_after) report.observed_norms.push_back(norms[i]);
    }
    const double mean_loss = loss_sum / static_cast<double>(batch);
    if (!std::isfinite(mean_loss)) {
      throw TrainingDiverged("mean batch loss became non-finite at step " + std::to_string(step), step - 1);
    }
    mean.scale(1.0 / static_cast<double>(batch));
    adam.step(params, mean);
    clipped_total += clipped;
    examples_total += static_cast<long>(batch);

    if (step % config.probe_interval == 0 || step == config.steps) {
      report.steps.push_back(step);
      report.mean_nll.push_back(mean_loss);
      report.fraction_clipped.push_back(static_cast<double>(clipped) / static_cast<double>(batch));
      if (!config.probe_sets.empty()) {
        const auto probed = probe(params, config.probe_sets, config.n_letters);
        std::vector<double> row;
        for (const auto& ps : config.probe_sets) row.push_back(probed.at(ps.name));
        report.probe_values.push_back(std::move(row));
      }
    }
  }
  report.overall_fraction_clipped =
      static_cast<double>(clipped_total) / static_cast<double>(std::max<long>(1, examples_total));
  return {std::move(params), std::move(report)};
}

/// Value at quantile q in [0, 1] of `values` (nearest-rank on the sorted copy).
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("percentile of an empty sample");
  if (q < 0.0 || q > 1.0) throw InvalidArgument("quantile must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1)));
  return values[idx];
}

inline void write_train_report_csv(const std::string& path, const TrainReport& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open for writing: " + path);
  out.precision(10);
  out << "step,mean_nll,fraction_clipped";
  for (const auto& name : r.probe_names) out << ',' << name;
  out << '\n';
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    out << r.steps[i] << ',' << r.mean_nll[i] << ',' << r.fraction_clipped[i];
    if (i < r.probe_values.size()) {
      for (double v : r.probe_values[i]) out << ',' << v;
    }
    out << '\n';
  }
}

}  // namespace canary_audit
