#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "canary_audit/errors.hpp"
#include "canary_audit/rng.hpp"
#include "canary_audit/textgen.hpp"
#include "canary_audit/vocab.hpp"

namespace canary_audit {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Fixed-context feed-forward character LM:
/// embed K previous symbols -> concat -> affine -> tanh -> affine -> log-softmax.
///
/// vocab_size counts scored symbols (text symbols plus a final EOS); the
/// padding symbol is index vocab_size and has an embedding row but no logit.
struct NlmConfig {
  int context_len = 8;
  int embed_dim = 16;
  int hidden_dim = 64;
  int vocab_size = vocab::kScored;
  double size_multiplier = 1.0;

  int embed() const { return std::max(1, static_cast<int>(std::lround(embed_dim * size_multiplier))); }
  int hidden() const { return std::max(1, static_cast<int>(std::lround(hidden_dim * size_multiplier))); }
  int eos() const { return vocab_size - 1; }
  int pad() const { return vocab_size; }
  int input_width() const { return context_len * embed(); }

  long parameter_count() const {
    const long e = embed(), h = hidden(), v = vocab_size, k = context_len;
    return (v + 1) * e + k * e * h + h + h * v + v;
  }

  void validate() const {
    if (context_len < 1 || embed_dim < 1 || hidden_dim < 1) {
      throw InvalidArgument("LM dimensions must be at least 1");
    }
    if (vocab_size < 2) throw InvalidArgument("LM needs at least one text symbol plus EOS");
    if (!(size_multiplier > 0.0) || !std::isfinite(size_multiplier)) {
      throw InvalidArgument("size_multiplier must be positive");
    }
  }

  bool operator==(const NlmConfig&) const = default;
};

/// Parameters of the LM. Gradients use the same record.
struct NlmParams {
  NlmConfig config;
  std::uint64_t seed = 0;
  Matrix embedding;  // (V+1) x E
  Matrix w1;         // (K*E) x H
  RowVector b1;      // H
  Matrix w2;         // H x V
  RowVector b2;      // V

  static NlmParams zeros(const NlmConfig& config) {
    config.validate();
    NlmParams p;
    p.config = config;
    p.embedding = Matrix::Zero(config.vocab_size + 1, config.embed());
    p.w1 = Matrix::Zero(config.input_width(), config.hidden());
    p.b1 = RowVector::Zero(config.hidden());
    p.w2 = Matrix::Zero(config.hidden(), config.vocab_size);
    p.b2 = RowVector::Zero(config.vocab_size);
    return p;
  }

  NlmParams zeros_like() const {
    NlmParams z = zeros(config);
    z.seed = seed;
    return z;
  }

  /// Visits every parameter block in checkpoint order.
  template <typename Fn>
  void for_each_block(Fn&& fn) {
    fn(embedding.data(), embedding.size());
    fn(w1.data(), w1.size());
    fn(b1.data(), b1.size());
    fn(w2.data(), w2.size());
    fn(b2.data(), b2.size());
  }

  template <typename Fn>
  void for_each_block(Fn&& fn) const {
    fn(embedding.data(), embedding.size());
    fn(w1.data(), w1.size());
    fn(b1.data(), b1.size());
    fn(w2.data(), w2.size());
    fn(b2.data(), b2.size());
  }

  long size() const {
    return static_cast<long>(embedding.size() + w1.size() + b1.size() + w2.size() + b2.size());
  }

  double squared_norm() const {
    return embedding.squaredNorm() + w1.squaredNorm() + b1.squaredNorm() + w2.squaredNorm() +
           b2.squaredNorm();
  }

  double norm() const { return std::sqrt(squared_norm()); }

  bool all_finite() const {
    return embedding.allFinite() && w1.allFinite() && b1.allFinite() && w2.allFinite() &&
           b2.allFinite();
  }

  void scale(double s) {
    embedding *= s;
    w1 *= s;
    b1 *= s;
    w2 *= s;
    b2 *= s;
  }

  void set_zero() {
    embedding.setZero();
    w1.setZero();
    b1.setZero();
    w2.setZero();
    b2.setZero();
  }

  /// this += s * other
  void add_scaled(const NlmParams& other, double s) {
    embedding += s * other.embedding;
    w1 += s * other.w1;
    b1 += s * other.b1;
    w2 += s * other.w2;
    b2 += s * other.b2;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(size()));
    for_each_block([&](const double* d, Eigen::Index n) { out.insert(out.end(), d, d + n); });
    return out;
  }

  void unflatten(std::span<const double> values) {
    if (static_cast<long>(values.size()) != size()) throw InvalidArgument("flat parameter size mismatch");
    std::size_t off = 0;
    for_each_block([&](double* d, Eigen::Index n) {
      std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), n, d);
      off += static_cast<std::size_t>(n);
    });
  }

  bool operator==(const NlmParams& o) const {
    return config == o.config && embedding == o.embedding && w1 == o.w1 && b1 == o.b1 && w2 == o.w2 &&
           b2 == o.b2;
  }
};

using NlmGrad = NlmParams;

/// Weights i.i.d. uniform on +-1/sqrt(fan_in), biases zero. Embedding rows
/// are selected by a one-hot input, so their fan-in is 1.
inline NlmParams init_params(const NlmConfig& config, std::uint64_t seed) {
  NlmParams p = NlmParams::zeros(config);
  p.seed = seed;
  Rng rng(derive_seed(seed, "init"));
  auto fill = [&](Matrix& m, double fan_in) {
    const double bound = 1.0 / std::sqrt(fan_in);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  };
  fill(p.embedding, 1.0);
  fill(p.w1, static_cast<double>(config.input_width()));
  fill(p.w2, static_cast<double>(config.hidden()));
  return p;
}

namespace detail {

inline void check_context(const NlmConfig& c, std::span<const Symbol> context) {
  if (static_cast<int>(context.size()) != c.context_len) {
    throw InvalidArgument("context must hold exactly " + std::to_string(c.context_len) + " symbols");
  }
  for (Symbol s : context) {
    if (s < 0 || s > c.pad()) throw InvalidArgument("context symbol out of range: " + std::to_string(s));
  }
}

inline void check_text(const NlmConfig& c, std::span<const Symbol> text) {
  if (text.empty()) throw InvalidArgument("text must be nonempty");
  for (Symbol s : text) {
    if (s < 0 || s >= c.eos()) throw InvalidArgument("text symbol out of range: " + std::to_string(s));
  }
}

inline double log_sum_exp(const double* v, int n) {
  double m = v[0];
  for (int i = 1; i < n; ++i) m = std::max(m, v[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

}  // namespace detail

/// Left-padded context of `len` symbols preceding position `t` of `text`.
inline std::vector<Symbol> context_at(std::span<const Symbol> text, std::size_t t, int len, Symbol pad) {
  std::vector<Symbol> ctx(static_cast<std::size_t>(len), pad);
  for (int k = 0; k < len; ++k) {
    const long src = static_cast<long>(t) - len + k;
    if (src >= 0) ctx[static_cast<std::size_t>(k)] = text[static_cast<std::size_t>(src)];
  }
  return ctx;
}

/// Next-symbol log-probabilities for one context (oldest symbol first).
///
/// Values are bit-identical across calls for the same context.
inline RowVector log_probs(const NlmParams& p, std::span<const Symbol> context) {
  const NlmConfig& c = p.config;
  detail::check_context(c, context);
  const int e = c.embed();
  RowVector h = p.b1;
  for (int k = 0; k < c.context_len; ++k) {
    const auto emb = p.embedding.row(context[static_cast<std::size_t>(k)]);
    for (int d = 0; d < e; ++d) h.noalias() += emb(d) * p.w1.row(k * e + d);
  }
  h = h.array().tanh().matrix();
  RowVector z = p.b2;
  for (int j = 0; j < h.size(); ++j) z.noalias() += h(j) * p.w2.row(j);
  const double lse = detail::log_sum_exp(z.data(), static_cast<int>(z.size()));
  z.array() -= lse;
  return z;
}

/// Scratch buffers for sequence-level forward/backward passes.
struct NlmWorkspace {
  Matrix x, hidden, logits, delta_out, delta_hidden, delta_x;
  std::vector<Symbol> contexts;
  std::vector<Symbol> targets;
};

namespace detail {

// Teacher-forced forward pass over text + EOS. Leaves per-position
// log-softmax rows in ws.logits and returns the total NLL.
inline double sequence_forward(const NlmParams& p, std::span<const Symbol> text, NlmWorkspace& ws) {
  const NlmConfig& c = p.config;
  check_text(c, text);
  const int k_len = c.context_len;
  const int e = c.embed();
  const auto positions = static_cast<Eigen::Index>(text.size() + 1);

  ws.targets.assign(text.begin(), text.end());
  ws.targets.push_back(c.eos());
  ws.contexts.assign(static_cast<std::size_t>(positions * k_len), c.pad());
  ws.x.resize(positions, c.input_width());
  for (Eigen::Index t = 0; t < positions; ++t) {
    for (int k = 0; k < k_len; ++k) {
      const long src = static_cast<long>(t) - k_len + k;
      const Symbol s = src >= 0 ? text[static_cast<std::size_t>(src)] : c.pad();
      ws.contexts[static_cast<std::size_t>(t * k_len + k)] = s;
      ws.x.row(t).segment(k * e, e) = p.embedding.row(s);
    }
  }
  ws.hidden.noalias() = ws.x * p.w1;
  ws.hidden.rowwise() += p.b1;
  ws.hidden = ws.hidden.array().tanh().matrix();
  ws.logits.noalias() = ws.hidden * p.w2;
  ws.logits.rowwise() += p.b2;

  double nll = 0.0;
  for (Eigen::Index t = 0; t < positions; ++t) {
    double* row = ws.logits.row(t).data();
    const double lse = log_sum_exp(row, c.vocab_size);
    ws.logits.row(t).array() -= lse;
    nll -= ws.logits(t, ws.targets[static_cast<std::size_t>(t)]);
  }
  return nll;
}

}  // namespace detail

inline double sequence_nll(const NlmParams& p, std::span<const Symbol> text, NlmWorkspace& ws) {
  return detail::sequence_forward(p, text, ws);
}

inline double sequence_nll(const NlmParams& p, std::span<const Symbol> text) {
  NlmWorkspace ws;
  return sequence_nll(p, text, ws);
}

inline double sequence_nll(const NlmParams& p, std::string_view text) {
  const auto symbols = vocab::encode(text);
  return sequence_nll(p, symbols);
}

/// Per-position log-probabilities of the teacher-forced targets (text then EOS).
inline std::vector<double> target_log_probs(const NlmParams& p, std::span<const Symbol> text) {
  NlmWorkspace ws;
  detail::sequence_forward(p, text, ws);
  std::vector<double> out(ws.targets.size());
  for (std::size_t t = 0; t < out.size(); ++t) {
    out[t] = ws.logits(static_cast<Eigen::Index>(t), ws.targets[t]);
  }
  return out;
}

/// Exact gradient of sequence_nll, written into `grad` (shapes must match p).
/// Returns the NLL.
inline double per_example_grad(const NlmParams& p, std::span<const Symbol> text, NlmGrad& grad,
                               NlmWorkspace& ws) {
  const double nll = detail::sequence_forward(p, text, ws);
  const NlmConfig& c = p.config;
  const int e = c.embed();
  const Eigen::Index positions = ws.x.rows();

  // d nll / d logits = softmax - onehot
  ws.delta_out = ws.logits.array().exp().matrix();
  for (Eigen::Index t = 0; t < positions; ++t) ws.delta_out(t, ws.targets[static_cast<std::size_t>(t)]) -= 1.0;

  grad.w2.noalias() = ws.hidden.transpose() * ws.delta_out;
  grad.b2 = ws.delta_out.colwise().sum();
  ws.delta_hidden.noalias() = ws.delta_out * p.w2.transpose();
  ws.delta_hidden.array() *= (1.0 - ws.hidden.array().square());
  grad.w1.noalias() = ws.x.transpose() * ws.delta_hidden;
  grad.b1 = ws.delta_hidden.colwise().sum();
  ws.delta_x.noalias() = ws.delta_hidden * p.w1.transpose();
  grad.embedding.setZero();
  for (Eigen::Index t = 0; t < positions; ++t) {
    for (int k = 0; k < c.context_len; ++k) {
      const Symbol s = ws.contexts[static_cast<std::size_t>(t * c.context_len + k)];
      grad.embedding.row(s) += ws.delta_x.row(t).segment(k * e, e);
    }
  }
  return nll;
}

inline NlmGrad per_example_grad(const NlmParams& p, std::span<const Symbol> text) {
  NlmGrad g = p.zeros_like();
  NlmWorkspace ws;
  per_example_grad(p, text, g, ws);
  return g;
}

inline NlmGrad per_example_grad(const NlmParams& p, std::string_view text) {
  const auto symbols = vocab::encode(text);
  return per_example_grad(p, symbols);
}

struct CanaryProbe {
  /// log2-likelihood summed over letter positions and the terminal EOS.
  double total_log2_likelihood = 0.0;
  /// Bits above the 26^-n floor: total_log2_likelihood + n*log2(26).
  double ratio_to_baseline = 0.0;
  double letter_log2 = 0.0;
  double eos_log2 = 0.0;
};

/// Memorization probe against the format-only baseline of 26^-n. Space
/// positions are excluded so the comparison is against exactly n uniform letters.
inline CanaryProbe canary_probe(const NlmParams& p, std::string_view canary_text, int n) {
  if (!matches_canary_grammar(canary_text, n)) {
    throw InvalidArgument("not a " + std::to_string(n) + "-letter canary: '" + std::string(canary_text) + "'");
  }
  const auto symbols = vocab::encode(canary_text);
  const auto lp = target_log_probs(p, symbols);
  CanaryProbe out;
  for (std::size_t t = 0; t < symbols.size(); ++t) {
    if (vocab::is_letter(symbols[t])) out.letter_log2 += lp[t] / std::numbers::ln2;
  }
  out.eos_log2 = lp.back() / std::numbers::ln2;
  out.total_log2_likelihood = out.letter_log2 + out.eos_log2;
  out.ratio_to_baseline = out.total_log2_likelihood + n * std::log2(26.0);
  return out;
}

// Checkpoint: "NLM1\n", one header line of key=value config fields, then
// every block row-major as IEEE-754 binary64 little-endian.

inline constexpr std::string_view kCheckpointMagic = "NLM1";

inline void save_checkpoint(const std::string& path, const NlmParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open checkpoint for writing: " + path);
  const NlmConfig& c = p.config;
  std::ostringstream header;
  header.precision(17);
  header << "context_len=" << c.context_len << " embed_dim=" << c.embed_dim << " hidden_dim=" << c.hidden_dim
         << " vocab_size=" << c.vocab_size << " size_multiplier=" << c.size_multiplier << " seed=" << p.seed;
  out << kCheckpointMagic << '\n' << header.str() << '\n';
  p.for_each_block([&](const double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) {
      auto bits = std::bit_cast<std::uint64_t>(d[i]);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      char buf[8];
      std::memcpy(buf, &bits, 8);
      out.write(buf, 8);
    }
  });
  if (!out) throw InvalidArgument("failed writing checkpoint: " + path);
}

inline NlmParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open checkpoint: " + path);
  std::string magic, header;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw InvalidArgument("not an NLM1 checkpoint: " + path);
  std::getline(in, header);
  NlmConfig c;
  std::uint64_t seed = 0;
  std::istringstream fields(header);
  std::string field;
  int seen = 0;
  while (fields >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw InvalidArgument("malformed checkpoint header: " + header);
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "context_len") c.context_len = std::stoi(value);
    else if (key == "embed_dim") c.embed_dim = std::stoi(value);
    else if (key == "hidden_dim") c.hidden_dim = std::stoi(value);
    else if (key == "vocab_size") c.vocab_size = std::stoi(value);
    else if (key == "size_multiplier") c.size_multiplier = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
    else throw InvalidArgument("unknown checkpoint header field: " + key);
    ++seen;
  }
  if (seen != 6) throw InvalidArgument("incomplete checkpoint header: " + header);
  NlmParams p = NlmParams::zeros(c);
  p.seed = seed;
  p.for_each_block([&](double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) {
      char buf[8];
      if (!in.read(buf, 8)) throw InvalidArgument("truncated checkpoint: " + path);
      std::uint64_t bits;
      std::memcpy(&bits, buf, 8);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      d[i] = std::bit_cast<double>(bits);
    }
  });
  if (in.peek() != std::char_traits<char>::eof()) throw InvalidArgument("trailing bytes in checkpoint: " + path);
  return p;
}

}  // namespace canary_audit
