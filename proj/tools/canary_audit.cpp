// canary-audit: generate data, train and fuse LMs, and run the memorization audits.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "canary_audit/audit.hpp"
#include "canary_audit/report.hpp"

namespace fs = std::filesystem;
using namespace canary_audit;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out = "out";
};

struct ModelOptions {
  std::string corpus = "CAN";
  double size = 1.0;
  std::string clip = "off";

  ModelSpec spec() const { return {parse_corpus_kind(corpus), size, ClipLevel::parse(clip)}; }
};

/// Advisory lock on the output directory; removed when the command finishes.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      throw InvalidState("output directory is locked by another run (remove " + path_.string() +
                         " if no run is active)");
    }
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

ExperimentConfig resolve_config(const CommonOptions& o) {
  FlatConfig flat = o.config_path.empty() ? FlatConfig{} : FlatConfig::load(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--set expects section.key=value, got '" + kv + "'");
    flat.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) flat.set("audit.seed", std::to_string(*o.seed));
  return ExperimentConfig::from_flat(flat);
}

void write_manifest(const fs::path& dir, const std::string& command, const ExperimentConfig& cfg) {
  std::ofstream out(dir / "manifest.cfg", std::ios::binary);
  out << "# canary-audit " << command << "\n# derived seeds are FNV-1a tags XORed into audit.seed\n"
      << cfg.to_text();
}

void print_summary(const AuditReport& report) {
  for (const auto& r : report.rows) {
    std::cout << r.experiment << ' ' << r.model_tag << ' ' << r.metric << (r.key.empty() ? "" : " " + r.key) << " = "
              << format_number(r.value) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Canary memorization audit for a shallow-fused speech recognizer LM"};
  app.require_subcommand(1, 1);

  CommonOptions common;
  ModelOptions model;
  std::vector<std::string> decode_texts;
  std::string decode_input;
  int decode_prefix = -1;
  bool train_missing = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Experiment config file (section.key = value)")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Master seed; overrides audit.seed");
    sub->add_option("--set", common.overrides, "Config override section.key=value (repeatable)");
    sub->add_option("--out", common.out, "Output directory")->capture_default_str();
  };
  auto add_model = [&](CLI::App* sub) {
    sub->add_option("--model", model.corpus, "Training set: CAN, EXT or baseline")->capture_default_str();
    sub->add_option("--size", model.size, "LM size multiplier")->capture_default_str();
    sub->add_option("--clip", model.clip, "Clip level: off, an absolute norm, or pN percentile")
        ->capture_default_str();
  };

  auto* gen_canaries = app.add_subcommand("gen-canaries", "Write canaries.tsv, extraneous.tsv and format.tsv");
  auto* gen_corpus = app.add_subcommand("gen-corpus", "Write background, dev and merged training corpora");
  auto* train_lm = app.add_subcommand("train-lm", "Train an LM and tune its fusion weights");
  auto* tune_fusion = app.add_subcommand("tune-fusion", "Write the fusion-weight grid of a trained LM");
  auto* decode = app.add_subcommand("decode", "Decode texts rendered through the synthetic channel");
  auto* audit_mem = app.add_subcommand("audit-memorization", "WER per canary class across LM sizes");
  auto* audit_clip = app.add_subcommand("audit-clip", "WERR per canary class across clip levels");
  auto* audit_mia = app.add_subcommand("audit-mia", "Membership inference precision and recall");
  auto* report = app.add_subcommand("report", "Merge fragments into report.csv and figure data files");
  for (auto* sub : {gen_canaries, gen_corpus, train_lm, tune_fusion, decode, audit_mem, audit_clip, audit_mia, report}) {
    add_common(sub);
  }
  for (auto* sub : {train_lm, tune_fusion, decode}) add_model(sub);
  decode->add_option("--text", decode_texts, "Text to render and decode (repeatable)");
  decode->add_option("--input", decode_input, "File with one text per line")->check(CLI::ExistingFile);
  decode->add_option("--prefix-letters", decode_prefix,
                     "Clean leading letters (default: fully noised render at channel.eval_sigma)");
  audit_mia->add_flag("--train-missing", train_missing, "Train required models instead of failing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    const fs::path out = common.out;
    if (sub == report) {
      if (!fs::is_directory(out)) throw InvalidState("run directory does not exist: " + out.string());
      DirLock lock(out);
      const ReportSummary s = assemble_report(out);
      for (const auto& f : s.missing_fragments) std::cerr << "warning: missing fragment " << f << '\n';
      for (const auto& c : s.missing_cells) std::cerr << "warning: missing cell " << c << '\n';
      if (!s.complete()) std::cerr << "warning: report is incomplete\n";
      std::cout << "wrote " << (out / "report.csv").string() << '\n';
      return 0;
    }

    const ExperimentConfig cfg = resolve_config(common);
    fs::create_directories(out);
    DirLock lock(out);
    write_manifest(out, command, cfg);

    if (sub == gen_canaries) {
      CanarySpec cs = cfg.canary;
      cs.seed = cfg.seed;
      const auto [can, ext] = build_canary_sets(cs);
      write_sequence_set((out / "canaries.tsv").string(), can);
      write_sequence_set((out / "extraneous.tsv").string(), ext);
      write_sequence_set((out / "format.tsv").string(), build_format_set(cs, can, ext));
      for (const auto& fc : cs.frequency_classes) {
        std::cout << class_key(fc.frequency) << ' ' << cs.scaled_count(fc) << '\n';
      }
      return 0;
    }

    AuditSession session(cfg, out);
    const ModelPolicy existing = ModelPolicy::kRequireExisting;

    if (sub == gen_corpus) {
      write_corpus((out / "background.txt").string(), session.background());
      write_corpus((out / "dev.txt").string(), session.dev());
      for (CorpusKind k : {CorpusKind::kCanary, CorpusKind::kExtraneous, CorpusKind::kBaseline}) {
        const TrainingCorpus c = session.corpus_for(k);
        write_corpus((out / ("train_" + corpus_kind_name(k) + ".txt")).string(), c);
        for (const auto& w : c.warnings) std::cerr << "warning: " << w << '\n';
      }
    } else if (sub == train_lm) {
      const ModelBundle& b = session.train_and_store(model.spec());
      std::cout << b.tag << " lambda1=" << format_number(b.weights.lambda1)
                << " lambda2=" << format_number(b.weights.lambda2) << " dev_wer=" << format_number(b.dev_wer)
                << " clip_norm=" << format_number(b.clip_norm) << '\n';
    } else if (sub == tune_fusion) {
      const ModelBundle& b = session.model(model.spec(), existing);
      const TuneResult t = tune_weights_detailed(session.dev_lattices(), b.params, b.ilm, cfg.lambda1_grid,
                                                 cfg.lambda2_grid, cfg.beam);
      fs::create_directories(out / "fusion");
      std::ofstream csv(out / "fusion" / (b.tag + ".csv"), std::ios::binary);
      csv << "lambda1,lambda2,dev_wer\n";
      for (const auto& [l1, l2, e] : t.table) {
        csv << format_number(l1) << ',' << format_number(l2) << ',' << format_number(e) << '\n';
      }
      std::cout << b.tag << " best lambda1=" << format_number(t.best.lambda1)
                << " lambda2=" << format_number(t.best.lambda2) << " dev_wer=" << format_number(t.best_wer) << '\n';
    } else if (sub == decode) {
      const ModelBundle& b = session.model(model.spec(), existing);
      std::vector<std::string> texts = decode_texts;
      if (!decode_input.empty()) {
        const TrainingCorpus c = read_corpus(decode_input);
        texts.insert(texts.end(), c.sequences.begin(), c.sequences.end());
      }
      if (texts.empty()) throw InvalidArgument("decode needs --text or --input");
      const ChannelConfig ch = decode_prefix < 0 ? session.eval_channel() : session.mia_channel();
      const ObscureSpec ob{std::max(decode_prefix, 0)};
      LmScorer scorer(b.params);
      std::vector<DecodeRow> rows;
      for (std::size_t i = 0; i < texts.size(); ++i) {
        const auto lat = render_obscured(texts[i], ch, ob);
        rows.push_back({"decode-" + std::to_string(i), texts[i], beam_decode(lat, scorer, b.ilm, b.weights, cfg.beam)});
        std::cout << texts[i] << " -> " << vocab::decode(rows.back().result.transcript) << '\n';
      }
      fs::create_directories(out / "decodes" / "cli");
      write_decode_csv((out / "decodes" / "cli" / (b.tag + "__decode.csv")).string(), rows);
    } else if (sub == audit_mem) {
      const AuditReport r = run_memorization_audit(session);
      session.write_fragment("memorization", r);
      print_summary(r);
    } else if (sub == audit_clip) {
      const AuditReport r = run_clip_sweep(session);
      session.write_fragment("clip", r);
      print_summary(r);
    } else if (sub == audit_mia) {
      const AuditReport r = run_mia_eval(session, train_missing ? ModelPolicy::kTrainIfMissing : existing);
      session.write_fragment("mia", r);
      print_summary(r);
    }
    return 0;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << command << ": " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << command << ": " << e.what() << '\n';
    return kExitRuntime;
  }
}
