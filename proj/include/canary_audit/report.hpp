#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "canary_audit/audit.hpp"
#include "canary_audit/errors.hpp"

namespace canary_audit {

/// Experiment fragments in merge order, with the figure each one feeds.
inline const std::vector<std::pair<std::string, std::string>>& report_fragments() {
  static const std::vector<std::pair<std::string, std::string>> f{
      {"memorization", "memorization.dat"}, {"clip", "clip.dat"}, {"mia", "mia.dat"}};
  return f;
}

struct ReportSummary {
  std::vector<std::string> present;
  std::vector<std::string> missing_fragments;
  std::vector<std::string> missing_cells;

  bool complete() const { return missing_fragments.empty() && missing_cells.empty(); }
};

namespace detail {

inline std::vector<std::string> distinct(const AuditReport& r, const std::string& metric,
                                         std::string ReportRow::*field) {
  std::vector<std::string> out;
  for (const auto& row : r.rows) {
    if (row.metric == metric && std::find(out.begin(), out.end(), row.*field) == out.end()) out.push_back(row.*field);
  }
  return out;
}

inline int class_frequency(const std::string& key) { return std::stoi(key.substr(3)); }

inline std::vector<std::string> class_keys(const AuditReport& r, const std::string& metric) {
  std::vector<std::string> keys;
  for (const auto& k : distinct(r, metric, &ReportRow::key)) {
    if (k.rfind("CAN", 0) == 0) keys.push_back(k);
  }
  std::sort(keys.begin(), keys.end(),
            [](const std::string& a, const std::string& b) { return class_frequency(a) < class_frequency(b); });
  return keys;
}

class CellReader {
 public:
  CellReader(const AuditReport& r, std::vector<std::string>& missing) : r_(r), missing_(missing) {}

  std::string operator()(const std::string& tag, const std::string& metric, const std::string& key) {
    const auto v = r_.find(tag, metric, key);
    if (!v || std::isnan(*v)) {
      missing_.push_back(tag + "/" + metric + (key.empty() ? "" : "/" + key));
      return "nan";
    }
    return format_number(*v);
  }

 private:
  const AuditReport& r_;
  std::vector<std::string>& missing_;
};

/// Tags like "CAN-m0.5-off" sorted by their size multiplier.
inline std::vector<std::pair<double, std::string>> sized_tags(const AuditReport& r, const std::string& prefix) {
  std::vector<std::pair<double, std::string>> out;
  for (const auto& tag : distinct(r, "wer", &ReportRow::model_tag)) {
    if (tag.rfind(prefix + "-m", 0) != 0) continue;
    const auto dash = tag.find('-', prefix.size() + 2);
    out.emplace_back(std::stod(tag.substr(prefix.size() + 2, dash - prefix.size() - 2)), tag);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline void write_memorization_plot(const std::filesystem::path& path, const AuditReport& r, std::vector<std::string>& missing) {
  std::ofstream out(path, std::ios::binary);
  const auto keys = class_keys(r, "wer");
  CellReader cell(r, missing);
  out << "# WER on each canary frequency class as a function of LM size\n"
      << "# index 0: models trained with canaries (CAN); index 1: models trained with extraneous sets (EXT)\n"
      << "# columns: size_multiplier parameters dev_wer";
  for (const auto& k : keys) out << " wer_" << k;
  out << '\n';
  bool first = true;
  for (const std::string prefix : {"CAN", "EXT"}) {
    if (!first) out << "\n\n";
    first = false;
    out << "# " << prefix << '\n';
    for (const auto& [size, tag] : sized_tags(r, prefix)) {
      out << format_number(size) << ' ' << cell(tag, "parameters", "") << ' ' << cell(tag, "wer", "dev");
      for (const auto& k : keys) out << ' ' << cell(tag, "wer", k);
      out << '\n';
    }
  }
  if (r.find("AM-only", "wer", "dev")) {
    out << "\n\n# AM-only (index 2): dev_wer then per-class WER in the column order above, no size columns\n";
    out << cell("AM-only", "wer", "dev");
    for (const auto& k : keys) out << ' ' << cell("AM-only", "wer", k);
    out << '\n';
  }
}

inline void write_clip_plot(const std::filesystem::path& path, const AuditReport& r, std::vector<std::string>& missing) {
  std::ofstream out(path, std::ios::binary);
  const auto keys = class_keys(r, "werr");
  CellReader cell(r, missing);
  out << "# WERR (CAN vs EXT) per canary frequency class at each clip level, plus background dev WER\n"
      << "# columns: clip_level clip_norm";
  for (const auto& k : keys) out << " werr_" << k;
  out << " dev_wer_CAN dev_wer_EXT fraction_clipped_CAN\n";
  for (const auto& row_tag : distinct(r, "clip_norm", &ReportRow::model_tag)) {
    const std::string level = row_tag.substr(5);
    std::string can, ext;
    for (const auto& tag : distinct(r, "fraction_clipped", &ReportRow::model_tag)) {
      const std::string suffix = "-" + level;
      if (tag.size() > suffix.size() && tag.compare(tag.size() - suffix.size(), suffix.size(), suffix) == 0) {
        (tag.rfind("CAN", 0) == 0 ? can : ext) = tag;
      }
    }
    out << level << ' ' << cell(row_tag, "clip_norm", "");
    for (const auto& k : keys) out << ' ' << cell(row_tag, "werr", k);
    out << ' ' << cell(can, "wer", "dev") << ' ' << cell(ext, "wer", "dev") << ' '
        << cell(can, "fraction_clipped", "") << '\n';
  }
}

inline void write_mia_plot(const std::filesystem::path& path, const AuditReport& r, std::vector<std::string>& missing) {
  std::ofstream out(path, std::ios::binary);
  const auto keys = class_keys(r, "precision");
  CellReader cell(r, missing);
  out << "# Membership classifier precision and recall per canary frequency class\n"
      << "# one index block per model, in the order of the '# model' comments\n"
      << "# columns: frequency precision recall positives\n";
  bool first = true;
  for (const auto& tag : distinct(r, "precision", &ReportRow::model_tag)) {
    if (!first) out << "\n\n";
    first = false;
    out << "# model " << tag << '\n';
    for (const auto& k : keys) {
      if (!r.find(tag, "precision", k)) continue;
      out << class_frequency(k) << ' ' << cell(tag, "precision", k) << ' ' << cell(tag, "recall", k) << ' '
          << cell(tag, "positives", k) << '\n';
    }
  }
}

}  // namespace detail

/// Merges the experiment fragments of a run directory into report.csv and
/// writes one gnuplot-style data file per figure. Throws when no fragment exists.
inline ReportSummary assemble_report(const std::filesystem::path& dir) {
  ReportSummary summary;
  AuditReport merged;
  std::vector<std::pair<std::string, AuditReport>> parts;
  for (const auto& [name, fig] : report_fragments()) {
    const auto path = dir / (name + ".csv");
    if (!std::filesystem::exists(path)) {
      summary.missing_fragments.push_back(name + ".csv");
      continue;
    }
    summary.present.push_back(name + ".csv");
    parts.emplace_back(fig, read_report_csv(path.string()));
    merged.append(parts.back().second);
  }
  if (parts.empty()) throw InvalidState("no experiment fragments in " + dir.string());
  write_report_csv((dir / "report.csv").string(), merged);
  for (const auto& [fig, part] : parts) {
    if (fig == "memorization.dat") detail::write_memorization_plot(dir / fig, part, summary.missing_cells);
    else if (fig == "clip.dat") detail::write_clip_plot(dir / fig, part, summary.missing_cells);
    else detail::write_mia_plot(dir / fig, part, summary.missing_cells);
  }
  return summary;
}

}  // namespace canary_audit
