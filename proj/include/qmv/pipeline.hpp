#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "qmv/annotator.hpp"
#include "qmv/cdm.hpp"
#include "qmv/io.hpp"
#include "qmv/prompts.hpp"
#include "qmv/qmatrix.hpp"
#include "qmv/response_log.hpp"
#include "qmv/simulator.hpp"

namespace qmv {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct CandidateSpec {
  std::string label;
  std::filesystem::path path;
};

/// One Generate-and-Validate run. Paths in a config file are resolved
/// relative to the file's directory by RunConfig::load.
struct RunConfig {
  std::string run_name = "run";
  std::filesystem::path output_dir = "runs";

  std::filesystem::path library_file;
  std::filesystem::path expert_qmatrix;
  std::filesystem::path responses;
  std::filesystem::path items_file;      // required when endpoints are set
  std::filesystem::path exemplars_file;  // required for V3 generation

  std::vector<EndpointConfig> endpoints;
  PromptVersion version = PromptVersion::V3;
  std::vector<ConfidenceTier> tiers = {ConfidenceTier::High, ConfidenceTier::Medium,
                                       ConfidenceTier::Low};

  /// Pre-generated annotation sets to import (offline replay).
  std::vector<CandidateSpec> annotations;
  /// Q-matrix CSV files to rank directly.
  std::vector<CandidateSpec> candidates;

  CdmConfig cdm;
  int n_repeats = 5;
  bool parallel_candidates = false;

  std::filesystem::path run_dir() const { return output_dir / run_name; }

  void validate() const {
    if (run_name.empty() || run_name.find('/') != std::string::npos) {
      throw std::runtime_error("run_name must be a non-empty path component");
    }
    if (library_file.empty()) throw std::runtime_error("config: library_file is required");
    if (expert_qmatrix.empty()) throw std::runtime_error("config: expert_qmatrix is required");
    if (responses.empty()) throw std::runtime_error("config: responses is required");
    if (!endpoints.empty() && items_file.empty()) {
      throw std::runtime_error("config: items_file is required when endpoints are set");
    }
    if (!endpoints.empty() && version == PromptVersion::V3 && exemplars_file.empty()) {
      throw std::runtime_error("config: exemplars_file is required for V3 generation");
    }
    if (tiers.empty()) throw std::runtime_error("config: tiers must not be empty");
    std::set<ConfidenceTier> unique_tiers(tiers.begin(), tiers.end());
    if (unique_tiers.size() != tiers.size()) {
      throw std::runtime_error("config: tiers must be unique");
    }
    if (n_repeats < 1) throw std::runtime_error("config: n_repeats must be >= 1");
    cdm.validate();
    for (const auto& e : endpoints) e.validate();
    for (const auto& c : candidates) {
      if (c.label.empty()) throw std::runtime_error("config: candidate label is empty");
    }
    for (const auto& a : annotations) {
      if (a.label.empty()) throw std::runtime_error("config: annotation label is empty");
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["run_name"] = run_name;
    j["output_dir"] = output_dir.string();
    j["library_file"] = library_file.string();
    j["expert_qmatrix"] = expert_qmatrix.string();
    j["responses"] = responses.string();
    if (!items_file.empty()) j["items_file"] = items_file.string();
    if (!exemplars_file.empty()) j["exemplars_file"] = exemplars_file.string();
    j["prompt_version"] = to_string(version);
    j["tiers"] = nlohmann::ordered_json::array();
    for (auto t : tiers) j["tiers"].push_back(to_string(t));
    j["endpoints"] = nlohmann::ordered_json::array();
    for (const auto& e : endpoints) j["endpoints"].push_back(e.to_json());
    j["annotations"] = nlohmann::ordered_json::array();
    for (const auto& a : annotations) {
      j["annotations"].push_back({{"label", a.label}, {"path", a.path.string()}});
    }
    j["candidates"] = nlohmann::ordered_json::array();
    for (const auto& c : candidates) {
      j["candidates"].push_back({{"label", c.label}, {"path", c.path.string()}});
    }
    j["cdm"] = cdm.to_json();
    j["n_repeats"] = n_repeats;
    j["parallel_candidates"] = parallel_candidates;
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.run_name = j.value("run_name", c.run_name);
    c.output_dir = j.value("output_dir", c.output_dir.string());
    c.library_file = j.value("library_file", "");
    c.expert_qmatrix = j.value("expert_qmatrix", "");
    c.responses = j.value("responses", "");
    c.items_file = j.value("items_file", "");
    c.exemplars_file = j.value("exemplars_file", "");
    if (j.contains("prompt_version")) {
      c.version = version_from_string(j.at("prompt_version").get<std::string>());
    }
    if (j.contains("tiers")) {
      c.tiers.clear();
      for (const auto& t : j.at("tiers")) {
        c.tiers.push_back(tier_from_string(t.get<std::string>()));
      }
    }
    for (const auto& je : j.value("endpoints", nlohmann::json::array())) {
      c.endpoints.push_back(EndpointConfig::from_json(je));
    }
    for (const auto& ja : j.value("annotations", nlohmann::json::array())) {
      c.annotations.push_back({ja.at("label").get<std::string>(),
                               std::filesystem::path(ja.at("path").get<std::string>())});
    }
    for (const auto& jc : j.value("candidates", nlohmann::json::array())) {
      c.candidates.push_back({jc.at("label").get<std::string>(),
                              std::filesystem::path(jc.at("path").get<std::string>())});
    }
    if (j.contains("cdm")) c.cdm = CdmConfig::from_json(j.at("cdm"));
    c.n_repeats = j.value("n_repeats", c.n_repeats);
    c.parallel_candidates = j.value("parallel_candidates", c.parallel_candidates);
    return c;
  }

  /// Loads a config file, resolving relative paths against its directory.
  static RunConfig load(const std::filesystem::path& path) {
    RunConfig c;
    try {
      c = from_json(nlohmann::json::parse(read_text_file(path)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": " + e.what());
    }
    const auto base = path.has_parent_path() ? path.parent_path()
                                             : std::filesystem::path(".");
    auto resolve = [&](std::filesystem::path& p) {
      if (!p.empty() && p.is_relative()) p = base / p;
    };
    resolve(c.output_dir);
    resolve(c.library_file);
    resolve(c.expert_qmatrix);
    resolve(c.responses);
    resolve(c.items_file);
    resolve(c.exemplars_file);
    for (auto& a : c.annotations) resolve(a.path);
    for (auto& cand : c.candidates) resolve(cand.path);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Run directory layout
// ---------------------------------------------------------------------------
//   config.json, log.txt, annotations/<label>.json,
//   qmatrices/<label>[-<tier>].csv, fits/<label>[-<tier>].json,
//   comparison/<label>[-<tier>].json, failures.json, report.json, report.md

namespace rundir {

inline std::filesystem::path annotations(const std::filesystem::path& run_dir,
                                         const std::string& label) {
  return run_dir / "annotations" / (label + ".json");
}
inline std::filesystem::path qmatrix(const std::filesystem::path& run_dir,
                                     const std::string& label) {
  return run_dir / "qmatrices" / (label + ".csv");
}
inline std::filesystem::path fit(const std::filesystem::path& run_dir,
                                 const std::string& label) {
  return run_dir / "fits" / (label + ".json");
}
inline std::filesystem::path comparison(const std::filesystem::path& run_dir,
                                        const std::string& label) {
  return run_dir / "comparison" / (label + ".json");
}

constexpr const char* kExpertBaselineLabel = "expert-baseline";

}  // namespace rundir

/// Plain-text append log inside a run directory.
class RunLogger {
 public:
  explicit RunLogger(const std::filesystem::path& run_dir) {
    std::filesystem::create_directories(run_dir);
    out_.open(run_dir / "log.txt", std::ios::app);
  }

  void log(const std::string& line) {
    std::lock_guard<std::mutex> lock(mutex_);
    out_ << "[" << iso8601_utc_now() << "] " << line << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Run report
// ---------------------------------------------------------------------------

struct CandidateRow {
  std::string label;
  std::string endpoint_label;
  std::string model;
  std::string version;
  std::string tier;  // empty for direct (untiered) candidates
  std::size_t ones = 0;
  bool has_qmatrix = false;
  std::vector<std::string> degenerate_items;
  std::optional<ConfusionStats> confusion;
  FitReport fit;
};

struct RunReport {
  std::string run_name;
  std::vector<CandidateRow> rows;  // sorted by label
  std::optional<FitReport> expert_baseline;
  std::vector<std::string> ranking;  // labels, best fit first
  std::vector<std::pair<std::string, std::string>> failures;
  std::vector<std::pair<std::string, int>> annotation_failures;
  bool partial_annotation_failure = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["run_name"] = run_name;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : rows) {
      nlohmann::ordered_json jr;
      jr["label"] = row.label;
      jr["endpoint"] = row.endpoint_label;
      jr["model"] = row.model;
      jr["version"] = row.version;
      jr["tier"] = row.tier;
      if (row.has_qmatrix) {
        jr["ones"] = row.ones;
        jr["degenerate_items"] = row.degenerate_items;
      }
      if (row.confusion) jr["confusion"] = row.confusion->to_json();
      jr["fit"] = row.fit.to_json(/*include_elapsed=*/false);
      j["rows"].push_back(std::move(jr));
    }
    if (expert_baseline) {
      j["expert_baseline"] = expert_baseline->to_json(/*include_elapsed=*/false);
    } else {
      j["expert_baseline"] = nullptr;
    }
    j["ranking"] = ranking;
    j["failures"] = nlohmann::ordered_json::array();
    for (const auto& [label, error] : failures) {
      j["failures"].push_back({{"label", label}, {"error", error}});
    }
    j["annotation_failures"] = nlohmann::ordered_json::array();
    for (const auto& [label, count] : annotation_failures) {
      j["annotation_failures"].push_back({{"label", label}, {"failed_items", count}});
    }
    return j;
  }

  std::string to_markdown() const;
};

namespace detail {

/// Ranking comparator: best mean AUC first, ties by lower mean RMSE, then
/// label. Total and deterministic.
inline bool rank_before(const CandidateRow& a, const CandidateRow& b) {
  if (a.fit.auc_mean != b.fit.auc_mean) return a.fit.auc_mean > b.fit.auc_mean;
  if (a.fit.rmse_mean != b.fit.rmse_mean) return a.fit.rmse_mean < b.fit.rmse_mean;
  return a.label < b.label;
}

inline std::string format_fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline std::string fit_cell(const FitReport& fit) {
  return format_fixed(fit.auc_mean, 3) + " ± " + format_fixed(fit.auc_std, 3) + " / " +
         format_fixed(fit.rmse_mean, 3) + " ± " + format_fixed(fit.rmse_std, 3);
}

/// Splits "label-High" into {"label", "High"}; no recognized suffix means
/// an untiered candidate.
inline std::pair<std::string, std::string> split_tier_suffix(const std::string& label) {
  for (const char* tier : {"High", "Medium", "Low"}) {
    const std::string suffix = std::string("-") + tier;
    if (label.size() > suffix.size() &&
        label.compare(label.size() - suffix.size(), suffix.size(), suffix) == 0) {
      return {label.substr(0, label.size() - suffix.size()), tier};
    }
  }
  return {label, ""};
}

inline std::vector<std::string> sorted_files(const std::filesystem::path& dir,
                                             const std::string& extension) {
  std::vector<std::string> stems;
  if (!std::filesystem::exists(dir)) return stems;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == extension) {
      stems.push_back(entry.path().stem().string());
    }
  }
  std::sort(stems.begin(), stems.end());
  return stems;
}

}  // namespace detail

inline std::string RunReport::to_markdown() const {
  std::string md = "# Run report: " + run_name + "\n\n";

  // fit grid, candidate x tier
  md += "## Model fit (AUC ± std / RMSE ± std)\n\n";

  std::vector<std::string> tier_columns;
  for (const char* t : {"High", "Medium", "Low"}) {
    for (const auto& row : rows) {
      if (row.tier == t) { tier_columns.push_back(t); break; }
    }
  }
  bool has_untiered = false;
  for (const auto& row : rows) {
    if (row.tier.empty()) { has_untiered = true; break; }
  }
  if (has_untiered || tier_columns.empty()) tier_columns.push_back("");

  md += "| Candidate |";
  for (const auto& t : tier_columns) {
    md += " " + (t.empty() ? std::string("Untiered") : t) + " |";
  }
  md += "\n|---|";
  for (std::size_t i = 0; i < tier_columns.size(); ++i) md += "---|";
  md += "\n";

  if (expert_baseline) {
    md += "| expert-baseline |";
    for (std::size_t i = 0; i < tier_columns.size(); ++i) {
      md += i == 0 ? " " + detail::fit_cell(*expert_baseline) + " |" : " — |";
    }
    md += "\n";
  }
  std::vector<std::string> bases;
  for (const auto& row : rows) {
    const std::string base = row.tier.empty()
                                 ? row.label
                                 : detail::split_tier_suffix(row.label).first;
    if (std::find(bases.begin(), bases.end(), base) == bases.end()) bases.push_back(base);
  }
  for (const auto& base : bases) {
    md += "| " + base + " |";
    for (const auto& t : tier_columns) {
      const CandidateRow* cell = nullptr;
      for (const auto& row : rows) {
        const auto [row_base, row_tier] =
            row.tier.empty() ? std::pair<std::string, std::string>{row.label, ""}
                             : detail::split_tier_suffix(row.label);
        if (row_base == base && row_tier == t) { cell = &row; break; }
      }
      md += cell ? " " + detail::fit_cell(cell->fit) + " |" : " — |";
    }
    md += "\n";
  }

  // confusion grid vs the expert reference
  bool any_confusion = false;
  for (const auto& row : rows) any_confusion |= row.confusion.has_value();
  if (any_confusion) {
    md += "\n## Agreement with expert reference\n\n";
    md += "| Candidate | Tier | Ones | Zero rows | TP | FP | FN | TN | TPR | TNR | "
          "Precision | Recall | Micro F1 | Macro F1 |\n";
    md += "|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& row : rows) {
      if (!row.confusion) continue;
      const auto& c = *row.confusion;
      md += "| " + (row.tier.empty() ? row.label
                                     : detail::split_tier_suffix(row.label).first) +
            " | " + (row.tier.empty() ? "—" : row.tier) + " | " +
            std::to_string(row.ones) + " | " +
            std::to_string(row.degenerate_items.size()) + " | " +
            std::to_string(c.tp) + " | " + std::to_string(c.fp) + " | " +
            std::to_string(c.fn) + " | " + std::to_string(c.tn) + " | " +
            detail::format_fixed(c.tpr, 4) + " | " + detail::format_fixed(c.tnr, 4) +
            " | " + detail::format_fixed(c.precision, 4) + " | " +
            detail::format_fixed(c.recall, 4) + " | " +
            detail::format_fixed(c.micro_f1, 4) + " | " +
            detail::format_fixed(c.macro_f1, 4) + " |\n";
    }
  }

  md += "\n## Ranking (best empirical fit first)\n\n";
  int place = 1;
  for (const auto& label : ranking) {
    for (const auto& row : rows) {
      if (row.label == label) {
        md += std::to_string(place++) + ". **" + label + "** — AUC " +
              detail::format_fixed(row.fit.auc_mean, 3) + " ± " +
              detail::format_fixed(row.fit.auc_std, 3) + ", RMSE " +
              detail::format_fixed(row.fit.rmse_mean, 3) + " ± " +
              detail::format_fixed(row.fit.rmse_std, 3) + "\n";
        break;
      }
    }
  }
  if (expert_baseline) {
    md += "\nExpert baseline: AUC " +
          detail::format_fixed(expert_baseline->auc_mean, 3) + " ± " +
          detail::format_fixed(expert_baseline->auc_std, 3) + ", RMSE " +
          detail::format_fixed(expert_baseline->rmse_mean, 3) + " ± " +
          detail::format_fixed(expert_baseline->rmse_std, 3) + "\n";
  }

  if (!failures.empty()) {
    md += "\n## Failures\n\n";
    for (const auto& [label, error] : failures) {
      md += "- **" + label + "**: " + error + "\n";
    }
  }
  if (!annotation_failures.empty()) {
    md += "\n## Annotation failures\n\n";
    for (const auto& [label, count] : annotation_failures) {
      md += "- **" + label + "**: " + std::to_string(count) + " item(s) failed\n";
    }
  }
  return md;
}

/// Rebuilds the report purely from the artifacts in a run directory, so
/// re-running it is byte-stable. Wall-clock fields are deliberately
/// excluded from report.json.
inline RunReport make_report(const std::filesystem::path& run_dir) {
  if (!std::filesystem::exists(run_dir)) {
    throw std::runtime_error("run directory does not exist: " + run_dir.string());
  }
  RunReport report;
  report.run_name = run_dir.filename().string();

  for (const auto& label : detail::sorted_files(run_dir / "fits", ".json")) {
    if (label == rundir::kExpertBaselineLabel) continue;
    CandidateRow row;
    row.label = label;
    row.fit = FitReport::from_json(
        nlohmann::json::parse(read_text_file(rundir::fit(run_dir, label))));
    const auto [base, tier] = detail::split_tier_suffix(label);
    row.tier = tier;
    const auto annotation_path = rundir::annotations(run_dir, base);
    if (std::filesystem::exists(annotation_path)) {
      const auto set = AnnotationSet::load(annotation_path);
      row.endpoint_label = set.provenance.endpoint_label;
      row.model = set.provenance.model;
      row.version = set.provenance.prompt_version;
    }
    const auto q_path = rundir::qmatrix(run_dir, label);
    if (std::filesystem::exists(q_path)) {
      const QMatrix q = load_qmatrix(q_path);
      row.has_qmatrix = true;
      row.ones = q.ones_count();
      row.degenerate_items = q.zero_row_items();
    }
    const auto cmp_path = rundir::comparison(run_dir, label);
    if (std::filesystem::exists(cmp_path)) {
      row.confusion =
          ConfusionStats::from_json(nlohmann::json::parse(read_text_file(cmp_path)));
    }
    report.rows.push_back(std::move(row));
  }

  const auto baseline_path = rundir::fit(run_dir, rundir::kExpertBaselineLabel);
  if (std::filesystem::exists(baseline_path)) {
    report.expert_baseline =
        FitReport::from_json(nlohmann::json::parse(read_text_file(baseline_path)));
  }

  std::vector<const CandidateRow*> ranked;
  for (const auto& row : report.rows) ranked.push_back(&row);
  std::sort(ranked.begin(), ranked.end(),
            [](const CandidateRow* a, const CandidateRow* b) {
              return detail::rank_before(*a, *b);
            });
  for (const auto* row : ranked) report.ranking.push_back(row->label);

  const auto failures_path = run_dir / "failures.json";
  if (std::filesystem::exists(failures_path)) {
    for (const auto& jf : nlohmann::json::parse(read_text_file(failures_path))) {
      report.failures.emplace_back(jf.at("label").get<std::string>(),
                                   jf.at("error").get<std::string>());
    }
  }

  for (const auto& label : detail::sorted_files(run_dir / "annotations", ".json")) {
    const auto set = AnnotationSet::load(rundir::annotations(run_dir, label));
    if (!set.failures.empty()) {
      report.annotation_failures.emplace_back(label,
                                              static_cast<int>(set.failures.size()));
      report.partial_annotation_failure = true;
    }
  }
  return report;
}

inline void write_report(const std::filesystem::path& run_dir, const RunReport& report) {
  write_text_file(run_dir / "report.json", report.to_json().dump(2) + "\n");
  write_text_file(run_dir / "report.md", report.to_markdown());
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/// Generate (or replay) annotations per endpoint, build tier-filtered
/// candidate matrices, cross-validate every candidate plus the expert
/// baseline, compare candidates against the expert reference, and emit the
/// ranked report. Per-candidate errors are recorded and the remaining
/// candidates continue. Deterministic given cached annotations and seeds.
inline RunReport run_full(const RunConfig& config) {
  config.validate();

  // parse every referenced file before any network call
  const MisconceptionLibrary library = MisconceptionLibrary::load(config.library_file);
  const QMatrix expert_q = load_qmatrix(config.expert_qmatrix);
  const ResponseLog responses = ResponseLog::load(config.responses);
  std::vector<AssessmentItem> items;
  if (!config.items_file.empty()) items = load_items(config.items_file);
  std::vector<ExpertExemplar> exemplars;
  if (!config.exemplars_file.empty()) {
    exemplars = load_exemplars(config.exemplars_file, library);
  }
  std::vector<std::pair<std::string, AnnotationSet>> imported;
  for (const auto& spec : config.annotations) {
    imported.emplace_back(spec.label, AnnotationSet::load(spec.path));
  }

  const auto run_dir = config.run_dir();
  std::filesystem::create_directories(run_dir);
  write_text_file(run_dir / "config.json", config.to_json().dump(2) + "\n");
  RunLogger logger(run_dir);
  logger.log("run '" + config.run_name + "' started");

  bool partial_annotation_failure = false;
  std::vector<std::pair<std::string, AnnotationSet>> annotation_sets;

  // imported annotation files are copied byte-for-byte into the run dir
  for (std::size_t i = 0; i < imported.size(); ++i) {
    const auto& spec = config.annotations[i];
    write_text_file(rundir::annotations(run_dir, spec.label),
                    read_text_file(spec.path));
    logger.log("imported annotations '" + spec.label + "' from " + spec.path.string());
    annotation_sets.push_back(std::move(imported[i]));
  }

  for (const auto& endpoint : config.endpoints) {
    const std::string digest = fnv1a_hex(read_text_file(config.items_file));
    const auto cache_path = rundir::annotations(run_dir, endpoint.label);
    bool reused = false;
    if (std::filesystem::exists(cache_path)) {
      AnnotationSet cached = AnnotationSet::load(cache_path);
      if (cached.provenance.endpoint_label == endpoint.label &&
          cached.provenance.model == endpoint.model_name &&
          cached.provenance.prompt_version == to_string(config.version) &&
          cached.provenance.items_digest == digest) {
        logger.log("reusing cached annotations for '" + endpoint.label + "'");
        partial_annotation_failure |= !cached.failures.empty();
        annotation_sets.emplace_back(endpoint.label, std::move(cached));
        reused = true;
      }
    }
    if (reused) continue;
    logger.log("requesting annotations from '" + endpoint.label + "' (" +
               endpoint.base_url + ", model " + endpoint.model_name + ", " +
               to_string(config.version) + ")");
    std::vector<std::string> warnings;
    AnnotationSet set = annotate_assessment(endpoint, items, config.version, library,
                                            exemplars, &warnings);
    set.provenance.items_digest = digest;
    for (const auto& w : warnings) logger.log("warning: " + w);
    if (!set.failures.empty()) {
      partial_annotation_failure = true;
      logger.log("'" + endpoint.label + "': " + std::to_string(set.failures.size()) +
                 " item(s) failed annotation");
    }
    set.save(cache_path);
    annotation_sets.emplace_back(endpoint.label, std::move(set));
  }

  // candidate matrices
  struct Candidate {
    std::string label;
    QMatrix q;
  };
  std::vector<Candidate> built;
  std::vector<std::pair<std::string, std::string>> failures;

  std::vector<std::string> item_order;
  if (!items.empty()) {
    for (const auto& it : items) item_order.push_back(it.item_id);
  }

  for (const auto& [label, set] : annotation_sets) {
    if (set.provenance.prompt_version == "V0") {
      logger.log("skipping '" + label +
                 "': V0 annotations carry no misconception ids to map");
      continue;
    }
    std::vector<std::string> order = item_order;
    if (order.empty()) {
      for (const auto& item : set.items) order.push_back(item.item_id);
    }
    for (const auto tier : config.tiers) {
      const std::string candidate_label = label + "-" + to_string(tier);
      try {
        QMatrix q = build_qmatrix(set, tier, library, order);
        save_qmatrix(q, rundir::qmatrix(run_dir, candidate_label));
        const auto zero_rows = q.zero_row_items();
        if (!zero_rows.empty()) {
          logger.log("candidate '" + candidate_label + "': " +
                     std::to_string(zero_rows.size()) +
                     " degenerate item(s) with all-zero rows");
        }
        built.push_back({candidate_label, std::move(q)});
      } catch (const std::exception& e) {
        failures.emplace_back(candidate_label, e.what());
        logger.log("candidate '" + candidate_label + "' failed: " + e.what());
      }
    }
  }
  for (const auto& spec : config.candidates) {
    try {
      QMatrix q = load_qmatrix(spec.path);
      save_qmatrix(q, rundir::qmatrix(run_dir, spec.label));
      built.push_back({spec.label, std::move(q)});
    } catch (const std::exception& e) {
      failures.emplace_back(spec.label, e.what());
      logger.log("candidate '" + spec.label + "' failed: " + e.what());
    }
  }

  {
    std::set<std::string> labels;
    for (const auto& c : built) {
      if (!labels.insert(c.label).second) {
        throw std::runtime_error("duplicate candidate label '" + c.label + "'");
      }
      if (c.label == rundir::kExpertBaselineLabel) {
        throw std::runtime_error("candidate label '" + c.label + "' is reserved");
      }
    }
  }

  // validation + comparison per candidate
  std::mutex failures_mutex;
  auto process_candidate = [&](const Candidate& c) {
    try {
      const FitReport fit = cross_validate(responses, c.q, config.cdm, config.n_repeats);
      write_text_file(rundir::fit(run_dir, c.label), fit.to_json().dump(2) + "\n");
      logger.log("validated '" + c.label + "': AUC " +
                 detail::format_fixed(fit.auc_mean, 4) + " ± " +
                 detail::format_fixed(fit.auc_std, 4) + ", RMSE " +
                 detail::format_fixed(fit.rmse_mean, 4) + " (" +
                 detail::format_fixed(fit.elapsed_seconds, 1) + " s)");
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(failures_mutex);
      failures.emplace_back(c.label, std::string("validation: ") + e.what());
      logger.log("candidate '" + c.label + "' validation failed: " + e.what());
      return;
    }
    try {
      const ConfusionStats stats = compare(c.q, expert_q);
      write_text_file(rundir::comparison(run_dir, c.label),
                      stats.to_json().dump(2) + "\n");
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(failures_mutex);
      failures.emplace_back(c.label, std::string("comparison: ") + e.what());
      logger.log("candidate '" + c.label + "' comparison failed: " + e.what());
    }
  };

  if (config.parallel_candidates && built.size() > 1) {
    std::atomic<std::size_t> next{0};
    const std::size_t n_workers =
        std::min<std::size_t>(built.size(), std::thread::hardware_concurrency() > 0
                                                ? std::thread::hardware_concurrency()
                                                : 2);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_workers; ++t) {
      pool.emplace_back([&]() {
        while (true) {
          const std::size_t i = next.fetch_add(1);
          if (i >= built.size()) return;
          process_candidate(built[i]);
        }
      });
    }
    for (auto& t : pool) t.join();
  } else {
    for (const auto& c : built) process_candidate(c);
  }

  // expert baseline fit
  {
    const FitReport fit =
        cross_validate(responses, expert_q, config.cdm, config.n_repeats);
    write_text_file(rundir::fit(run_dir, rundir::kExpertBaselineLabel),
                    fit.to_json().dump(2) + "\n");
    logger.log("expert baseline: AUC " + detail::format_fixed(fit.auc_mean, 4) +
               " ± " + detail::format_fixed(fit.auc_std, 4) + ", RMSE " +
               detail::format_fixed(fit.rmse_mean, 4));
  }

  std::sort(failures.begin(), failures.end());
  nlohmann::ordered_json jf = nlohmann::ordered_json::array();
  for (const auto& [label, error] : failures) {
    jf.push_back({{"label", label}, {"error", error}});
  }
  write_text_file(run_dir / "failures.json", jf.dump(2) + "\n");

  RunReport report = make_report(run_dir);
  write_report(run_dir, report);
  report.partial_annotation_failure |= partial_annotation_failure;
  logger.log("run '" + config.run_name + "' finished");
  return report;
}

}  // namespace qmv
