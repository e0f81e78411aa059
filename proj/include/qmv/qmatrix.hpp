#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "qmv/io.hpp"

namespace qmv {

// ---------------------------------------------------------------------------
// Confidence tiers
// ---------------------------------------------------------------------------

/// Total order: High > Medium > Low.
enum class ConfidenceTier : int { Low = 0, Medium = 1, High = 2 };

inline const char* to_string(ConfidenceTier t) {
  switch (t) {
    case ConfidenceTier::Low: return "Low";
    case ConfidenceTier::Medium: return "Medium";
    case ConfidenceTier::High: return "High";
  }
  throw std::logic_error("invalid ConfidenceTier");
}

inline ConfidenceTier tier_from_string(std::string_view s) {
  if (s == "Low") return ConfidenceTier::Low;
  if (s == "Medium") return ConfidenceTier::Medium;
  if (s == "High") return ConfidenceTier::High;
  throw std::runtime_error("unknown confidence tier: '" + std::string(s) +
                           "' (expected High, Medium or Low)");
}

inline bool meets_threshold(ConfidenceTier tier, ConfidenceTier threshold) {
  return static_cast<int>(tier) >= static_cast<int>(threshold);
}

// ---------------------------------------------------------------------------
// Misconception library
// ---------------------------------------------------------------------------

struct Misconception {
  std::string id;
  std::string description;
};

/// Ordered misconception catalogue. Entry order is the canonical column
/// order of every Q-matrix built from it.
class MisconceptionLibrary {
 public:
  MisconceptionLibrary() = default;

  explicit MisconceptionLibrary(std::vector<Misconception> entries)
      : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].id.empty()) {
        throw std::runtime_error("misconception library entry " +
                                 std::to_string(i) + " has an empty id");
      }
      if (!index_.emplace(entries_[i].id, i).second) {
        throw std::runtime_error("duplicate misconception id '" +
                                 entries_[i].id + "' in library");
      }
    }
  }

  static MisconceptionLibrary from_json(const nlohmann::json& j) {
    if (!j.is_array()) {
      throw std::runtime_error("misconception library must be a JSON array");
    }
    std::vector<Misconception> entries;
    entries.reserve(j.size());
    for (const auto& e : j) {
      entries.push_back({e.at("id").get<std::string>(),
                         e.at("description").get<std::string>()});
    }
    return MisconceptionLibrary(std::move(entries));
  }

  static MisconceptionLibrary load(const std::filesystem::path& path) {
    return from_json(nlohmann::json::parse(read_text_file(path)));
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Misconception>& entries() const { return entries_; }

  bool contains(std::string_view id) const {
    return index_.find(std::string(id)) != index_.end();
  }

  std::size_t index_of(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) {
      throw std::runtime_error("misconception id '" + std::string(id) +
                               "' not in library");
    }
    return it->second;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.id);
    return out;
  }

 private:
  std::vector<Misconception> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Q-matrix
// ---------------------------------------------------------------------------

/// Binary item x attribute matrix with labeled axes. Immutable after
/// construction; cells are row-major.
class QMatrix {
 public:
  QMatrix(std::vector<std::string> item_ids,
          std::vector<std::string> attribute_ids,
          std::vector<std::uint8_t> cells)
      : item_ids_(std::move(item_ids)),
        attribute_ids_(std::move(attribute_ids)),
        cells_(std::move(cells)) {
    if (item_ids_.empty()) throw std::runtime_error("Q-matrix needs at least one item");
    if (attribute_ids_.empty()) {
      throw std::runtime_error("Q-matrix needs at least one attribute");
    }
    if (cells_.size() != item_ids_.size() * attribute_ids_.size()) {
      throw std::runtime_error("Q-matrix cell count does not match axes");
    }
    check_unique(item_ids_, "item");
    check_unique(attribute_ids_, "attribute");
    for (auto c : cells_) {
      if (c != 0 && c != 1) throw std::runtime_error("Q-matrix cells must be 0 or 1");
    }
    for (std::size_t i = 0; i < item_ids_.size(); ++i) item_index_[item_ids_[i]] = i;
    for (std::size_t k = 0; k < attribute_ids_.size(); ++k) {
      attribute_index_[attribute_ids_[k]] = k;
    }
  }

  std::size_t rows() const { return item_ids_.size(); }
  std::size_t cols() const { return attribute_ids_.size(); }
  std::size_t cell_count() const { return cells_.size(); }

  std::uint8_t at(std::size_t i, std::size_t k) const {
    return cells_[i * cols() + k];
  }

  const std::vector<std::string>& item_ids() const { return item_ids_; }
  const std::vector<std::string>& attribute_ids() const { return attribute_ids_; }
  const std::vector<std::uint8_t>& cells() const { return cells_; }

  std::optional<std::size_t> item_index(std::string_view id) const {
    auto it = item_index_.find(std::string(id));
    if (it == item_index_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<std::size_t> attribute_index(std::string_view id) const {
    auto it = attribute_index_.find(std::string(id));
    if (it == attribute_index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t ones_count() const {
    std::size_t n = 0;
    for (auto c : cells_) n += c;
    return n;
  }

  /// Items whose row is all zeros (degenerate for a CDM: no attribute
  /// drives the prediction).
  std::vector<std::string> zero_row_items() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < rows(); ++i) {
      bool any = false;
      for (std::size_t k = 0; k < cols(); ++k) {
        if (at(i, k)) { any = true; break; }
      }
      if (!any) out.push_back(item_ids_[i]);
    }
    return out;
  }

  friend bool operator==(const QMatrix& a, const QMatrix& b) {
    return a.item_ids_ == b.item_ids_ && a.attribute_ids_ == b.attribute_ids_ &&
           a.cells_ == b.cells_;
  }

 private:
  static void check_unique(const std::vector<std::string>& ids, const char* axis) {
    std::unordered_set<std::string> seen;
    for (const auto& id : ids) {
      if (id.empty()) {
        throw std::runtime_error(std::string("empty ") + axis + " id in Q-matrix");
      }
      if (!seen.insert(id).second) {
        throw std::runtime_error(std::string("duplicate ") + axis + " id '" + id +
                                 "' in Q-matrix");
      }
    }
  }

  std::vector<std::string> item_ids_;
  std::vector<std::string> attribute_ids_;
  std::vector<std::uint8_t> cells_;
  std::unordered_map<std::string, std::size_t> item_index_;
  std::unordered_map<std::string, std::size_t> attribute_index_;
};

// ---------------------------------------------------------------------------
// CSV dialect
// ---------------------------------------------------------------------------
// Header: "item,<attribute ids in library order>". One row per item, cells
// strictly "0"/"1", trailing newline, no quoting (ids must not contain
// commas). parse/serialize round-trip bit-exactly.

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      fields.emplace_back(line.substr(start));
      break;
    }
    fields.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

inline std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t pos = text.find('\n', start);
    std::string_view line = (pos == std::string_view::npos)
                                ? text.substr(start)
                                : text.substr(start, pos - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.emplace_back(line);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  // a trailing newline produces one empty tail entry; drop it
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

}  // namespace detail

inline QMatrix parse_qmatrix(std::string_view text) {
  const auto lines = detail::split_lines(text);
  if (lines.size() < 2) {
    throw std::runtime_error("Q-matrix CSV needs a header and at least one item row");
  }
  const auto header = detail::split_csv_line(lines[0]);
  if (header.empty() || header[0] != "item") {
    throw std::runtime_error("Q-matrix CSV header must start with 'item'");
  }
  if (header.size() < 2) {
    throw std::runtime_error("Q-matrix CSV header lists no attributes");
  }
  std::vector<std::string> attribute_ids(header.begin() + 1, header.end());
  {
    std::unordered_set<std::string> seen;
    for (std::size_t k = 0; k < attribute_ids.size(); ++k) {
      if (attribute_ids[k].empty()) {
        throw std::runtime_error("empty attribute id in header (column " +
                                 std::to_string(k + 2) + ")");
      }
      if (!seen.insert(attribute_ids[k]).second) {
        throw std::runtime_error("duplicate attribute id '" + attribute_ids[k] +
                                 "' in header (column " + std::to_string(k + 2) + ")");
      }
    }
  }

  const std::size_t k_count = attribute_ids.size();
  std::vector<std::string> item_ids;
  std::vector<std::uint8_t> cells;
  std::unordered_set<std::string> seen_items;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto fields = detail::split_csv_line(lines[r]);
    if (fields.size() != k_count + 1) {
      throw std::runtime_error("ragged row " + std::to_string(r) + ": expected " +
                               std::to_string(k_count + 1) + " fields, got " +
                               std::to_string(fields.size()));
    }
    if (fields[0].empty()) {
      throw std::runtime_error("empty item id at row " + std::to_string(r));
    }
    if (!seen_items.insert(fields[0]).second) {
      throw std::runtime_error("duplicate item id '" + fields[0] + "' at row " +
                               std::to_string(r));
    }
    item_ids.push_back(fields[0]);
    for (std::size_t k = 0; k < k_count; ++k) {
      const std::string& cell = fields[k + 1];
      if (cell == "0") {
        cells.push_back(0);
      } else if (cell == "1") {
        cells.push_back(1);
      } else {
        throw std::runtime_error("non-binary cell at (row " + std::to_string(r) +
                                 ", col \"" + attribute_ids[k] + "\"): '" + cell + "'");
      }
    }
  }
  return QMatrix(std::move(item_ids), std::move(attribute_ids), std::move(cells));
}

inline QMatrix parse_qmatrix(std::istream& in) {
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_qmatrix(std::string_view(buf.str()));
}

inline std::string serialize_qmatrix(const QMatrix& m) {
  std::string out = "item";
  for (const auto& a : m.attribute_ids()) {
    out += ',';
    out += a;
  }
  out += '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out += m.item_ids()[i];
    for (std::size_t k = 0; k < m.cols(); ++k) {
      out += ',';
      out += m.at(i, k) ? '1' : '0';
    }
    out += '\n';
  }
  return out;
}

inline QMatrix load_qmatrix(const std::filesystem::path& path) {
  try {
    return parse_qmatrix(std::string_view(read_text_file(path)));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

inline void save_qmatrix(const QMatrix& m, const std::filesystem::path& path) {
  write_text_file(path, serialize_qmatrix(m));
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

struct AnnotationLabel {
  std::string misconception_id;
  ConfidenceTier tier = ConfidenceTier::Low;
  std::string rationale;
};

struct OptionAnnotation {
  std::string option_id;
  std::vector<AnnotationLabel> labels;
};

/// V0 prompts predate the library, so their output cannot be mapped onto
/// matrix cells; it is kept verbatim for qualitative inspection.
struct FreeTextNote {
  std::string option_id;
  std::string description;
  std::string rationale;
};

struct ItemAnnotation {
  std::string item_id;
  std::vector<OptionAnnotation> options;
  std::vector<FreeTextNote> free_text;
};

struct AnnotationFailure {
  std::string item_id;
  std::string error;
};

struct Provenance {
  std::string model;
  std::string prompt_version;
  std::string endpoint_label;
  std::string timestamp;
  double temperature = 0.0;
  /// Digest of the items file the set was generated from; cache key part.
  std::string items_digest;
};

struct AnnotationSet {
  Provenance provenance;
  std::vector<ItemAnnotation> items;
  std::vector<AnnotationFailure> failures;

  /// Collapses duplicate (item, option, misconception) labels to the
  /// highest tier, keeping first-seen order.
  void normalize() {
    for (auto& item : items) {
      for (auto& opt : item.options) {
        std::vector<AnnotationLabel> deduped;
        std::unordered_map<std::string, std::size_t> pos;
        for (auto& label : opt.labels) {
          auto it = pos.find(label.misconception_id);
          if (it == pos.end()) {
            pos.emplace(label.misconception_id, deduped.size());
            deduped.push_back(std::move(label));
          } else if (meets_threshold(label.tier, deduped[it->second].tier) &&
                     label.tier != deduped[it->second].tier) {
            deduped[it->second] = std::move(label);
          }
        }
        opt.labels = std::move(deduped);
      }
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["provenance"] = {{"model", provenance.model},
                       {"prompt_version", provenance.prompt_version},
                       {"endpoint_label", provenance.endpoint_label},
                       {"temperature", provenance.temperature},
                       {"timestamp", provenance.timestamp}};
    if (!provenance.items_digest.empty()) {
      j["provenance"]["items_digest"] = provenance.items_digest;
    }
    j["items"] = nlohmann::ordered_json::array();
    for (const auto& item : items) {
      nlohmann::ordered_json ji;
      ji["item_id"] = item.item_id;
      ji["options"] = nlohmann::ordered_json::array();
      for (const auto& opt : item.options) {
        nlohmann::ordered_json jo;
        jo["option_id"] = opt.option_id;
        jo["labels"] = nlohmann::ordered_json::array();
        for (const auto& label : opt.labels) {
          jo["labels"].push_back({{"misconception_id", label.misconception_id},
                                  {"confidence", to_string(label.tier)},
                                  {"rationale", label.rationale}});
        }
        ji["options"].push_back(std::move(jo));
      }
      if (!item.free_text.empty()) {
        ji["free_text"] = nlohmann::ordered_json::array();
        for (const auto& note : item.free_text) {
          ji["free_text"].push_back({{"option_id", note.option_id},
                                     {"description", note.description},
                                     {"rationale", note.rationale}});
        }
      }
      j["items"].push_back(std::move(ji));
    }
    j["failures"] = nlohmann::ordered_json::array();
    for (const auto& f : failures) {
      j["failures"].push_back({{"item_id", f.item_id}, {"error", f.error}});
    }
    return j;
  }

  static AnnotationSet from_json(const nlohmann::json& j) {
    AnnotationSet set;
    if (j.contains("provenance")) {
      const auto& p = j.at("provenance");
      set.provenance.model = p.value("model", "");
      set.provenance.prompt_version = p.value("prompt_version", "");
      set.provenance.endpoint_label = p.value("endpoint_label", "");
      set.provenance.timestamp = p.value("timestamp", "");
      set.provenance.temperature = p.value("temperature", 0.0);
      set.provenance.items_digest = p.value("items_digest", "");
    }
    for (const auto& ji : j.at("items")) {
      ItemAnnotation item;
      item.item_id = ji.at("item_id").get<std::string>();
      for (const auto& jo : ji.value("options", nlohmann::json::array())) {
        OptionAnnotation opt;
        opt.option_id = jo.at("option_id").get<std::string>();
        for (const auto& jl : jo.value("labels", nlohmann::json::array())) {
          opt.labels.push_back({jl.at("misconception_id").get<std::string>(),
                                tier_from_string(jl.at("confidence").get<std::string>()),
                                jl.value("rationale", "")});
        }
        item.options.push_back(std::move(opt));
      }
      for (const auto& jn : ji.value("free_text", nlohmann::json::array())) {
        item.free_text.push_back({jn.value("option_id", ""),
                                  jn.value("description", ""),
                                  jn.value("rationale", "")});
      }
      set.items.push_back(std::move(item));
    }
    for (const auto& jf : j.value("failures", nlohmann::json::array())) {
      set.failures.push_back({jf.at("item_id").get<std::string>(),
                              jf.value("error", "")});
    }
    set.normalize();
    return set;
  }

  static AnnotationSet load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(read_text_file(path)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": " + e.what());
    }
  }

  void save(const std::filesystem::path& path) const {
    write_text_file(path, to_json().dump(2) + "\n");
  }
};

// ---------------------------------------------------------------------------
// Tier-filtered Q-matrix construction
// ---------------------------------------------------------------------------

/// Item-level aggregation: cell(i,k)=1 iff any option of item i carries
/// misconception k at tier >= threshold. Axes follow item_ids and library
/// order.
inline QMatrix build_qmatrix(const AnnotationSet& annotations,
                             ConfidenceTier threshold,
                             const MisconceptionLibrary& library,
                             const std::vector<std::string>& item_ids) {
  if (library.empty()) {
    throw std::runtime_error("build_qmatrix: misconception library is empty");
  }
  if (item_ids.empty()) {
    throw std::runtime_error("build_qmatrix: item id list is empty");
  }
  std::unordered_map<std::string, std::size_t> item_pos;
  for (std::size_t i = 0; i < item_ids.size(); ++i) item_pos[item_ids[i]] = i;

  const std::size_t k_count = library.size();
  std::vector<std::uint8_t> cells(item_ids.size() * k_count, 0);
  for (const auto& item : annotations.items) {
    auto it = item_pos.find(item.item_id);
    if (it == item_pos.end()) {
      throw std::runtime_error("build_qmatrix: annotation references unknown item '" +
                               item.item_id + "'");
    }
    const std::size_t row = it->second;
    for (const auto& opt : item.options) {
      for (const auto& label : opt.labels) {
        if (!library.contains(label.misconception_id)) {
          throw std::runtime_error(
              "build_qmatrix: annotation references misconception '" +
              label.misconception_id + "' not in library (item '" + item.item_id +
              "')");
        }
        if (meets_threshold(label.tier, threshold)) {
          cells[row * k_count + library.index_of(label.misconception_id)] = 1;
        }
      }
    }
  }
  return QMatrix(item_ids, library.ids(), std::move(cells));
}

// ---------------------------------------------------------------------------
// Confusion statistics
// ---------------------------------------------------------------------------

struct ConfusionStats {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;
  double tpr = 0.0;
  double tnr = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;

  /// Derives the ratio fields from raw cell counts. Zero denominators
  /// yield 0 so reports stay finite and serializable.
  ///
  /// micro_f1 is positive-class F1 (2TP / (2TP+FP+FN)); macro_f1 is the
  /// unweighted mean of positive- and negative-class F1 over cells.
  static ConfusionStats from_counts(std::int64_t tp, std::int64_t fp,
                                    std::int64_t fn, std::int64_t tn) {
    if (tp < 0 || fp < 0 || fn < 0 || tn < 0) {
      throw std::runtime_error("confusion counts must be non-negative");
    }
    ConfusionStats s;
    s.tp = tp;
    s.fp = fp;
    s.fn = fn;
    s.tn = tn;
    auto ratio = [](double num, double den) { return den > 0 ? num / den : 0.0; };
    s.precision = ratio(double(tp), double(tp + fp));
    s.recall = ratio(double(tp), double(tp + fn));
    s.tpr = s.recall;
    s.tnr = ratio(double(tn), double(tn + fp));
    s.micro_f1 = ratio(2.0 * double(tp), double(2 * tp + fp + fn));
    const double f1_neg = ratio(2.0 * double(tn), double(2 * tn + fn + fp));
    s.macro_f1 = 0.5 * (s.micro_f1 + f1_neg);
    return s;
  }

  nlohmann::ordered_json to_json() const {
    return {{"tp", tp},         {"fp", fp},
            {"fn", fn},         {"tn", tn},
            {"tpr", tpr},       {"tnr", tnr},
            {"precision", precision}, {"recall", recall},
            {"micro_f1", micro_f1},   {"macro_f1", macro_f1}};
  }

  static ConfusionStats from_json(const nlohmann::json& j) {
    return from_counts(j.at("tp").get<std::int64_t>(), j.at("fp").get<std::int64_t>(),
                       j.at("fn").get<std::int64_t>(), j.at("tn").get<std::int64_t>());
  }
};

/// Cell-wise confusion of a candidate matrix against a reference with
/// identical axes.
inline ConfusionStats compare(const QMatrix& candidate, const QMatrix& reference) {
  if (candidate.rows() != reference.rows()) {
    throw std::runtime_error("compare: item axis size mismatch (" +
                             std::to_string(candidate.rows()) + " vs " +
                             std::to_string(reference.rows()) + ")");
  }
  if (candidate.cols() != reference.cols()) {
    throw std::runtime_error("compare: attribute axis size mismatch (" +
                             std::to_string(candidate.cols()) + " vs " +
                             std::to_string(reference.cols()) + ")");
  }
  for (std::size_t i = 0; i < candidate.rows(); ++i) {
    if (candidate.item_ids()[i] != reference.item_ids()[i]) {
      throw std::runtime_error("compare: item axis mismatch at index " +
                               std::to_string(i) + ": '" + candidate.item_ids()[i] +
                               "' vs '" + reference.item_ids()[i] + "'");
    }
  }
  for (std::size_t k = 0; k < candidate.cols(); ++k) {
    if (candidate.attribute_ids()[k] != reference.attribute_ids()[k]) {
      throw std::runtime_error("compare: attribute axis mismatch at index " +
                               std::to_string(k) + ": '" +
                               candidate.attribute_ids()[k] + "' vs '" +
                               reference.attribute_ids()[k] + "'");
    }
  }
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t idx = 0; idx < candidate.cell_count(); ++idx) {
    const bool c = candidate.cells()[idx] != 0;
    const bool r = reference.cells()[idx] != 0;
    if (c && r) ++tp;
    else if (c && !r) ++fp;
    else if (!c && r) ++fn;
    else ++tn;
  }
  return ConfusionStats::from_counts(tp, fp, fn, tn);
}

}  // namespace qmv
