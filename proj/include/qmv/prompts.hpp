#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "qmv/qmatrix.hpp"

namespace qmv {

// ---------------------------------------------------------------------------
// Prompt versions
// ---------------------------------------------------------------------------
// V0: open-ended baseline (free-text misconception descriptions).
// V1: adds the misconception library and confidence calibration.
// V2: adds the three critical evaluation principles.
// V3: adds expert few-shot examples.

enum class PromptVersion { V0 = 0, V1 = 1, V2 = 2, V3 = 3 };

inline const char* to_string(PromptVersion v) {
  switch (v) {
    case PromptVersion::V0: return "V0";
    case PromptVersion::V1: return "V1";
    case PromptVersion::V2: return "V2";
    case PromptVersion::V3: return "V3";
  }
  throw std::logic_error("invalid PromptVersion");
}

inline PromptVersion version_from_string(std::string_view s) {
  if (s == "V0" || s == "v0") return PromptVersion::V0;
  if (s == "V1" || s == "v1") return PromptVersion::V1;
  if (s == "V2" || s == "v2") return PromptVersion::V2;
  if (s == "V3" || s == "v3") return PromptVersion::V3;
  throw std::runtime_error("unknown prompt version: '" + std::string(s) +
                           "' (expected V0..V3)");
}

struct PromptFlags {
  bool has_library = false;
  bool has_confidence = false;
  bool has_principles = false;
  bool has_fewshot = false;
};

inline PromptFlags flags_for(PromptVersion v) {
  switch (v) {
    case PromptVersion::V0: return {false, false, false, false};
    case PromptVersion::V1: return {true, true, false, false};
    case PromptVersion::V2: return {true, true, true, false};
    case PromptVersion::V3: return {true, true, true, true};
  }
  throw std::logic_error("invalid PromptVersion");
}

// ---------------------------------------------------------------------------
// Assessment items and expert exemplars
// ---------------------------------------------------------------------------

struct AssessmentOption {
  std::string option_id;
  std::string text;
  bool is_correct = false;
};

struct AssessmentItem {
  std::string item_id;
  std::string stem;
  std::vector<AssessmentOption> options;

  void validate() const {
    if (item_id.empty()) throw std::runtime_error("assessment item with empty id");
    if (options.size() < 2) {
      throw std::runtime_error("item '" + item_id + "' needs at least 2 options");
    }
    int correct = 0;
    std::unordered_set<std::string> seen;
    for (const auto& o : options) {
      if (o.option_id.empty()) {
        throw std::runtime_error("item '" + item_id + "' has an option with empty id");
      }
      if (!seen.insert(o.option_id).second) {
        throw std::runtime_error("item '" + item_id + "' has duplicate option id '" +
                                 o.option_id + "'");
      }
      correct += o.is_correct ? 1 : 0;
    }
    if (correct != 1) {
      throw std::runtime_error("item '" + item_id + "' must have exactly one correct option, has " +
                               std::to_string(correct));
    }
  }

  static AssessmentItem from_json(const nlohmann::json& j) {
    AssessmentItem item;
    item.item_id = j.at("item_id").get<std::string>();
    item.stem = j.at("stem").get<std::string>();
    for (const auto& jo : j.at("options")) {
      item.options.push_back({jo.at("option_id").get<std::string>(),
                              jo.at("text").get<std::string>(),
                              jo.at("is_correct").get<bool>()});
    }
    item.validate();
    return item;
  }
};

inline std::vector<AssessmentItem> items_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::runtime_error("items file must be a JSON array");
  std::vector<AssessmentItem> items;
  std::unordered_set<std::string> seen;
  for (const auto& ji : j) {
    items.push_back(AssessmentItem::from_json(ji));
    if (!seen.insert(items.back().item_id).second) {
      throw std::runtime_error("duplicate item id '" + items.back().item_id +
                               "' in items file");
    }
  }
  return items;
}

inline std::vector<AssessmentItem> load_items(const std::filesystem::path& path) {
  try {
    return items_from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

struct ExemplarOptionLabels {
  std::string option_id;
  std::vector<AnnotationLabel> labels;
};

/// One expert-annotated item, rendered into the V3 few-shot block.
struct ExpertExemplar {
  AssessmentItem item;
  std::vector<ExemplarOptionLabels> option_labels;
  std::string reasoning;

  static ExpertExemplar from_json(const nlohmann::json& j) {
    ExpertExemplar e;
    e.item = AssessmentItem::from_json(j.at("item"));
    for (const auto& jo : j.value("option_labels", nlohmann::json::array())) {
      ExemplarOptionLabels ol;
      ol.option_id = jo.at("option_id").get<std::string>();
      for (const auto& jl : jo.value("labels", nlohmann::json::array())) {
        ol.labels.push_back({jl.at("misconception_id").get<std::string>(),
                             tier_from_string(jl.at("confidence").get<std::string>()),
                             jl.value("rationale", "")});
      }
      e.option_labels.push_back(std::move(ol));
    }
    e.reasoning = j.value("reasoning", "");
    return e;
  }
};

inline std::vector<ExpertExemplar> load_exemplars(const std::filesystem::path& path,
                                                  const MisconceptionLibrary& library) {
  std::vector<ExpertExemplar> out;
  try {
    const auto j = nlohmann::json::parse(read_text_file(path));
    if (!j.is_array()) throw std::runtime_error("exemplars file must be a JSON array");
    for (const auto& je : j) out.push_back(ExpertExemplar::from_json(je));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  for (const auto& e : out) {
    for (const auto& ol : e.option_labels) {
      for (const auto& label : ol.labels) {
        if (!library.contains(label.misconception_id)) {
          throw std::runtime_error("exemplar for item '" + e.item.item_id +
                                   "' references misconception '" +
                                   label.misconception_id + "' not in library");
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompt assembly
// ---------------------------------------------------------------------------

/// Message pair plus the JSON schema the endpoint is asked to enforce.
/// Content is a pure function of (version, item, library, exemplars).
struct PromptBundle {
  std::string system_text;
  std::string user_text;
  nlohmann::ordered_json schema;
  PromptVersion version = PromptVersion::V0;
  std::string item_id;
};

/// Response schema handed to the endpoint's structured-output constraint.
/// V0 has no library ids to reference, so options carry free-text
/// descriptions instead of (misconception_id, confidence) labels.
inline nlohmann::ordered_json annotation_schema(PromptVersion version) {
  using J = nlohmann::ordered_json;
  J label_schema;
  if (version == PromptVersion::V0) {
    label_schema = {
        {"type", "object"},
        {"properties",
         {{"description", {{"type", "string"}}}, {"rationale", {{"type", "string"}}}}},
        {"required", {"description"}},
        {"additionalProperties", false}};
  } else {
    label_schema = {
        {"type", "object"},
        {"properties",
         {{"misconception_id", {{"type", "string"}}},
          {"confidence", {{"enum", {"High", "Medium", "Low"}}}},
          {"rationale", {{"type", "string"}}}}},
        {"required", {"misconception_id", "confidence"}},
        {"additionalProperties", false}};
  }
  const char* label_key = version == PromptVersion::V0 ? "descriptions" : "labels";
  J option_schema = {
      {"type", "object"},
      {"properties",
       {{"option_id", {{"type", "string"}}},
        {label_key, {{"type", "array"}, {"items", label_schema}}}}},
      {"required", {"option_id", label_key}},
      {"additionalProperties", false}};
  return {{"type", "object"},
          {"properties",
           {{"item_id", {{"type", "string"}}},
            {"options", {{"type", "array"}, {"items", option_schema}}}}},
          {"required", {"item_id", "options"}},
          {"additionalProperties", false}};
}

namespace detail {

inline void render_item_block(std::string& out, const AssessmentItem& item) {
  out += "Item ID: " + item.item_id + "\n";
  out += "Stem: " + item.stem + "\n";
  out += "Options:\n";
  for (const auto& o : item.options) {
    out += "  (" + o.option_id + ") " + o.text;
    if (o.is_correct) out += "  [correct answer]";
    out += "\n";
  }
}

inline nlohmann::ordered_json exemplar_output_json(const ExpertExemplar& e) {
  nlohmann::ordered_json j;
  j["item_id"] = e.item.item_id;
  j["options"] = nlohmann::ordered_json::array();
  for (const auto& ol : e.option_labels) {
    nlohmann::ordered_json jo;
    jo["option_id"] = ol.option_id;
    jo["labels"] = nlohmann::ordered_json::array();
    for (const auto& label : ol.labels) {
      jo["labels"].push_back({{"misconception_id", label.misconception_id},
                              {"confidence", to_string(label.tier)},
                              {"rationale", label.rationale}});
    }
    j["options"].push_back(std::move(jo));
  }
  return j;
}

}  // namespace detail

inline PromptBundle build_prompt(PromptVersion version, const AssessmentItem& item,
                                 const MisconceptionLibrary& library,
                                 const std::vector<ExpertExemplar>& exemplars) {
  item.validate();
  const PromptFlags flags = flags_for(version);
  if (flags.has_library && library.empty()) {
    throw std::runtime_error(std::string("build_prompt: ") + to_string(version) +
                             " requires a non-empty misconception library");
  }
  if (flags.has_fewshot && exemplars.empty()) {
    throw std::runtime_error("build_prompt: V3 requires at least one expert exemplar");
  }

  PromptBundle bundle;
  bundle.version = version;
  bundle.item_id = item.item_id;
  bundle.schema = annotation_schema(version);

  std::string& sys = bundle.system_text;
  sys +=
      "You are a physics education researcher analyzing a multiple-choice "
      "thermodynamics assessment item. Your task is to identify the specific "
      "student misconceptions that each answer option reflects.\n";

  if (flags.has_library) {
    sys +=
        "\nUse only the misconception ids from the library below. Do not invent "
        "ids that are not listed.\n\nMisconception library:\n";
    for (const auto& e : library.entries()) {
      sys += "  " + e.id + ": " + e.description + "\n";
    }
  } else {
    sys +=
        "\nFor each answer option, describe in your own words any plausible "
        "misconception a student choosing that option might hold, with a short "
        "rationale. If an option reflects no misconception, return an empty "
        "list for it.\n";
  }

  if (flags.has_confidence) {
    sys +=
        "\nConfidence calibration: rate every label with exactly one of three "
        "tiers.\n"
        "  High: the option directly and unambiguously expresses this misconception.\n"
        "  Medium: the misconception plausibly explains choosing this option, but "
        "other explanations exist.\n"
        "  Low: the link is speculative or depends on an uncommon reading of the "
        "item.\n";
  }

  if (flags.has_principles) {
    sys +=
        "\nCritical evaluation principles: validate every candidate label against "
        "all three criteria before assigning it, and drop the label if any fails.\n"
        "  1. Item-Content Alignment: the concept behind the misconception must be "
        "explicitly tested by this item, not merely share vocabulary with it.\n"
        "  2. Error Attribution: holding the misconception must plausibly lead a "
        "student to select this specific option.\n"
        "  3. Distractor Mapping: attach each label to the particular answer option "
        "whose selection it explains, never to the item as a whole.\n";
  }

  if (flags.has_fewshot) {
    sys += "\nWorked examples annotated by domain experts:\n";
    int n = 1;
    for (const auto& e : exemplars) {
      sys += "\n--- Example " + std::to_string(n++) + " ---\n";
      detail::render_item_block(sys, e.item);
      if (!e.reasoning.empty()) sys += "Expert reasoning: " + e.reasoning + "\n";
      sys += "Expected output: " + detail::exemplar_output_json(e).dump() + "\n";
    }
  }

  std::string& user = bundle.user_text;
  detail::render_item_block(user, item);
  if (version == PromptVersion::V0) {
    user +=
        "\nReturn a single JSON object with the fields item_id and options; each "
        "option carries its option_id and a descriptions array whose entries have "
        "a description and a rationale.";
  } else {
    user +=
        "\nReturn a single JSON object with the fields item_id and options; each "
        "option carries its option_id and a labels array whose entries have a "
        "misconception_id from the library, a confidence tier (High, Medium or "
        "Low), and a rationale.";
  }
  return bundle;
}

}  // namespace qmv
