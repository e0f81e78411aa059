#include <catch2/catch_amalgamated.hpp>

#include "qmv/prompts.hpp"
#include "support/helpers.hpp"

using namespace qmv;

namespace {

bool bundle_contains(const PromptBundle& b, const std::string& needle) {
  return b.system_text.find(needle) != std::string::npos ||
         b.user_text.find(needle) != std::string::npos;
}

const char* kPrinciples[] = {"Item-Content Alignment", "Error Attribution",
                             "Distractor Mapping"};
const char* kTiers[] = {"High", "Medium", "Low"};

struct Inputs {
  MisconceptionLibrary library;
  std::vector<AssessmentItem> items;
  std::vector<ExpertExemplar> exemplars;
};

Inputs load_inputs() {
  Inputs in;
  in.library = MisconceptionLibrary::load(qmv::test::fixture("library.json"));
  in.items = load_items(qmv::test::fixture("items.json"));
  in.exemplars = load_exemplars(qmv::test::fixture("exemplars.json"), in.library);
  return in;
}

}  // namespace

TEST_CASE("fixture items are well-formed") {
  const auto in = load_inputs();
  REQUIRE(in.items.size() == 26);
  REQUIRE(in.exemplars.size() == 5);
  std::size_t exemplar_options = 0;
  for (const auto& e : in.exemplars) exemplar_options += e.item.options.size();
  REQUIRE(exemplar_options == 25);
}

TEST_CASE("V0 bundles carry no library, tiers, principles or examples") {
  const auto in = load_inputs();
  const auto b = build_prompt(PromptVersion::V0, in.items[0], in.library, {});
  for (const auto& entry : in.library.entries()) {
    REQUIRE(!bundle_contains(b, entry.id + ":"));
  }
  for (const char* tier : kTiers) REQUIRE(!bundle_contains(b, tier));
  for (const char* p : kPrinciples) REQUIRE(!bundle_contains(b, p));
  REQUIRE(!bundle_contains(b, "Worked examples"));
}

TEST_CASE("V1 adds library and confidence tiers only") {
  const auto in = load_inputs();
  const auto b = build_prompt(PromptVersion::V1, in.items[0], in.library, {});
  REQUIRE(bundle_contains(b, "A1:"));
  REQUIRE(bundle_contains(b, "D35:"));
  for (const char* tier : kTiers) REQUIRE(bundle_contains(b, tier));
  for (const char* p : kPrinciples) REQUIRE(!bundle_contains(b, p));
  REQUIRE(!bundle_contains(b, "Worked examples"));
}

TEST_CASE("V2 adds the three evaluation principles, no few-shot") {
  const auto in = load_inputs();
  const auto b = build_prompt(PromptVersion::V2, in.items[0], in.library, {});
  REQUIRE(bundle_contains(b, "A1:"));
  for (const char* tier : kTiers) REQUIRE(bundle_contains(b, tier));
  for (const char* p : kPrinciples) REQUIRE(bundle_contains(b, p));
  REQUIRE(!bundle_contains(b, "Worked examples"));
}

TEST_CASE("V3 carries everything including the exemplar block") {
  const auto in = load_inputs();
  const auto b =
      build_prompt(PromptVersion::V3, in.items[10], in.library, in.exemplars);
  REQUIRE(bundle_contains(b, "A1:"));
  for (const char* tier : kTiers) REQUIRE(bundle_contains(b, tier));
  for (const char* p : kPrinciples) REQUIRE(bundle_contains(b, p));
  REQUIRE(bundle_contains(b, "Worked examples"));
  // each exemplar is rendered with its reasoning and expected output
  for (const auto& e : in.exemplars) {
    REQUIRE(b.system_text.find(e.item.stem) != std::string::npos);
    REQUIRE(b.system_text.find(e.reasoning) != std::string::npos);
  }
  REQUIRE(b.system_text.find("Expected output:") != std::string::npos);
}

TEST_CASE("user message renders the item with the correct answer marked") {
  const auto in = load_inputs();
  const auto& item = in.items[0];
  const auto b = build_prompt(PromptVersion::V2, item, in.library, {});
  REQUIRE(b.user_text.find("Item ID: " + item.item_id) != std::string::npos);
  REQUIRE(b.user_text.find(item.stem) != std::string::npos);
  for (const auto& o : item.options) {
    REQUIRE(b.user_text.find(o.text) != std::string::npos);
  }
  REQUIRE(b.user_text.find("[correct answer]") != std::string::npos);
}

TEST_CASE("bundles are byte-identical across calls") {
  const auto in = load_inputs();
  for (auto v : {PromptVersion::V0, PromptVersion::V1, PromptVersion::V2,
                 PromptVersion::V3}) {
    const auto a = build_prompt(v, in.items[3], in.library, in.exemplars);
    const auto b = build_prompt(v, in.items[3], in.library, in.exemplars);
    REQUIRE(a.system_text == b.system_text);
    REQUIRE(a.user_text == b.user_text);
    REQUIRE(a.schema == b.schema);
  }
}

TEST_CASE("preconditions: V3 needs exemplars, V1+ needs a library") {
  const auto in = load_inputs();
  REQUIRE_THROWS(build_prompt(PromptVersion::V3, in.items[0], in.library, {}));
  MisconceptionLibrary empty;
  REQUIRE_THROWS(build_prompt(PromptVersion::V1, in.items[0], empty, {}));
  REQUIRE_THROWS(build_prompt(PromptVersion::V2, in.items[0], empty, {}));
  // V0 works without either
  REQUIRE_NOTHROW(build_prompt(PromptVersion::V0, in.items[0], empty, {}));
}

TEST_CASE("schema switches between id labels and free-text descriptions") {
  const auto v0 = annotation_schema(PromptVersion::V0).dump();
  const auto v2 = annotation_schema(PromptVersion::V2).dump();
  REQUIRE(v0.find("descriptions") != std::string::npos);
  REQUIRE(v0.find("misconception_id") == std::string::npos);
  REQUIRE(v2.find("misconception_id") != std::string::npos);
  REQUIRE(v2.find("confidence") != std::string::npos);
}

TEST_CASE("items file validation catches malformed entries") {
  REQUIRE_THROWS(items_from_json(nlohmann::json::parse(
      R"([{"item_id":"x","stem":"s","options":[{"option_id":"a","text":"t","is_correct":true}]}])")));
  REQUIRE_THROWS(items_from_json(nlohmann::json::parse(
      R"([{"item_id":"x","stem":"s","options":[
        {"option_id":"a","text":"t","is_correct":true},
        {"option_id":"b","text":"u","is_correct":true}]}])")));
  REQUIRE_THROWS(items_from_json(nlohmann::json::parse(
      R"([{"item_id":"x","stem":"s","options":[
        {"option_id":"a","text":"t","is_correct":false},
        {"option_id":"a","text":"u","is_correct":true}]}])")));
}

TEST_CASE("exemplar labels must reference library ids") {
  const auto in = load_inputs();
  MisconceptionLibrary tiny(std::vector<Misconception>{{"ZZ", "unrelated"}});
  REQUIRE_THROWS(load_exemplars(qmv::test::fixture("exemplars.json"), tiny));
}
