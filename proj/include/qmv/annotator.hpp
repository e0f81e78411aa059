#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "qmv/io.hpp"
#include "qmv/prompts.hpp"
#include "qmv/qmatrix.hpp"
#include "qmv/rng.hpp"

namespace qmv {

struct EndpointConfig {
  std::string label;
  std::string base_url;
  std::string model_name;
  /// Name of the environment variable holding the API key; empty (or an
  /// unset variable) sends no Authorization header, as local servers allow.
  std::string api_key_env;
  double temperature = 0.0;
  double timeout_seconds = 60.0;
  int max_retries = 3;
  int max_parallel_requests = 4;
  double backoff_base_seconds = 1.0;

  void validate() const {
    if (label.empty()) throw std::runtime_error("endpoint: label must not be empty");
    if (base_url.empty()) throw std::runtime_error("endpoint: base_url must not be empty");
    if (model_name.empty()) throw std::runtime_error("endpoint: model_name must not be empty");
    if (max_retries < 0) throw std::runtime_error("endpoint: max_retries must be >= 0");
    if (max_parallel_requests < 1) {
      throw std::runtime_error("endpoint: max_parallel_requests must be >= 1");
    }
    if (timeout_seconds <= 0.0) {
      throw std::runtime_error("endpoint: timeout_seconds must be > 0");
    }
  }

  nlohmann::ordered_json to_json() const {
    return {{"label", label},
            {"base_url", base_url},
            {"model_name", model_name},
            {"api_key_env", api_key_env},
            {"temperature", temperature},
            {"timeout_seconds", timeout_seconds},
            {"max_retries", max_retries},
            {"max_parallel_requests", max_parallel_requests},
            {"backoff_base_seconds", backoff_base_seconds}};
  }

  static EndpointConfig from_json(const nlohmann::json& j) {
    EndpointConfig c;
    c.label = j.at("label").get<std::string>();
    c.base_url = j.at("base_url").get<std::string>();
    c.model_name = j.at("model_name").get<std::string>();
    c.api_key_env = j.value("api_key_env", "");
    c.temperature = j.value("temperature", 0.0);
    c.timeout_seconds = j.value("timeout_seconds", 60.0);
    c.max_retries = j.value("max_retries", 3);
    c.max_parallel_requests = j.value("max_parallel_requests", 4);
    c.backoff_base_seconds = j.value("backoff_base_seconds", 1.0);
    c.validate();
    return c;
  }
};

/// 4xx responses: retrying cannot help.
struct TerminalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Transport failures, timeouts, 5xx, exhausted retry budgets.
struct RetryableError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Response body that is not valid JSON or violates the annotation schema.
struct AnnotationParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

/// "http://host:1234/prefix" -> {"http://host:1234", "/prefix"}
inline std::pair<std::string, std::string> split_base_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw std::runtime_error("endpoint base_url must include a scheme: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, ""};
  std::string prefix = url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, path_start), prefix};
}

inline void sleep_backoff(const EndpointConfig& endpoint, int attempt) {
  // exponential backoff, factor 2, jitter +/-20%
  static thread_local Rng jitter_rng(
      static_cast<std::uint64_t>(
          std::chrono::steady_clock::now().time_since_epoch().count()) ^
      std::hash<std::thread::id>{}(std::this_thread::get_id()));
  const double base = endpoint.backoff_base_seconds * std::pow(2.0, double(attempt));
  const double jittered = base * jitter_rng.uniform(0.8, 1.2);
  std::this_thread::sleep_for(std::chrono::duration<double>(jittered));
}

inline std::string body_excerpt(const std::string& body) {
  constexpr std::size_t kMax = 200;
  if (body.size() <= kMax) return body;
  return body.substr(0, kMax) + "...";
}

}  // namespace detail

/// Chat-completion request body carrying the bundle's messages, the fixed
/// temperature, and a structured-output constraint built from the bundle's
/// schema.
inline nlohmann::ordered_json chat_completion_body(const EndpointConfig& endpoint,
                                                   const PromptBundle& bundle) {
  nlohmann::ordered_json body;
  body["model"] = endpoint.model_name;
  body["messages"] = {{{"role", "system"}, {"content", bundle.system_text}},
                      {{"role", "user"}, {"content", bundle.user_text}}};
  body["temperature"] = endpoint.temperature;
  body["response_format"] = {
      {"type", "json_schema"},
      {"json_schema",
       {{"name", "item_annotation"}, {"strict", true}, {"schema", bundle.schema}}}};
  return body;
}

/// POSTs {base_url}/v1/chat/completions and returns the first choice's
/// content. Transport failures, timeouts and 5xx are retried with
/// exponential backoff up to max_retries times; 4xx terminates immediately.
inline std::string request_annotation(const EndpointConfig& endpoint,
                                      const PromptBundle& bundle) {
  endpoint.validate();
  const auto [host, prefix] = detail::split_base_url(endpoint.base_url);
  const std::string path = prefix + "/v1/chat/completions";
  const std::string payload = chat_completion_body(endpoint, bundle).dump();

  httplib::Client client(host);
  const auto timeout = std::chrono::duration<double>(endpoint.timeout_seconds);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);

  httplib::Headers headers;
  if (!endpoint.api_key_env.empty()) {
    if (const char* key = std::getenv(endpoint.api_key_env.c_str());
        key != nullptr && *key != '\0') {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
  }

  std::string last_error;
  for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
    if (attempt > 0) detail::sleep_backoff(endpoint, attempt - 1);
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status >= 300) {
      throw TerminalError("HTTP " + std::to_string(res->status) + " from " +
                          endpoint.base_url + ": " + detail::body_excerpt(res->body));
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const std::exception& e) {
      last_error = std::string("malformed completion envelope: ") + e.what();
      continue;
    }
  }
  throw RetryableError("request to " + endpoint.base_url + " failed after " +
                       std::to_string(endpoint.max_retries + 1) + " attempts (" +
                       last_error + ")");
}

/// Parses one model response into an ItemAnnotation. Labels with unknown
/// misconception ids or option ids are dropped with a warning each;
/// duplicate (option, misconception) labels collapse to the highest tier.
/// Never fabricates labels. Throws AnnotationParseError on non-JSON or
/// schema-violating payloads.
inline std::pair<ItemAnnotation, std::vector<std::string>> parse_annotation(
    const std::string& raw, const MisconceptionLibrary& library,
    PromptVersion version, const AssessmentItem& item) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw);
  } catch (const std::exception& e) {
    throw AnnotationParseError(std::string("response is not valid JSON: ") + e.what());
  }

  std::vector<std::string> warnings;
  ItemAnnotation out;
  out.item_id = item.item_id;
  try {
    const std::string payload_item = j.at("item_id").get<std::string>();
    if (payload_item != item.item_id) {
      throw AnnotationParseError("payload item_id '" + payload_item +
                                 "' does not match requested item '" + item.item_id +
                                 "'");
    }
    std::unordered_set<std::string> known_options;
    for (const auto& o : item.options) known_options.insert(o.option_id);

    for (const auto& jo : j.at("options")) {
      const std::string option_id = jo.at("option_id").get<std::string>();
      if (known_options.find(option_id) == known_options.end()) {
        warnings.push_back("item " + item.item_id + ": unknown option '" + option_id +
                           "' dropped");
        continue;
      }
      if (version == PromptVersion::V0) {
        for (const auto& jd : jo.at("descriptions")) {
          out.free_text.push_back({option_id, jd.at("description").get<std::string>(),
                                   jd.value("rationale", "")});
        }
        continue;
      }
      OptionAnnotation opt;
      opt.option_id = option_id;
      for (const auto& jl : jo.at("labels")) {
        const std::string mid = jl.at("misconception_id").get<std::string>();
        const ConfidenceTier tier =
            tier_from_string(jl.at("confidence").get<std::string>());
        if (!library.contains(mid)) {
          warnings.push_back("item " + item.item_id + " option " + option_id +
                             ": unknown misconception id '" + mid + "' dropped");
          continue;
        }
        opt.labels.push_back({mid, tier, jl.value("rationale", "")});
      }
      out.options.push_back(std::move(opt));
    }
  } catch (const AnnotationParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw AnnotationParseError(std::string("payload violates the annotation schema: ") +
                               e.what());
  }

  AnnotationSet tmp;
  tmp.items.push_back(std::move(out));
  tmp.normalize();
  return {std::move(tmp.items.front()), std::move(warnings)};
}

/// Annotates every item against the endpoint, with up to
/// max_parallel_requests items in flight. Results are assembled in input
/// item order regardless of completion order; items that still fail after
/// the retry budget land in the failure list. Parse failures count as
/// retryable and re-request the item. Throws only when every item failed.
inline AnnotationSet annotate_assessment(const EndpointConfig& endpoint,
                                         const std::vector<AssessmentItem>& items,
                                         PromptVersion version,
                                         const MisconceptionLibrary& library,
                                         const std::vector<ExpertExemplar>& exemplars,
                                         std::vector<std::string>* warnings_out = nullptr) {
  endpoint.validate();
  if (items.empty()) {
    throw std::runtime_error("annotate_assessment: no items to annotate");
  }

  std::vector<std::optional<ItemAnnotation>> results(items.size());
  std::vector<std::string> errors(items.size());
  std::vector<std::vector<std::string>> warnings(items.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t idx = next.fetch_add(1);
      if (idx >= items.size()) return;
      try {
        const PromptBundle bundle = build_prompt(version, items[idx], library, exemplars);
        for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
          const std::string raw = request_annotation(endpoint, bundle);
          try {
            auto [annotation, warn] = parse_annotation(raw, library, version, items[idx]);
            results[idx] = std::move(annotation);
            warnings[idx] = std::move(warn);
            break;
          } catch (const AnnotationParseError& e) {
            if (attempt == endpoint.max_retries) throw;
            detail::sleep_backoff(endpoint, attempt);
          }
        }
      } catch (const std::exception& e) {
        errors[idx] = e.what();
      }
    }
  };

  const std::size_t n_workers =
      std::min<std::size_t>(std::size_t(endpoint.max_parallel_requests), items.size());
  std::vector<std::thread> threads;
  threads.reserve(n_workers);
  for (std::size_t t = 0; t < n_workers; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();

  AnnotationSet set;
  set.provenance.model = endpoint.model_name;
  set.provenance.prompt_version = to_string(version);
  set.provenance.endpoint_label = endpoint.label;
  set.provenance.temperature = endpoint.temperature;
  set.provenance.timestamp = iso8601_utc_now();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (results[i]) {
      set.items.push_back(std::move(*results[i]));
      if (warnings_out) {
        warnings_out->insert(warnings_out->end(), warnings[i].begin(), warnings[i].end());
      }
    } else {
      set.failures.push_back({items[i].item_id, errors[i]});
    }
  }
  if (set.items.empty()) {
    throw std::runtime_error("annotate_assessment: every item failed; first error: " +
                             (set.failures.empty() ? std::string("unknown")
                                                   : set.failures.front().error));
  }
  return set;
}

}  // namespace qmv
