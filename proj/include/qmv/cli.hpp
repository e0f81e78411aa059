#pragma once

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qmv/pipeline.hpp"

namespace qmv::cli {

namespace detail {

/// Records each subcommand's effective parameters under its own key in the
/// run directory's config.json.
inline void echo_config(const std::filesystem::path& run_dir, const std::string& section,
                        nlohmann::ordered_json params) {
  const auto path = run_dir / "config.json";
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  if (std::filesystem::exists(path)) {
    try {
      j = nlohmann::ordered_json::parse(read_text_file(path));
    } catch (...) {
      j = nlohmann::ordered_json::object();
    }
  }
  j[section] = std::move(params);
  write_text_file(path, j.dump(2) + "\n");
}

inline std::vector<double> parse_prevalence(const std::string& csv) {
  std::vector<double> out;
  if (csv.empty()) return out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto pos = csv.find(',', start);
    const std::string tok = pos == std::string::npos ? csv.substr(start)
                                                     : csv.substr(start, pos - start);
    try {
      out.push_back(std::stod(tok));
    } catch (...) {
      throw std::runtime_error("invalid prevalence entry: '" + tok + "'");
    }
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string stem_of(const std::filesystem::path& p) {
  return p.stem().string();
}

}  // namespace detail

/// CLI entry point; args exclude the program name. Exit codes: 0 success,
/// 2 partial annotation failure, 1 any error.
inline int execute(const std::vector<std::string>& args) {
  CLI::App app{"Generate-and-Validate toolchain: LLM-proposed Q-matrices ranked by "
               "NeuralCDM fit on student response data"};
  app.require_subcommand(1);
  int exit_code = 0;

  // shared output placement flags
  struct OutFlags {
    std::string run_name = "run";
    std::string out_dir = "runs";
    std::filesystem::path run_dir() const {
      return std::filesystem::path(out_dir) / run_name;
    }
  };

  // --- simulate ------------------------------------------------------------
  auto sim_out = std::make_shared<OutFlags>();
  struct SimFlags {
    std::string q_path;
    int students = 614;
    double slip = 0.1, guess = 0.1;
    std::uint64_t seed = 0;
    std::string prevalence;
  };
  auto sim = std::make_shared<SimFlags>();
  CLI::App* sim_cmd = app.add_subcommand(
      "simulate", "Generate synthetic DINA responses from a ground-truth Q-matrix");
  sim_cmd->add_option("--q", sim->q_path, "ground-truth Q-matrix CSV")->required();
  sim_cmd->add_option("--students", sim->students, "number of students");
  sim_cmd->add_option("--slip", sim->slip, "slip probability");
  sim_cmd->add_option("--guess", sim->guess, "guess probability");
  sim_cmd->add_option("--seed", sim->seed, "RNG seed");
  sim_cmd->add_option("--prevalence", sim->prevalence,
                      "comma-separated per-attribute mastery prevalences");
  sim_cmd->add_option("--run-name", sim_out->run_name, "run directory name");
  sim_cmd->add_option("--out-dir", sim_out->out_dir, "runs root directory");
  sim_cmd->callback([sim, sim_out]() {
    const QMatrix q = load_qmatrix(sim->q_path);
    SimConfig config;
    config.n_students = sim->students;
    config.slip = sim->slip;
    config.guess = sim->guess;
    config.seed = sim->seed;
    config.prevalence = detail::parse_prevalence(sim->prevalence);
    if (config.prevalence.size() == 1) {
      // a single value broadcasts over the whole attribute axis
      config.prevalence.assign(q.cols(), config.prevalence[0]);
    }
    const SimResult result = simulate(q, config);
    const auto run_dir = sim_out->run_dir();
    result.logs.save(run_dir / "responses.csv");
    write_text_file(run_dir / "profiles.csv",
                    profiles_to_csv(result.profiles, q.attribute_ids()));
    detail::echo_config(run_dir, "simulate",
                        {{"q", sim->q_path},
                         {"students", sim->students},
                         {"slip", sim->slip},
                         {"guess", sim->guess},
                         {"seed", sim->seed},
                         {"prevalence", sim->prevalence}});
    RunLogger(run_dir).log("simulate: " + std::to_string(result.logs.records.size()) +
                           " records from " + sim->q_path);
    std::cout << "wrote " << (run_dir / "responses.csv").string() << " ("
              << result.logs.records.size() << " records) and "
              << (run_dir / "profiles.csv").string() << "\n";
  });

  // --- generate --------------------------------------------------------------
  auto gen_out = std::make_shared<OutFlags>();
  struct GenFlags {
    std::string config_path, items, library, exemplars, version = "V3";
    std::string endpoint_label = "endpoint", base_url, model, api_key_env;
    double temperature = 0.0, timeout = 60.0, backoff = 1.0;
    int max_retries = 3, parallel = 4;
  };
  auto gen = std::make_shared<GenFlags>();
  CLI::App* gen_cmd = app.add_subcommand(
      "generate", "Request LLM annotations for every assessment item");
  gen_cmd->add_option("--config", gen->config_path, "run config JSON");
  gen_cmd->add_option("--items", gen->items, "assessment items JSON");
  gen_cmd->add_option("--library", gen->library, "misconception library JSON");
  gen_cmd->add_option("--exemplars", gen->exemplars, "expert exemplars JSON (V3)");
  gen_cmd->add_option("--version", gen->version, "prompt version V0..V3");
  gen_cmd->add_option("--endpoint-label", gen->endpoint_label, "endpoint label");
  gen_cmd->add_option("--base-url", gen->base_url, "OpenAI-compatible base URL");
  gen_cmd->add_option("--model", gen->model, "model name");
  gen_cmd->add_option("--api-key-env", gen->api_key_env,
                      "environment variable holding the API key");
  gen_cmd->add_option("--temperature", gen->temperature, "sampling temperature");
  gen_cmd->add_option("--timeout", gen->timeout, "request timeout seconds");
  gen_cmd->add_option("--max-retries", gen->max_retries, "retry budget");
  gen_cmd->add_option("--parallel-requests", gen->parallel, "max items in flight");
  gen_cmd->add_option("--backoff", gen->backoff, "base backoff seconds");
  gen_cmd->add_option("--run-name", gen_out->run_name, "run directory name");
  gen_cmd->add_option("--out-dir", gen_out->out_dir, "runs root directory");
  gen_cmd->callback([gen, gen_out, &exit_code]() {
    RunConfig config;
    bool have_config = !gen->config_path.empty();
    if (have_config) config = RunConfig::load(gen->config_path);
    if (!gen->items.empty()) config.items_file = gen->items;
    if (!gen->library.empty()) config.library_file = gen->library;
    if (!gen->exemplars.empty()) config.exemplars_file = gen->exemplars;
    config.version = version_from_string(gen->version);
    if (!gen->base_url.empty()) {
      EndpointConfig e;
      e.label = gen->endpoint_label;
      e.base_url = gen->base_url;
      e.model_name = gen->model;
      e.api_key_env = gen->api_key_env;
      e.temperature = gen->temperature;
      e.timeout_seconds = gen->timeout;
      e.max_retries = gen->max_retries;
      e.max_parallel_requests = gen->parallel;
      e.backoff_base_seconds = gen->backoff;
      config.endpoints = {e};
    }
    if (config.items_file.empty()) throw std::runtime_error("generate: --items is required");
    if (config.library_file.empty()) throw std::runtime_error("generate: --library is required");
    if (config.endpoints.empty()) {
      throw std::runtime_error("generate: --base-url/--model (or config endpoints) required");
    }
    const auto items = load_items(config.items_file);
    const auto library = MisconceptionLibrary::load(config.library_file);
    std::vector<ExpertExemplar> exemplars;
    if (!config.exemplars_file.empty()) {
      exemplars = load_exemplars(config.exemplars_file, library);
    }
    const std::string digest = fnv1a_hex(read_text_file(config.items_file));
    const auto run_dir = gen_out->run_dir();
    RunLogger logger(run_dir);
    bool partial = false;
    for (const auto& endpoint : config.endpoints) {
      endpoint.validate();
      if (config.version == PromptVersion::V3 && exemplars.empty()) {
        throw std::runtime_error("generate: V3 requires --exemplars");
      }
      std::vector<std::string> warnings;
      AnnotationSet set = annotate_assessment(endpoint, items, config.version, library,
                                              exemplars, &warnings);
      set.provenance.items_digest = digest;
      for (const auto& w : warnings) logger.log("warning: " + w);
      const auto path = rundir::annotations(run_dir, endpoint.label);
      set.save(path);
      logger.log("generate: wrote " + path.string() + " (" +
                 std::to_string(set.items.size()) + " items, " +
                 std::to_string(set.failures.size()) + " failures)");
      std::cout << "wrote " << path.string() << " (" << set.items.size() << " items, "
                << set.failures.size() << " failures)\n";
      partial |= !set.failures.empty();
    }
    detail::echo_config(run_dir, "generate",
                        {{"items", config.items_file.string()},
                         {"library", config.library_file.string()},
                         {"version", to_string(config.version)},
                         {"endpoints", int(config.endpoints.size())}});
    if (partial) exit_code = 2;
  });

  // --- build -----------------------------------------------------------------
  auto build_out = std::make_shared<OutFlags>();
  struct BuildFlags {
    std::string annotations, library, items, label, config_path;
    std::vector<std::string> tiers;
  };
  auto bld = std::make_shared<BuildFlags>();
  CLI::App* build_cmd = app.add_subcommand(
      "build", "Build tier-filtered candidate Q-matrices from an annotation set");
  build_cmd->add_option("--annotations", bld->annotations, "annotation set JSON")
      ->required();
  build_cmd->add_option("--library", bld->library, "misconception library JSON");
  build_cmd->add_option("--items", bld->items, "items JSON fixing the item order");
  build_cmd->add_option("--config", bld->config_path, "run config JSON (fallback paths)");
  build_cmd->add_option("--tier", bld->tiers,
                        "confidence threshold(s); default High Medium Low");
  build_cmd->add_option("--label", bld->label, "candidate label (default: endpoint label)");
  build_cmd->add_option("--run-name", build_out->run_name, "run directory name");
  build_cmd->add_option("--out-dir", build_out->out_dir, "runs root directory");
  build_cmd->callback([bld, build_out]() {
    std::filesystem::path library_path = bld->library;
    std::filesystem::path items_path = bld->items;
    if (!bld->config_path.empty()) {
      const RunConfig config = RunConfig::load(bld->config_path);
      if (library_path.empty()) library_path = config.library_file;
      if (items_path.empty()) items_path = config.items_file;
    }
    if (library_path.empty()) {
      throw std::runtime_error("build: --library (or --config) is required");
    }
    const auto library = MisconceptionLibrary::load(library_path);
    const AnnotationSet set = AnnotationSet::load(bld->annotations);
    if (set.provenance.prompt_version == "V0") {
      throw std::runtime_error(
          "build: V0 annotations carry no misconception ids to map");
    }
    std::vector<std::string> order;
    if (!items_path.empty()) {
      for (const auto& item : load_items(items_path)) order.push_back(item.item_id);
    } else {
      for (const auto& item : set.items) order.push_back(item.item_id);
    }
    std::string label = bld->label;
    if (label.empty()) label = set.provenance.endpoint_label;
    if (label.empty()) label = detail::stem_of(bld->annotations);

    std::vector<std::string> tier_names = bld->tiers;
    if (tier_names.empty()) tier_names = {"High", "Medium", "Low"};
    const auto run_dir = build_out->run_dir();
    RunLogger logger(run_dir);
    for (const auto& tier_name : tier_names) {
      const ConfidenceTier tier = tier_from_string(tier_name);
      const QMatrix q = build_qmatrix(set, tier, library, order);
      const auto path = rundir::qmatrix(run_dir, label + "-" + tier_name);
      save_qmatrix(q, path);
      const auto zero_rows = q.zero_row_items();
      std::cout << "wrote " << path.string() << " (" << q.ones_count() << " ones)\n";
      logger.log("build: " + path.string() + " ones=" + std::to_string(q.ones_count()) +
                 " degenerate_items=" + std::to_string(zero_rows.size()));
      if (zero_rows.size() == q.rows()) {
        std::cerr << "warning: every item is degenerate (all-zero matrix) at tier "
                  << tier_name << "\n";
        logger.log("warning: every item is degenerate at tier " + tier_name);
      } else if (!zero_rows.empty()) {
        std::cerr << "warning: " << zero_rows.size()
                  << " degenerate item(s) with no attribute at tier " << tier_name
                  << "\n";
      }
    }
    detail::echo_config(run_dir, "build",
                        {{"annotations", bld->annotations},
                         {"library", library_path.string()},
                         {"label", label},
                         {"tiers", tier_names}});
  });

  // --- validate ----------------------------------------------------------------
  auto val_out = std::make_shared<OutFlags>();
  struct ValidateFlags {
    std::string q_path, responses, label;
    int repeats = 5;
    CdmConfig cdm;
  };
  auto val = std::make_shared<ValidateFlags>();
  CLI::App* val_cmd = app.add_subcommand(
      "validate", "Cross-validate NeuralCDM fit of a Q-matrix on response data");
  val_cmd->add_option("--q", val->q_path, "candidate Q-matrix CSV")->required();
  val_cmd->add_option("--responses", val->responses, "response log CSV")->required();
  val_cmd->add_option("--repeats", val->repeats, "number of repeated splits");
  val_cmd->add_option("--label", val->label, "fit label (default: Q-matrix stem)");
  val_cmd->add_option("--seed", val->cdm.seed, "base RNG seed");
  val_cmd->add_option("--lr", val->cdm.learning_rate, "Adam learning rate");
  val_cmd->add_option("--batch-size", val->cdm.batch_size, "mini-batch size");
  val_cmd->add_option("--epochs", val->cdm.max_epochs, "max training epochs");
  val_cmd->add_option("--patience", val->cdm.early_stop_patience, "early stop patience");
  val_cmd->add_option("--hidden1", val->cdm.hidden1, "first hidden layer width");
  val_cmd->add_option("--hidden2", val->cdm.hidden2, "second hidden layer width");
  val_cmd->add_option("--run-name", val_out->run_name, "run directory name");
  val_cmd->add_option("--out-dir", val_out->out_dir, "runs root directory");
  val_cmd->callback([val, val_out]() {
    const QMatrix q = load_qmatrix(val->q_path);
    const ResponseLog responses = ResponseLog::load(val->responses);
    const FitReport fit = cross_validate(responses, q, val->cdm, val->repeats);
    const std::string label =
        val->label.empty() ? detail::stem_of(val->q_path) : val->label;
    const auto run_dir = val_out->run_dir();
    const auto path = rundir::fit(run_dir, label);
    write_text_file(path, fit.to_json().dump(2) + "\n");
    detail::echo_config(run_dir, "validate",
                        {{"q", val->q_path},
                         {"responses", val->responses},
                         {"label", label},
                         {"n_repeats", val->repeats},
                         {"cdm", val->cdm.to_json()}});
    RunLogger(run_dir).log("validate: " + path.string());
    std::cout << "wrote " << path.string() << " (AUC "
              << qmv::detail::format_fixed(fit.auc_mean, 4) << " ± "
              << qmv::detail::format_fixed(fit.auc_std, 4) << ", RMSE "
              << qmv::detail::format_fixed(fit.rmse_mean, 4) << ")\n";
  });

  // --- compare -------------------------------------------------------------
  auto cmp_out = std::make_shared<OutFlags>();
  struct CompareFlags {
    std::string candidate, reference, label;
  };
  auto cmp = std::make_shared<CompareFlags>();
  CLI::App* cmp_cmd = app.add_subcommand(
      "compare", "Confusion statistics of a candidate Q-matrix vs a reference");
  cmp_cmd->add_option("--candidate", cmp->candidate, "candidate Q-matrix CSV")->required();
  cmp_cmd->add_option("--reference", cmp->reference, "reference Q-matrix CSV")->required();
  cmp_cmd->add_option("--label", cmp->label, "comparison label (default: candidate stem)");
  cmp_cmd->add_option("--run-name", cmp_out->run_name, "run directory name");
  cmp_cmd->add_option("--out-dir", cmp_out->out_dir, "runs root directory");
  cmp_cmd->callback([cmp, cmp_out]() {
    const QMatrix candidate = load_qmatrix(cmp->candidate);
    const QMatrix reference = load_qmatrix(cmp->reference);
    const ConfusionStats stats = compare(candidate, reference);
    const std::string label =
        cmp->label.empty() ? detail::stem_of(cmp->candidate) : cmp->label;
    const auto run_dir = cmp_out->run_dir();
    const auto path = rundir::comparison(run_dir, label);
    write_text_file(path, stats.to_json().dump(2) + "\n");
    detail::echo_config(run_dir, "compare",
                        {{"candidate", cmp->candidate},
                         {"reference", cmp->reference},
                         {"label", label}});
    RunLogger(run_dir).log("compare: " + path.string());
    std::cout << "wrote " << path.string() << " (tp=" << stats.tp << " fp=" << stats.fp
              << " fn=" << stats.fn << " tn=" << stats.tn << ", micro_f1="
              << qmv::detail::format_fixed(stats.micro_f1, 4) << ")\n";
  });

  // --- report ----------------------------------------------------------------
  auto rep_out = std::make_shared<OutFlags>();
  auto rep_dir = std::make_shared<std::string>();
  CLI::App* rep_cmd = app.add_subcommand(
      "report", "Assemble report.json/report.md from a run directory");
  rep_cmd->add_option("--run-dir", *rep_dir, "run directory (overrides --out-dir/--run-name)");
  rep_cmd->add_option("--run-name", rep_out->run_name, "run directory name");
  rep_cmd->add_option("--out-dir", rep_out->out_dir, "runs root directory");
  rep_cmd->callback([rep_dir, rep_out]() {
    const std::filesystem::path run_dir =
        rep_dir->empty() ? rep_out->run_dir() : std::filesystem::path(*rep_dir);
    const RunReport report = make_report(run_dir);
    write_report(run_dir, report);
    RunLogger(run_dir).log("report: rebuilt report.json and report.md");
    std::cout << "wrote " << (run_dir / "report.json").string() << " ("
              << report.rows.size() << " candidate rows)\n";
    for (std::size_t i = 0; i < report.ranking.size(); ++i) {
      std::cout << "  " << (i + 1) << ". " << report.ranking[i] << "\n";
    }
  });

  // --- run ------------------------------------------------------------------
  struct RunFlags {
    std::string config_path, run_name, out_dir;
    int repeats = -1;
    long long seed = -1;
    bool offline = false;
    bool parallel = false;
  };
  auto run = std::make_shared<RunFlags>();
  CLI::App* run_cmd = app.add_subcommand(
      "run", "Full Generate-and-Validate pipeline from a config file");
  run_cmd->add_option("--config", run->config_path, "run config JSON")->required();
  run_cmd->add_option("--run-name", run->run_name, "override run name");
  run_cmd->add_option("--out-dir", run->out_dir, "override runs root");
  run_cmd->add_option("--repeats", run->repeats, "override n_repeats");
  run_cmd->add_option("--seed", run->seed, "override CDM base seed");
  run_cmd->add_flag("--offline", run->offline, "skip generation (drop endpoints)");
  run_cmd->add_flag("--parallel", run->parallel, "validate candidates in parallel");
  run_cmd->callback([run, &exit_code]() {
    RunConfig config = RunConfig::load(run->config_path);
    if (!run->run_name.empty()) config.run_name = run->run_name;
    if (!run->out_dir.empty()) config.output_dir = run->out_dir;
    if (run->repeats > 0) config.n_repeats = run->repeats;
    if (run->seed >= 0) config.cdm.seed = static_cast<std::uint64_t>(run->seed);
    if (run->offline) config.endpoints.clear();
    if (run->parallel) config.parallel_candidates = true;
    const RunReport report = run_full(config);
    std::cout << "run '" << config.run_name << "' finished: " << report.rows.size()
              << " candidate rows, " << report.failures.size() << " failures\n";
    for (std::size_t i = 0; i < report.ranking.size(); ++i) {
      std::cout << "  " << (i + 1) << ". " << report.ranking[i] << "\n";
    }
    if (report.partial_annotation_failure) exit_code = 2;
  });

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("qmv");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}

}  // namespace qmv::cli
