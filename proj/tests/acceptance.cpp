// Acceptance suite: runs every gate criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Exit code 0 iff all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "qmv/cli.hpp"
#include "qmv/pipeline.hpp"
#include "support/helpers.hpp"
#include "support/mock_server.hpp"

using namespace qmv;
using qmv::test::fixture;
using qmv::test::TempDir;

namespace {

struct Check {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& msg) {
    if (!cond) {
      ok = false;
      if (!detail.empty()) detail += "; ";
      detail += msg;
    }
  }
  void note(const std::string& msg) {
    if (!detail.empty()) detail += "; ";
    detail += msg;
  }
};

struct TierRow {
  const char* label;
  std::int64_t tp, fp, fn, tn;
  double tpr, tnr, precision, recall, micro_f1;
};

// Published confusion rows: {label, TP, FP, FN, TN, TPR, TNR, P, R, microF1}.
const TierRow kPublishedRows[] = {
    {"llama31-8b/high", 14, 43, 62, 765, 0.1842, 0.9468, 0.2456, 0.1842, 0.2105},
    {"qwen3-30b/high", 27, 70, 49, 738, 0.3553, 0.9134, 0.2784, 0.3553, 0.3121},
    {"qwen3-8b/high", 24, 58, 52, 750, 0.3158, 0.9282, 0.2927, 0.3158, 0.3038},
    {"gpt-4o/high", 23, 31, 53, 777, 0.3026, 0.9616, 0.4259, 0.3026, 0.3538},
    {"gpt-5/high", 41, 52, 35, 756, 0.5395, 0.9356, 0.4409, 0.5395, 0.4852},
    {"gpt-5.1/high", 36, 41, 40, 767, 0.4737, 0.9493, 0.4675, 0.4737, 0.4706},
    {"llama31-8b/med", 18, 85, 58, 723, 0.2368, 0.8948, 0.1748, 0.2368, 0.2011},
    {"qwen3-30b/med", 37, 151, 39, 657, 0.4868, 0.8131, 0.1968, 0.4868, 0.2803},
    {"qwen3-8b/med", 32, 124, 44, 684, 0.4211, 0.8465, 0.2051, 0.4211, 0.2759},
    {"gpt-4o/med", 31, 69, 45, 739, 0.4079, 0.9146, 0.31, 0.4079, 0.3523},
    {"gpt-5/med", 56, 126, 20, 682, 0.7368, 0.8441, 0.3077, 0.7368, 0.4341},
    {"gpt-5.1/med", 50, 96, 26, 712, 0.6579, 0.8812, 0.3425, 0.6579, 0.4505},
    {"llama31-8b/all", 23, 130, 53, 678, 0.3026, 0.8391, 0.1503, 0.3026, 0.2009},
    {"qwen3-30b/all", 41, 235, 35, 573, 0.5395, 0.7092, 0.1486, 0.5395, 0.233},
    {"qwen3-8b/all", 32, 184, 44, 624, 0.4211, 0.7723, 0.1481, 0.4211, 0.2192},
    {"gpt-4o/all", 38, 109, 38, 699, 0.5, 0.8651, 0.2585, 0.5, 0.3408},
    {"gpt-5/all", 61, 188, 15, 620, 0.8026, 0.7673, 0.245, 0.8026, 0.3754},
    {"gpt-5.1/all", 56, 145, 20, 663, 0.7368, 0.8205, 0.2786, 0.7368, 0.4043},
};

// --- criterion 1: published confusion-row metric reproduction --------------
void criterion_metric_reproduction(Check& c) {
  constexpr double kTol = 0.0005;
  for (const auto& row : kPublishedRows) {
    const auto s = ConfusionStats::from_counts(row.tp, row.fp, row.fn, row.tn);
    c.require(std::abs(s.tpr - row.tpr) <= kTol, std::string(row.label) + " tpr");
    c.require(std::abs(s.tnr - row.tnr) <= kTol, std::string(row.label) + " tnr");
    c.require(std::abs(s.precision - row.precision) <= kTol,
              std::string(row.label) + " precision");
    c.require(std::abs(s.recall - row.recall) <= kTol,
              std::string(row.label) + " recall");
    c.require(std::abs(s.micro_f1 - row.micro_f1) <= kTol,
              std::string(row.label) + " micro_f1");
  }
  c.note("18 rows within ±0.0005");
}

// --- criterion 2: instrument shape ------------------------------------------
void criterion_instrument_shape(Check& c) {
  const auto expert = load_qmatrix(fixture("expert_q.csv"));
  c.require(expert.rows() == 26, "expert matrix must have 26 items");
  c.require(expert.cols() == 34, "expert matrix must have 34 attributes");
  c.require(expert.cell_count() == 884, "cell count must be 884");
  c.require(expert.ones_count() == 76, "expert ones count must be 76");

  const auto lib = MisconceptionLibrary::load(fixture("library.json"));
  const auto set = AnnotationSet::load(fixture("annotations_sample.json"));
  const auto candidate =
      build_qmatrix(set, ConfidenceTier::High, lib, expert.item_ids());
  const auto stats = compare(candidate, expert);
  c.require(stats.tp + stats.fp + stats.fn + stats.tn == 884, "confusion total 884");
  c.require(stats.tp + stats.fn == 76, "TP+FN equals the expert ones count");
  c.note("884 cells, TP+FN=76");
}

// --- criterion 3: gradient correctness --------------------------------------
void criterion_gradients(Check& c) {
  Rng rng(314);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto q = qmv::test::random_qmatrix(rng, 3, 4, 0.5);
    CdmConfig config;
    config.hidden1 = 5;
    config.hidden2 = 3;
    config.seed = 1000 + trial;
    auto model = init_model(config, 4, q);
    std::vector<Obs> batch;
    for (int i = 0; i < 6; ++i) {
      batch.push_back({int(rng.below(4)), int(rng.below(3)), int(rng.bernoulli(0.5))});
    }
    worst = std::max(worst, qmv::test::max_gradient_rel_error(model, batch));
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "50 configs, max rel err %.2e", worst);
  c.require(worst < 1e-4, buf);
  c.note(buf);
}

// --- criterion 4: AUC oracle equivalence ------------------------------------
void criterion_auc_oracle(Check& c) {
  Rng rng(159);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(80);
    std::vector<PredLabel> pairs;
    for (std::size_t i = 0; i < n; ++i) {
      const double pred = rng.bernoulli(0.5) ? double(rng.below(6)) / 6.0
                                             : rng.next_double();
      pairs.emplace_back(pred, int(rng.bernoulli(0.5)));
    }
    const auto fast = auc(pairs);
    const auto slow = qmv::test::brute_force_auc(pairs);
    c.require(fast.has_value() == slow.has_value(), "definedness must agree");
    if (fast && slow) {
      c.require(std::abs(*fast - *slow) <= 1e-9, "rank vs brute force deviation");
      ++checked;
    }
  }
  c.note(std::to_string(checked) + " defined sets within 1e-9");
}

// --- criterion 5: monotonicity suite -----------------------------------------
void criterion_monotonicity(Check& c) {
  const auto q = load_qmatrix(fixture("expert_q.csv"));
  SimConfig sim;
  sim.n_students = 614;
  sim.slip = 0.1;
  sim.guess = 0.1;
  sim.seed = 424242;
  const auto logs = simulate(q, sim).logs;
  CdmConfig config;
  config.seed = 31;
  auto trained = train(logs, q, config);
  c.require(trained.model.min_interaction_weight() >= 0.0,
            "min(W1,W2,W3) must be >= 0 after training");

  Rng rng(2718);
  auto& model = trained.model;
  int violations = 0, probes = 0;
  while (probes < 1000) {
    const int item = int(rng.below(model.n_items()));
    if (model.required_attrs(item).empty()) continue;
    const auto& attrs = model.required_attrs(item);
    const int k = attrs[rng.below(attrs.size())];
    const int student = int(rng.below(model.n_students()));
    const double before = model.predict(student, item);
    const std::size_t idx = model.proficiency_index(student, k);
    const double saved = model.params[idx];
    model.params[idx] = saved + rng.uniform(0.01, 3.0);
    const double after = model.predict(student, item);
    model.params[idx] = saved;
    if (after < before - 1e-12) ++violations;
    ++probes;
  }
  c.require(violations == 0,
            std::to_string(violations) + " monotonicity violations in 1000 probes");
  c.note("1000 probes, 0 decreases, min W >= 0");
}

// --- criterion 6: Q-recovery ranking -----------------------------------------
void criterion_q_recovery(Check& c) {
  const auto true_q = load_qmatrix(fixture("expert_q.csv"));
  // mastery-rich population (about 60% correct overall, the score range the
  // instrument is written for); sparse mastery leaves too little signal for
  // any predictor to clear the gate
  const double kPrevalence = 0.85;
  int wins = 0;
  double auc_sum = 0.0;
  for (int r = 0; r < 5; ++r) {
    SimConfig sim;
    sim.n_students = 614;
    sim.slip = 0.1;
    sim.guess = 0.1;
    sim.seed = 1000 + r;
    sim.prevalence.assign(true_q.cols(), kPrevalence);
    const auto logs = simulate(true_q, sim).logs;
    const auto bad_q = qmv::test::corrupt_qmatrix(true_q, 0.30, 7000 + r);

    CdmConfig config;
    config.seed = 40 + r;
    const auto fit_true = cross_validate(logs, true_q, config, 3);
    const auto fit_bad = cross_validate(logs, bad_q, config, 3);
    if (fit_true.auc_mean > fit_bad.auc_mean) ++wins;
    auc_sum += fit_true.auc_mean;
  }
  const double mean_auc = auc_sum / 5.0;
  c.require(wins >= 4, "true Q must win in >= 4/5 seed sets, won " +
                           std::to_string(wins));
  c.require(mean_auc > 0.70,
            "true-Q mean AUC " + std::to_string(mean_auc) + " must exceed 0.70");

  // shuffled labels destroy the signal
  SimConfig sim;
  sim.n_students = 614;
  sim.slip = 0.1;
  sim.guess = 0.1;
  sim.seed = 1000;
  sim.prevalence.assign(true_q.cols(), kPrevalence);
  auto logs = simulate(true_q, sim).logs;
  {
    Rng rng(991);
    std::vector<int> scores;
    scores.reserve(logs.records.size());
    for (const auto& rec : logs.records) scores.push_back(rec.score);
    rng.shuffle(scores);
    for (std::size_t i = 0; i < scores.size(); ++i) logs.records[i].score = scores[i];
  }
  CdmConfig config;
  config.seed = 40;
  const auto fit_shuffled = cross_validate(logs, true_q, config, 3);
  c.require(fit_shuffled.auc_mean >= 0.45 && fit_shuffled.auc_mean <= 0.55,
            "shuffled-label AUC " + std::to_string(fit_shuffled.auc_mean) +
                " outside [0.45, 0.55]");
  c.note("wins " + std::to_string(wins) + "/5, true AUC " +
         std::to_string(mean_auc) + ", shuffled " +
         std::to_string(fit_shuffled.auc_mean));
}

// --- criterion 7: tier monotonicity end to end -------------------------------
void criterion_tier_monotonicity(Check& c) {
  const auto lib = MisconceptionLibrary::load(fixture("library.json"));
  const auto set = AnnotationSet::load(fixture("annotations_sample.json"));
  const auto expert = load_qmatrix(fixture("expert_q.csv"));

  const auto high = build_qmatrix(set, ConfidenceTier::High, lib, expert.item_ids());
  const auto med = build_qmatrix(set, ConfidenceTier::Medium, lib, expert.item_ids());
  const auto low = build_qmatrix(set, ConfidenceTier::Low, lib, expert.item_ids());
  bool nested = true;
  for (std::size_t i = 0; i < high.cell_count(); ++i) {
    nested &= high.cells()[i] <= med.cells()[i] && med.cells()[i] <= low.cells()[i];
  }
  c.require(nested, "operation-level nesting violated");

  TempDir tmp("accept-tier");
  const int code = cli::execute(
      {"build", "--annotations", fixture("annotations_sample.json").string(),
       "--library", fixture("library.json").string(), "--items",
       fixture("items.json").string(), "--run-name", "tiers", "--out-dir",
       (tmp.path() / "runs").string()});
  c.require(code == 0, "CLI build failed");
  const auto dir = tmp.path() / "runs" / "tiers" / "qmatrices";
  const auto h = load_qmatrix(dir / "cloud-gpt5-High.csv");
  const auto m = load_qmatrix(dir / "cloud-gpt5-Medium.csv");
  const auto l = load_qmatrix(dir / "cloud-gpt5-Low.csv");
  bool cli_nested = true;
  for (std::size_t i = 0; i < h.cell_count(); ++i) {
    cli_nested &= h.cells()[i] <= m.cells()[i] && m.cells()[i] <= l.cells()[i];
  }
  c.require(cli_nested, "CLI-level nesting violated");
  c.note("ones " + std::to_string(h.ones_count()) + " ⊆ " +
         std::to_string(m.ones_count()) + " ⊆ " + std::to_string(l.ones_count()));
}

// --- criterion 8: prompt-version fidelity ------------------------------------
void criterion_prompt_fidelity(Check& c) {
  const auto lib = MisconceptionLibrary::load(fixture("library.json"));
  const auto items = load_items(fixture("items.json"));
  const auto exemplars = load_exemplars(fixture("exemplars.json"), lib);

  const char* principles[] = {"Item-Content Alignment", "Error Attribution",
                              "Distractor Mapping"};
  const char* tier_names[] = {"High", "Medium", "Low"};
  for (int v = 0; v <= 3; ++v) {
    const auto version = static_cast<PromptVersion>(v);
    const auto flags = flags_for(version);
    const auto bundle = build_prompt(version, items[7], lib, exemplars);
    const std::string text = bundle.system_text + "\n" + bundle.user_text;
    auto contains = [&](const std::string& s) {
      return text.find(s) != std::string::npos;
    };
    bool has_lib = true, missing_lib = false;
    for (const auto& e : lib.entries()) {
      has_lib &= contains(e.id + ":");
      missing_lib |= contains(e.id + ":");
    }
    c.require(flags.has_library ? has_lib : !missing_lib,
              std::string(to_string(version)) + " library flag");
    for (const char* t : tier_names) {
      c.require(contains(t) == flags.has_confidence,
                std::string(to_string(version)) + " tier name " + t);
    }
    for (const char* p : principles) {
      c.require(contains(p) == flags.has_principles,
                std::string(to_string(version)) + " principle " + p);
    }
    c.require(contains("Worked examples") == flags.has_fewshot,
              std::string(to_string(version)) + " few-shot block");
  }
  c.note("V0..V3 match the feature matrix");
}

// --- criterion 9: client robustness ------------------------------------------
void criterion_client_robustness(Check& c) {
  const auto lib = MisconceptionLibrary::load(fixture("library.json"));
  const auto items = load_items(fixture("items.json"));

  auto canned_handler = [&](const httplib::Request& req, httplib::Response& res) {
    const auto id = qmv::test::item_id_of_request(req);
    std::vector<std::string> opts;
    for (const auto& item : items) {
      if (item.item_id == id) {
        for (const auto& o : item.options) {
          if (!o.is_correct) opts.push_back(o.option_id);
        }
      }
    }
    res.set_content(qmv::test::completion_envelope(
                        qmv::test::canned_annotation(id, opts, {"A1", "B9", "D27"})),
                    "application/json");
  };

  // zero fabricated labels: emitted triples are exactly the served ones
  {
    qmv::test::MockServer server(canned_handler);
    EndpointConfig endpoint;
    endpoint.label = "mock";
    endpoint.base_url = server.base_url();
    endpoint.model_name = "mock-model";
    endpoint.backoff_base_seconds = 0.1;
    const auto set =
        annotate_assessment(endpoint, items, PromptVersion::V2, lib, {});
    c.require(set.items.size() == items.size(), "all items annotated");
    bool labels_ok = true;
    const std::vector<std::string> cycle = {"A1", "B9", "D27"};
    for (std::size_t i = 0; i < set.items.size(); ++i) {
      int n = 0;
      for (const auto& opt : set.items[i].options) {
        for (const auto& label : opt.labels) {
          labels_ok &= label.misconception_id == cycle[n % 3];
          ++n;
        }
      }
    }
    c.require(labels_ok, "labels must match the served payloads exactly");
  }

  // 503,503 then success
  {
    std::atomic<int> calls{0};
    qmv::test::MockServer server([&](const httplib::Request&, httplib::Response& res) {
      if (calls.fetch_add(1) < 2) res.status = 503;
      else res.set_content(qmv::test::completion_envelope("recovered"), "application/json");
    });
    EndpointConfig endpoint;
    endpoint.label = "mock";
    endpoint.base_url = server.base_url();
    endpoint.model_name = "mock-model";
    endpoint.backoff_base_seconds = 0.1;
    const auto bundle = build_prompt(PromptVersion::V1, items[0], lib, {});
    c.require(request_annotation(endpoint, bundle) == "recovered",
              "must succeed after two 503s");
    c.require(server.request_count() == 3, "expected exactly 3 attempts");
  }

  // 401 terminates without retries
  {
    qmv::test::MockServer server([](const httplib::Request&, httplib::Response& res) {
      res.status = 401;
      res.set_content("denied", "text/plain");
    });
    EndpointConfig endpoint;
    endpoint.label = "mock";
    endpoint.base_url = server.base_url();
    endpoint.model_name = "mock-model";
    endpoint.backoff_base_seconds = 0.1;
    const auto bundle = build_prompt(PromptVersion::V1, items[0], lib, {});
    bool terminal = false;
    try {
      request_annotation(endpoint, bundle);
    } catch (const TerminalError&) {
      terminal = true;
    }
    c.require(terminal, "401 must raise a terminal error");
    c.require(server.request_count() == 1, "401 must not be retried");
  }

  // parallelism 1 vs 4 produce identical sets
  {
    qmv::test::MockServer server(canned_handler);
    EndpointConfig serial;
    serial.label = "mock";
    serial.base_url = server.base_url();
    serial.model_name = "mock-model";
    serial.max_parallel_requests = 1;
    EndpointConfig parallel = serial;
    parallel.max_parallel_requests = 4;
    auto a = annotate_assessment(serial, items, PromptVersion::V2, lib, {});
    auto b = annotate_assessment(parallel, items, PromptVersion::V2, lib, {});
    a.provenance.timestamp = b.provenance.timestamp = "normalized";
    c.require(a.to_json() == b.to_json(), "parallelism changed the content");
  }
  c.note("pass-through, retry, terminal and ordering contracts hold");
}

// --- criterion 10: determinism ------------------------------------------------
void criterion_determinism(Check& c) {
  TempDir tmp("accept-det");
  const auto expert = load_qmatrix(fixture("expert_q.csv"));
  SimConfig sim;
  sim.n_students = 614;
  sim.slip = 0.1;
  sim.guess = 0.1;
  sim.seed = 4242;
  const auto responses_path = tmp.path() / "responses.csv";
  simulate(expert, sim).logs.save(responses_path);
  const auto corrupted_path = tmp.path() / "corrupted.csv";
  save_qmatrix(qmv::test::corrupt_qmatrix(expert, 0.30, 99), corrupted_path);

  nlohmann::ordered_json config;
  config["run_name"] = "det";
  config["output_dir"] = (tmp.path() / "runs").string();
  config["library_file"] = fixture("library.json").string();
  config["expert_qmatrix"] = fixture("expert_q.csv").string();
  config["responses"] = responses_path.string();
  config["annotations"] = {
      {{"label", "sample"}, {"path", fixture("annotations_sample.json").string()}}};
  config["tiers"] = {"High", "Medium"};
  config["candidates"] = {{{"label", "corrupted-q"}, {"path", corrupted_path.string()}}};
  config["n_repeats"] = 2;
  config["cdm"] = {{"hidden_sizes", {64, 32}}, {"learning_rate", 0.002},
                   {"batch_size", 32},        {"max_epochs", 25},
                   {"early_stop_patience", 5}, {"seed", 777}};
  const auto config_path = tmp.path() / "config.json";
  write_text_file(config_path, config.dump(2));

  std::string reports[2];
  for (int i = 0; i < 2; ++i) {
    const int code = cli::execute({"run", "--config", config_path.string()});
    c.require(code == 0, "pipeline run " + std::to_string(i) + " failed");
    reports[i] = read_text_file(tmp.path() / "runs" / "det" / "report.json");
  }
  c.require(!reports[0].empty(), "empty report");
  c.require(reports[0] == reports[1], "report.json bytes differ between runs");
  c.note("byte-identical report.json over 3 candidates + baseline");
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<void(Check&)> fn;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "published confusion-metric reproduction", 1.0, criterion_metric_reproduction},
      {2, "instrument structural consistency", 1.0, criterion_instrument_shape},
      {3, "gradient correctness vs finite differences", 30.0, criterion_gradients},
      {4, "AUC oracle equivalence", 5.0, criterion_auc_oracle},
      {5, "monotonicity suite", 120.0, criterion_monotonicity},
      {6, "Q-recovery ranking on simulated data", 600.0, criterion_q_recovery},
      {7, "tier monotonicity end to end", 1.0, criterion_tier_monotonicity},
      {8, "prompt-version fidelity", 1.0, criterion_prompt_fidelity},
      {9, "client robustness against a mock endpoint", 30.0, criterion_client_robustness},
      {10, "offline pipeline determinism", 600.0, criterion_determinism},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criterion.fn(check);
    } catch (const std::exception& e) {
      check.ok = false;
      check.note(std::string("exception: ") + e.what());
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (seconds >= criterion.budget_seconds) {
      check.ok = false;
      check.note("runtime " + std::to_string(seconds) + "s exceeds the " +
                 std::to_string(criterion.budget_seconds) + "s budget");
    }
    std::printf("%s criterion %2d: %s (%.1fs%s%s)\n", check.ok ? "PASS" : "FAIL",
                criterion.id, criterion.name, seconds,
                check.detail.empty() ? "" : "; ", check.detail.c_str());
    std::fflush(stdout);
    if (!check.ok) ++failures;
  }
  if (failures > 0) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all %zu criteria passed\n", criteria.size());
  return 0;
}
