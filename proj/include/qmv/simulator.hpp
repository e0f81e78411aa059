#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "qmv/qmatrix.hpp"
#include "qmv/response_log.hpp"
#include "qmv/rng.hpp"

namespace qmv {

struct SimConfig {
  int n_students = 0;
  double slip = 0.1;
  double guess = 0.1;
  /// Per-attribute mastery prevalence. Empty means 0.5 for every attribute.
  std::vector<double> prevalence;
  std::uint64_t seed = 0;

  void validate(std::size_t k_count) const {
    if (n_students < 1) throw std::runtime_error("simulator: n_students must be >= 1");
    if (slip < 0.0 || slip >= 1.0) throw std::runtime_error("simulator: slip must be in [0,1)");
    if (guess < 0.0 || guess >= 1.0) throw std::runtime_error("simulator: guess must be in [0,1)");
    if (slip + guess >= 1.0) {
      throw std::runtime_error("simulator: slip + guess must be < 1 (signal-preserving)");
    }
    if (!prevalence.empty() && prevalence.size() != k_count) {
      throw std::runtime_error("simulator: prevalence vector length " +
                               std::to_string(prevalence.size()) +
                               " does not match attribute count " +
                               std::to_string(k_count));
    }
    for (double p : prevalence) {
      if (p <= 0.0 || p >= 1.0) {
        throw std::runtime_error("simulator: prevalence entries must be in (0,1)");
      }
    }
  }

  std::vector<double> effective_prevalence(std::size_t k_count) const {
    if (prevalence.empty()) return std::vector<double>(k_count, 0.5);
    return prevalence;
  }
};

/// Binary mastery vector of one simulated student.
struct StudentProfile {
  std::string student_id;
  std::vector<std::uint8_t> mastery;
};

struct SimResult {
  std::vector<StudentProfile> profiles;
  ResponseLog logs;
};

namespace detail {

inline std::string student_id_for(int index, int n_students) {
  int width = 1;
  for (int n = n_students; n >= 10; n /= 10) ++width;
  std::string digits = std::to_string(index + 1);
  return "s" + std::string(width - digits.size(), '0') + digits;
}

}  // namespace detail

/// DINA generative process: mastery alpha_sk ~ Bernoulli(pi_k); a student
/// carries the item (eta=1) only when every required attribute is mastered
/// (empty requirement rows give eta=1); the observed score is
/// Bernoulli(1-slip) under eta=1 and Bernoulli(guess) otherwise.
/// One record per (student, item); fully deterministic given the seed.
inline SimResult simulate(const QMatrix& q, const SimConfig& config) {
  config.validate(q.cols());
  const auto pi = config.effective_prevalence(q.cols());
  Rng rng(config.seed);

  SimResult out;
  out.profiles.reserve(config.n_students);
  out.logs.records.reserve(std::size_t(config.n_students) * q.rows());
  for (int s = 0; s < config.n_students; ++s) {
    StudentProfile profile;
    profile.student_id = detail::student_id_for(s, config.n_students);
    profile.mastery.resize(q.cols());
    for (std::size_t k = 0; k < q.cols(); ++k) {
      profile.mastery[k] = rng.bernoulli(pi[k]) ? 1 : 0;
    }
    for (std::size_t j = 0; j < q.rows(); ++j) {
      bool eta = true;
      for (std::size_t k = 0; k < q.cols(); ++k) {
        if (q.at(j, k) && !profile.mastery[k]) { eta = false; break; }
      }
      const double p_correct = eta ? 1.0 - config.slip : config.guess;
      out.logs.records.push_back(
          {profile.student_id, q.item_ids()[j], rng.bernoulli(p_correct) ? 1 : 0});
    }
    out.profiles.push_back(std::move(profile));
  }
  return out;
}

/// Closed-form per-item accuracy under the DINA process:
/// P_j = pi_eta*(1-slip) + (1-pi_eta)*guess with pi_eta the product of the
/// required attributes' prevalences (empty product = 1).
inline std::vector<double> expected_accuracy(const QMatrix& q, const SimConfig& config) {
  config.validate(q.cols());
  const auto pi = config.effective_prevalence(q.cols());
  std::vector<double> out(q.rows());
  for (std::size_t j = 0; j < q.rows(); ++j) {
    double pi_eta = 1.0;
    for (std::size_t k = 0; k < q.cols(); ++k) {
      if (q.at(j, k)) pi_eta *= pi[k];
    }
    out[j] = pi_eta * (1.0 - config.slip) + (1.0 - pi_eta) * config.guess;
  }
  return out;
}

inline std::string profiles_to_csv(const std::vector<StudentProfile>& profiles,
                                   const std::vector<std::string>& attribute_ids) {
  std::string out = "student_id";
  for (const auto& a : attribute_ids) {
    out += ',';
    out += a;
  }
  out += '\n';
  for (const auto& p : profiles) {
    if (p.mastery.size() != attribute_ids.size()) {
      throw std::runtime_error("profile width does not match attribute axis");
    }
    out += p.student_id;
    for (auto m : p.mastery) {
      out += ',';
      out += m ? '1' : '0';
    }
    out += '\n';
  }
  return out;
}

}  // namespace qmv
