#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "qmv/metrics.hpp"
#include "qmv/qmatrix.hpp"
#include "qmv/response_log.hpp"
#include "qmv/rng.hpp"

namespace qmv {

struct CdmConfig {
  int hidden1 = 64;
  int hidden2 = 32;
  double learning_rate = 0.002;
  int batch_size = 32;
  int max_epochs = 50;
  int early_stop_patience = 5;
  /// L2 strength on the embedding entries touched by each batch record
  /// (train-time regularizer; the per-student proficiencies otherwise
  /// memorize desk-scale data and probabilities drift to the extremes).
  double weight_decay = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (hidden1 < 1 || hidden2 < 1) throw std::runtime_error("cdm: hidden sizes must be >= 1");
    if (learning_rate <= 0.0) throw std::runtime_error("cdm: learning rate must be > 0");
    if (batch_size < 1) throw std::runtime_error("cdm: batch size must be >= 1");
    if (max_epochs < 1) throw std::runtime_error("cdm: max_epochs must be >= 1");
    if (early_stop_patience < 1) throw std::runtime_error("cdm: patience must be >= 1");
    if (early_stop_patience > max_epochs) {
      throw std::runtime_error("cdm: patience must be <= max_epochs");
    }
    if (weight_decay < 0.0) throw std::runtime_error("cdm: weight_decay must be >= 0");
  }

  nlohmann::ordered_json to_json() const {
    return {{"hidden_sizes", {hidden1, hidden2}},
            {"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"max_epochs", max_epochs},
            {"early_stop_patience", early_stop_patience},
            {"weight_decay", weight_decay},
            {"seed", seed}};
  }

  static CdmConfig from_json(const nlohmann::json& j) {
    CdmConfig c;
    if (j.contains("hidden_sizes")) {
      const auto& hs = j.at("hidden_sizes");
      if (!hs.is_array() || hs.size() != 2) {
        throw std::runtime_error("cdm: hidden_sizes must be a 2-element array");
      }
      c.hidden1 = hs[0].get<int>();
      c.hidden2 = hs[1].get<int>();
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

namespace detail {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kProbClampLo = 1e-7;
constexpr double kProbClampHi = 1.0 - 1e-7;

}  // namespace detail

/// NeuralCDM: per-student proficiency and per-item difficulty K-vectors plus
/// a scalar per-item discrimination (all squashed to (0,1) by the logistic on
/// use) feed x = q_row .* (h_s - h_diff) * h_disc into two hidden logistic
/// layers whose weights stay non-negative, so predictions are non-decreasing
/// in every required attribute's proficiency.
///
/// All parameters live in one flat vector, in the order
///   [proficiency | difficulty | discrimination | W1 | b1 | W2 | b2 | W3 | b3]
/// which makes optimizer state, snapshots and finite-difference probes
/// straightforward.
class CdmModel {
 public:
  CdmModel(const CdmConfig& config, int n_students, QMatrix q, Rng& rng)
      : n_students_(n_students),
        n_items_(static_cast<int>(q.rows())),
        n_attrs_(static_cast<int>(q.cols())),
        h1_(config.hidden1),
        h2_(config.hidden2),
        q_(std::move(q)) {
    if (n_students_ < 1) throw std::runtime_error("cdm: n_students must be >= 1");
    config.validate();
    compute_offsets();
    params.assign(param_count_, 0.0);

    // symmetric uniform fan-based (Glorot) init; interaction weights take
    // the absolute value so the monotonicity constraint holds from step 0
    fill_uniform(rng, off_prof_, n_students_ * n_attrs_, n_students_ + n_attrs_, false);
    fill_uniform(rng, off_diff_, n_items_ * n_attrs_, n_items_ + n_attrs_, false);
    fill_uniform(rng, off_disc_, n_items_, n_items_ + 1, false);
    fill_uniform(rng, off_w1_, n_attrs_ * h1_, n_attrs_ + h1_, true);
    fill_uniform(rng, off_w2_, h1_ * h2_, h1_ + h2_, true);
    fill_uniform(rng, off_w3_, h2_, h2_ + 1, true);
    // Hidden biases cancel the expected positive drift of the all-positive
    // weights (E[|w|] = limit/2, E[a] = 1/2), otherwise every logistic unit
    // starts saturated and the first epochs learn nothing. b1 stays 0: the
    // input x is centered by construction.
    const double b2_center =
        -0.25 * h1_ * std::sqrt(6.0 / double(h1_ + h2_));
    for (int j = 0; j < h2_; ++j) params[off_b2_ + j] = b2_center;
    params[off_b3_] = -0.25 * h2_ * std::sqrt(6.0 / double(h2_ + 1));

    item_attrs_.resize(n_items_);
    for (int i = 0; i < n_items_; ++i) {
      for (int k = 0; k < n_attrs_; ++k) {
        if (q_.at(i, k)) item_attrs_[i].push_back(k);
      }
    }
  }

  int n_students() const { return n_students_; }
  int n_items() const { return n_items_; }
  int n_attrs() const { return n_attrs_; }
  int hidden1() const { return h1_; }
  int hidden2() const { return h2_; }
  const QMatrix& q() const { return q_; }
  const std::vector<int>& required_attrs(int item) const { return item_attrs_[item]; }

  std::size_t param_count() const { return param_count_; }
  std::size_t proficiency_offset() const { return off_prof_; }
  std::size_t difficulty_offset() const { return off_diff_; }
  std::size_t discrimination_offset() const { return off_disc_; }
  std::size_t w1_offset() const { return off_w1_; }
  std::size_t b1_offset() const { return off_b1_; }
  std::size_t w2_offset() const { return off_w2_; }
  std::size_t b2_offset() const { return off_b2_; }
  std::size_t w3_offset() const { return off_w3_; }
  std::size_t b3_offset() const { return off_b3_; }

  std::size_t proficiency_index(int student, int attr) const {
    return off_prof_ + std::size_t(student) * n_attrs_ + attr;
  }
  std::size_t difficulty_index(int item, int attr) const {
    return off_diff_ + std::size_t(item) * n_attrs_ + attr;
  }

  double min_interaction_weight() const {
    double m = params[off_w1_];
    for (std::size_t i = off_w1_; i < off_b1_; ++i) m = std::min(m, params[i]);
    for (std::size_t i = off_w2_; i < off_b2_; ++i) m = std::min(m, params[i]);
    for (std::size_t i = off_w3_; i < off_b3_; ++i) m = std::min(m, params[i]);
    return m;
  }

  /// Projects W1, W2, W3 back onto the non-negative orthant.
  void clamp_interaction_weights() {
    for (std::size_t i = off_w1_; i < off_b1_; ++i) params[i] = std::max(params[i], 0.0);
    for (std::size_t i = off_w2_; i < off_b2_; ++i) params[i] = std::max(params[i], 0.0);
    for (std::size_t i = off_w3_; i < off_b3_; ++i) params[i] = std::max(params[i], 0.0);
  }

  struct Scratch {
    std::vector<double> x, hs, hd, a1, a2, d1, d2, dx;
    double disc = 0.0;
    void resize(int n_attrs, int h1, int h2) {
      x.resize(n_attrs);
      hs.resize(n_attrs);
      hd.resize(n_attrs);
      a1.resize(h1);
      a2.resize(h2);
      d1.resize(h1);
      d2.resize(h2);
      dx.resize(n_attrs);
    }
  };

  /// Forward pass; fills the scratch buffers needed for the backward pass.
  /// x/hs/hd are only populated at the item's required attributes.
  double forward(int student, int item, Scratch& s) const {
    const auto& attrs = item_attrs_[item];
    s.disc = detail::logistic(params[off_disc_ + item]);
    for (int j = 0; j < h1_; ++j) s.a1[j] = params[off_b1_ + j];
    for (int k : attrs) {
      const double hs = detail::logistic(params[proficiency_index(student, k)]);
      const double hd = detail::logistic(params[difficulty_index(item, k)]);
      const double xk = (hs - hd) * s.disc;
      s.hs[k] = hs;
      s.hd[k] = hd;
      s.x[k] = xk;
      const double* w1row = &params[off_w1_ + std::size_t(k) * h1_];
      for (int j = 0; j < h1_; ++j) s.a1[j] += w1row[j] * xk;
    }
    for (int j = 0; j < h1_; ++j) s.a1[j] = detail::logistic(s.a1[j]);
    for (int m = 0; m < h2_; ++m) {
      double z = params[off_b2_ + m];
      for (int j = 0; j < h1_; ++j) z += params[off_w2_ + std::size_t(j) * h2_ + m] * s.a1[j];
      s.a2[m] = detail::logistic(z);
    }
    double z3 = params[off_b3_];
    for (int m = 0; m < h2_; ++m) z3 += params[off_w3_ + m] * s.a2[m];
    return detail::logistic(z3);
  }

  /// Predicted probability of a correct response. Strictly inside (0,1).
  double predict(int student, int item) const {
    if (student < 0 || student >= n_students_) {
      throw std::out_of_range("cdm: student index " + std::to_string(student) +
                              " out of range [0," + std::to_string(n_students_) + ")");
    }
    if (item < 0 || item >= n_items_) {
      throw std::out_of_range("cdm: item index " + std::to_string(item) +
                              " out of range [0," + std::to_string(n_items_) + ")");
    }
    Scratch s;
    s.resize(n_attrs_, h1_, h2_);
    return forward(student, item, s);
  }

  std::vector<double> params;

 private:
  void compute_offsets() {
    off_prof_ = 0;
    off_diff_ = off_prof_ + std::size_t(n_students_) * n_attrs_;
    off_disc_ = off_diff_ + std::size_t(n_items_) * n_attrs_;
    off_w1_ = off_disc_ + n_items_;
    off_b1_ = off_w1_ + std::size_t(n_attrs_) * h1_;
    off_w2_ = off_b1_ + h1_;
    off_b2_ = off_w2_ + std::size_t(h1_) * h2_;
    off_w3_ = off_b2_ + h2_;
    off_b3_ = off_w3_ + h2_;
    param_count_ = off_b3_ + 1;
  }

  void fill_uniform(Rng& rng, std::size_t offset, std::size_t count, int fan_sum,
                    bool non_negative) {
    const double limit = std::sqrt(6.0 / double(fan_sum));
    for (std::size_t i = 0; i < count; ++i) {
      const double v = rng.uniform(-limit, limit);
      params[offset + i] = non_negative ? std::abs(v) : v;
    }
  }

  int n_students_, n_items_, n_attrs_, h1_, h2_;
  QMatrix q_;
  std::vector<std::vector<int>> item_attrs_;
  std::size_t off_prof_ = 0, off_diff_ = 0, off_disc_ = 0;
  std::size_t off_w1_ = 0, off_b1_ = 0, off_w2_ = 0, off_b2_ = 0, off_w3_ = 0,
              off_b3_ = 0;
  std::size_t param_count_ = 0;
};

/// Deterministic construction from config + seed alone.
inline CdmModel init_model(const CdmConfig& config, int n_students, const QMatrix& q) {
  Rng rng(config.seed);
  return CdmModel(config, n_students, q, rng);
}

/// One response observation, index-coded against the model's axes.
struct Obs {
  int student = 0;
  int item = 0;
  int score = 0;
};

namespace detail {

inline double record_loss(double p, int score) {
  const double pc = std::clamp(p, kProbClampLo, kProbClampHi);
  return -(score ? std::log(pc) : std::log(1.0 - pc));
}

}  // namespace detail

/// Mean binary cross-entropy of a batch, probabilities clamped to
/// [1e-7, 1-1e-7]. Forward only.
inline double batch_loss(const CdmModel& model, const std::vector<Obs>& batch) {
  if (batch.empty()) throw std::runtime_error("cdm: empty batch");
  CdmModel::Scratch s;
  s.resize(model.n_attrs(), model.hidden1(), model.hidden2());
  double sum = 0.0;
  for (const auto& obs : batch) {
    sum += detail::record_loss(model.forward(obs.student, obs.item, s), obs.score);
  }
  return sum / double(batch.size());
}

/// Mean BCE plus its analytic gradient over the full flat parameter vector
/// (entries untouched by the batch stay 0). `grad` is resized and zeroed.
inline double loss_and_gradients(const CdmModel& model, const std::vector<Obs>& batch,
                                 std::vector<double>& grad) {
  if (batch.empty()) throw std::runtime_error("cdm: empty batch");
  grad.assign(model.param_count(), 0.0);

  const int h1 = model.hidden1();
  const int h2 = model.hidden2();
  CdmModel::Scratch s;
  s.resize(model.n_attrs(), h1, h2);

  const double inv_n = 1.0 / double(batch.size());
  double loss_sum = 0.0;
  for (const auto& obs : batch) {
    const double p = model.forward(obs.student, obs.item, s);
    loss_sum += detail::record_loss(p, obs.score);

    // the clamp zeroes the gradient outside [lo, hi]
    if (p < detail::kProbClampLo || p > detail::kProbClampHi) continue;
    const double dz3 = (p - double(obs.score)) * inv_n;

    grad[model.b3_offset()] += dz3;
    for (int m = 0; m < h2; ++m) {
      grad[model.w3_offset() + m] += dz3 * s.a2[m];
      s.d2[m] = dz3 * model.params[model.w3_offset() + m] * s.a2[m] * (1.0 - s.a2[m]);
      grad[model.b2_offset() + m] += s.d2[m];
    }
    for (int j = 0; j < h1; ++j) {
      double back = 0.0;
      const double* w2row = &model.params[model.w2_offset() + std::size_t(j) * h2];
      double* gw2row = &grad[model.w2_offset() + std::size_t(j) * h2];
      for (int m = 0; m < h2; ++m) {
        gw2row[m] += s.d2[m] * s.a1[j];
        back += w2row[m] * s.d2[m];
      }
      s.d1[j] = back * s.a1[j] * (1.0 - s.a1[j]);
      grad[model.b1_offset() + j] += s.d1[j];
    }
    const auto& attrs = model.required_attrs(obs.item);
    double ddisc_pre = 0.0;  // dL/d(h_disc)
    for (int k : attrs) {
      const double* w1row = &model.params[model.w1_offset() + std::size_t(k) * h1];
      double* gw1row = &grad[model.w1_offset() + std::size_t(k) * h1];
      double dxk = 0.0;
      for (int j = 0; j < h1; ++j) {
        gw1row[j] += s.d1[j] * s.x[k];
        dxk += w1row[j] * s.d1[j];
      }
      grad[model.proficiency_index(obs.student, k)] +=
          dxk * s.disc * s.hs[k] * (1.0 - s.hs[k]);
      grad[model.difficulty_index(obs.item, k)] -=
          dxk * s.disc * s.hd[k] * (1.0 - s.hd[k]);
      ddisc_pre += dxk * (s.hs[k] - s.hd[k]);
    }
    grad[model.discrimination_offset() + obs.item] +=
        ddisc_pre * s.disc * (1.0 - s.disc);
  }
  return loss_sum * inv_n;
}

/// Adam over the flat parameter vector (beta1=0.9, beta2=0.999, eps=1e-8).
class AdamOptimizer {
 public:
  AdamOptimizer(std::size_t n_params, double learning_rate)
      : lr_(learning_rate), m_(n_params, 0.0), v_(n_params, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, double(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grad[i];
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grad[i] * grad[i];
      const double m_hat = m_[i] / bc1;
      const double v_hat = v_[i] / bc2;
      params[i] -= lr_ * m_hat / (std::sqrt(v_hat) + kEps);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  bool has_val = false;
  /// unset when the validation slice is single-class (degenerate)
  std::optional<double> val_auc;
  double val_rmse = 0.0;
  bool degenerate_auc = false;
};

struct TrainedCdm {
  CdmModel model;
  std::vector<EpochStats> history;
  int best_epoch = 0;
  /// Row order of the proficiency table.
  std::vector<std::string> student_ids;
  /// Items whose q-row is all zeros; they stay in training but their
  /// predictions are driven by biases alone.
  std::vector<std::string> degenerate_items;
};

namespace detail {

struct IndexedLog {
  std::vector<std::string> student_ids;            // sorted unique
  std::unordered_map<std::string, int> student_index;
  std::vector<Obs> obs;                            // log order
};

inline IndexedLog index_log(const ResponseLog& logs, const QMatrix& q) {
  if (logs.records.empty()) throw std::runtime_error("cdm: response log is empty");
  IndexedLog out;
  out.student_ids = logs.student_ids();
  for (std::size_t i = 0; i < out.student_ids.size(); ++i) {
    out.student_index[out.student_ids[i]] = static_cast<int>(i);
  }
  out.obs.reserve(logs.records.size());
  for (const auto& r : logs.records) {
    const auto item = q.item_index(r.item_id);
    if (!item) {
      throw std::runtime_error("cdm: response log references item '" + r.item_id +
                               "' absent from the Q-matrix");
    }
    out.obs.push_back({out.student_index.at(r.student_id),
                       static_cast<int>(*item), r.score});
  }
  return out;
}

inline std::uint64_t derive_stream(std::uint64_t seed) {
  // splitmix64 step; keeps the split stream distinct from the init stream
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Within-student holdout: 20% of each student's records (rounded down,
/// min 1) become test; students with fewer than 5 records keep everything
/// in training. Returns a mask over the global record indices in
/// `by_student`.
inline std::vector<bool> select_heldout(
    const std::vector<std::vector<std::size_t>>& by_student, std::size_t n_records,
    Rng& rng) {
  std::vector<bool> is_test(n_records, false);
  for (const auto& group : by_student) {
    if (group.size() < 5) continue;
    std::vector<std::size_t> shuffled = group;
    rng.shuffle(shuffled);
    const std::size_t n_test = std::max<std::size_t>(1, group.size() / 5);
    for (std::size_t i = 0; i < n_test; ++i) is_test[shuffled[i]] = true;
  }
  return is_test;
}

}  // namespace detail

/// Mini-batch Adam training with per-epoch shuffling, post-step projection
/// of the interaction weights onto >= 0, and early stopping on a 10% slice
/// of the training records (by AUC, falling back to RMSE when the slice is
/// single-class). Returns the model snapshot from the best validation epoch.
inline TrainedCdm train(const ResponseLog& logs, const QMatrix& q,
                        const CdmConfig& config) {
  config.validate();
  auto indexed = detail::index_log(logs, q);
  const int n_students = static_cast<int>(indexed.student_ids.size());

  Rng rng(config.seed);
  CdmModel model(config, n_students, q, rng);

  // carve the early-stopping slice out of the training records
  std::vector<std::size_t> order(indexed.obs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const std::size_t n_val =
      indexed.obs.size() >= 10 ? indexed.obs.size() / 10
                               : (indexed.obs.size() >= 2 ? 1 : 0);
  std::vector<Obs> val_obs, train_obs;
  val_obs.reserve(n_val);
  train_obs.reserve(order.size() - n_val);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? val_obs : train_obs).push_back(indexed.obs[order[i]]);
  }

  AdamOptimizer adam(model.param_count(), config.learning_rate);
  std::vector<double> grad;
  std::vector<std::size_t> train_order(train_obs.size());
  for (std::size_t i = 0; i < train_order.size(); ++i) train_order[i] = i;

  TrainedCdm result{std::move(model), {}, 0, indexed.student_ids,
                    q.zero_row_items()};
  std::vector<double> best_params = result.model.params;
  double best_score = -std::numeric_limits<double>::infinity();
  int epochs_without_improvement = 0;

  CdmModel::Scratch scratch;
  scratch.resize(result.model.n_attrs(), config.hidden1, config.hidden2);
  std::vector<Obs> batch;
  batch.reserve(config.batch_size);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(train_order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < train_order.size();
         start += config.batch_size) {
      const std::size_t end =
          std::min(train_order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_obs[train_order[i]]);
      const double batch_mean = loss_and_gradients(result.model, batch, grad);
      loss_sum += batch_mean * double(batch.size());
      if (config.weight_decay > 0.0) {
        // L2 on the embedding entries each record actually touches, at the
        // same batch-mean scale as the BCE gradient. Untouched rows are
        // left alone: a dense decay would dominate their Adam updates and
        // wash the tables out.
        const double scale = config.weight_decay / double(batch.size());
        for (const auto& obs : batch) {
          for (int k : result.model.required_attrs(obs.item)) {
            const auto p_idx = result.model.proficiency_index(obs.student, k);
            const auto d_idx = result.model.difficulty_index(obs.item, k);
            grad[p_idx] += scale * result.model.params[p_idx];
            grad[d_idx] += scale * result.model.params[d_idx];
          }
        }
      }
      adam.step(result.model.params, grad);
      result.model.clamp_interaction_weights();
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss =
        train_obs.empty() ? 0.0 : loss_sum / double(train_obs.size());

    double score;
    if (!val_obs.empty()) {
      std::vector<PredLabel> val_pairs;
      val_pairs.reserve(val_obs.size());
      for (const auto& obs : val_obs) {
        val_pairs.emplace_back(result.model.forward(obs.student, obs.item, scratch),
                               obs.score);
      }
      stats.has_val = true;
      stats.val_auc = auc(val_pairs);
      stats.val_rmse = rmse(val_pairs);
      stats.degenerate_auc = !stats.val_auc.has_value();
      score = stats.val_auc ? *stats.val_auc : -stats.val_rmse;
    } else {
      score = -stats.train_loss;
    }
    result.history.push_back(stats);

    if (score > best_score) {
      best_score = score;
      best_params = result.model.params;
      result.best_epoch = epoch;
      epochs_without_improvement = 0;
    } else {
      ++epochs_without_improvement;
      if (epochs_without_improvement >= config.early_stop_patience) break;
    }
  }

  result.model.params = std::move(best_params);
  return result;
}

struct SplitScores {
  double auc = 0.0;
  double rmse = 0.0;
};

struct FitReport {
  double auc_mean = 0.0;
  double auc_std = 0.0;
  double rmse_mean = 0.0;
  double rmse_std = 0.0;
  std::vector<SplitScores> per_split;
  CdmConfig config;
  int n_repeats = 0;
  double elapsed_seconds = 0.0;

  nlohmann::ordered_json to_json(bool include_elapsed = true) const {
    nlohmann::ordered_json j;
    j["auc_mean"] = auc_mean;
    j["auc_std"] = auc_std;
    j["rmse_mean"] = rmse_mean;
    j["rmse_std"] = rmse_std;
    j["per_split"] = nlohmann::ordered_json::array();
    for (const auto& s : per_split) {
      j["per_split"].push_back({{"auc", s.auc}, {"rmse", s.rmse}});
    }
    j["config"] = config.to_json();
    j["config"]["n_repeats"] = n_repeats;
    if (include_elapsed) j["elapsed_seconds"] = elapsed_seconds;
    return j;
  }

  static FitReport from_json(const nlohmann::json& j) {
    FitReport r;
    r.auc_mean = j.at("auc_mean").get<double>();
    r.auc_std = j.at("auc_std").get<double>();
    r.rmse_mean = j.at("rmse_mean").get<double>();
    r.rmse_std = j.at("rmse_std").get<double>();
    for (const auto& s : j.value("per_split", nlohmann::json::array())) {
      r.per_split.push_back({s.at("auc").get<double>(), s.at("rmse").get<double>()});
    }
    if (j.contains("config")) {
      r.config = CdmConfig::from_json(j.at("config"));
      r.n_repeats = j.at("config").value("n_repeats", 0);
    }
    r.elapsed_seconds = j.value("elapsed_seconds", 0.0);
    return r;
  }
};

/// Repeated within-student 80/20 holdout. Repeat r trains with seed
/// config.seed + r; students with fewer than 5 records contribute all of
/// their records to training. Reported std is the sample std of the
/// per-repeat values (0 for a single repeat).
inline FitReport cross_validate(const ResponseLog& logs, const QMatrix& q,
                                const CdmConfig& config, int n_repeats) {
  config.validate();
  if (n_repeats < 1) throw std::runtime_error("cdm: n_repeats must be >= 1");
  auto indexed = detail::index_log(logs, q);  // validates the q/log axis match

  // record indices grouped per student, in log order
  std::vector<std::vector<std::size_t>> by_student(indexed.student_ids.size());
  for (std::size_t i = 0; i < indexed.obs.size(); ++i) {
    by_student[indexed.obs[i].student].push_back(i);
  }

  const auto t0 = std::chrono::steady_clock::now();
  FitReport report;
  report.config = config;
  report.n_repeats = n_repeats;

  for (int r = 0; r < n_repeats; ++r) {
    CdmConfig repeat_config = config;
    repeat_config.seed = config.seed + std::uint64_t(r);
    Rng split_rng(detail::derive_stream(repeat_config.seed));
    const std::vector<bool> is_test =
        detail::select_heldout(by_student, indexed.obs.size(), split_rng);

    ResponseLog train_log;
    std::vector<std::size_t> test_idx;
    for (std::size_t i = 0; i < indexed.obs.size(); ++i) {
      if (is_test[i]) test_idx.push_back(i);
      else train_log.records.push_back(logs.records[i]);
    }
    if (test_idx.empty()) {
      throw std::runtime_error(
          "cdm: no held-out records (every student has < 5 records)");
    }

    TrainedCdm trained = train(train_log, q, repeat_config);
    // the trained student axis equals the full axis: every student keeps
    // >= 80% of their records in training
    std::vector<PredLabel> test_pairs;
    test_pairs.reserve(test_idx.size());
    for (std::size_t i : test_idx) {
      const Obs& obs = indexed.obs[i];
      test_pairs.emplace_back(trained.model.predict(obs.student, obs.item), obs.score);
    }
    const auto split_auc = auc(test_pairs);
    if (!split_auc) {
      throw std::runtime_error("cdm: held-out pool is single-class, AUC undefined");
    }
    report.per_split.push_back({*split_auc, rmse(test_pairs)});
  }

  double auc_sum = 0.0, rmse_sum = 0.0;
  for (const auto& s : report.per_split) {
    auc_sum += s.auc;
    rmse_sum += s.rmse;
  }
  report.auc_mean = auc_sum / double(n_repeats);
  report.rmse_mean = rmse_sum / double(n_repeats);
  if (n_repeats > 1) {
    double auc_var = 0.0, rmse_var = 0.0;
    for (const auto& s : report.per_split) {
      auc_var += (s.auc - report.auc_mean) * (s.auc - report.auc_mean);
      rmse_var += (s.rmse - report.rmse_mean) * (s.rmse - report.rmse_mean);
    }
    report.auc_std = std::sqrt(auc_var / double(n_repeats - 1));
    report.rmse_std = std::sqrt(rmse_var / double(n_repeats - 1));
  }
  report.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace qmv
