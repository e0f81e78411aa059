#pragma once

// Shared test utilities: fixture paths, temp dirs, random generators and the
// independent brute-force oracles the suites freeze expected values against.

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qmv/cdm.hpp"
#include "qmv/metrics.hpp"
#include "qmv/qmatrix.hpp"
#include "qmv/rng.hpp"

namespace qmv::test {

inline std::filesystem::path fixtures_dir() {
  return std::filesystem::path(QMV_FIXTURES_DIR);
}

inline std::filesystem::path fixture(const std::string& name) {
  return fixtures_dir() / name;
}

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    dir_ = std::filesystem::temp_directory_path() /
           ("qmv-" + tag + "-" + std::to_string(::getpid()) + "-" +
            std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  const std::filesystem::path& path() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

inline QMatrix random_qmatrix(Rng& rng, std::size_t items, std::size_t attrs,
                              double density = 0.3) {
  std::vector<std::string> item_ids, attr_ids;
  for (std::size_t i = 0; i < items; ++i) item_ids.push_back("q" + std::to_string(i + 1));
  for (std::size_t k = 0; k < attrs; ++k) attr_ids.push_back("A" + std::to_string(k + 1));
  std::vector<std::uint8_t> cells(items * attrs);
  for (auto& c : cells) c = rng.bernoulli(density) ? 1 : 0;
  return QMatrix(std::move(item_ids), std::move(attr_ids), std::move(cells));
}

/// Moves `fraction` of the ones to randomly chosen zero cells.
inline QMatrix corrupt_qmatrix(const QMatrix& q, double fraction, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> one_cells, zero_cells;
  for (std::size_t i = 0; i < q.cell_count(); ++i) {
    (q.cells()[i] ? one_cells : zero_cells).push_back(i);
  }
  rng.shuffle(one_cells);
  rng.shuffle(zero_cells);
  const std::size_t n_move = static_cast<std::size_t>(double(one_cells.size()) * fraction);
  std::vector<std::uint8_t> cells = q.cells();
  for (std::size_t m = 0; m < n_move && m < zero_cells.size(); ++m) {
    cells[one_cells[m]] = 0;
    cells[zero_cells[m]] = 1;
  }
  return QMatrix(q.item_ids(), q.attribute_ids(), std::move(cells));
}

inline AnnotationSet random_annotation_set(Rng& rng,
                                           const std::vector<std::string>& item_ids,
                                           const std::vector<std::string>& attr_ids,
                                           int options_per_item = 3,
                                           double label_prob = 0.25) {
  const ConfidenceTier tiers[] = {ConfidenceTier::Low, ConfidenceTier::Medium,
                                  ConfidenceTier::High};
  AnnotationSet set;
  set.provenance.model = "test";
  set.provenance.prompt_version = "V2";
  set.provenance.endpoint_label = "test";
  for (const auto& item_id : item_ids) {
    ItemAnnotation item;
    item.item_id = item_id;
    for (int o = 0; o < options_per_item; ++o) {
      OptionAnnotation opt;
      opt.option_id = std::string(1, char('a' + o));
      for (const auto& attr : attr_ids) {
        if (rng.bernoulli(label_prob)) {
          opt.labels.push_back({attr, tiers[rng.below(3)], "generated"});
        }
      }
      item.options.push_back(std::move(opt));
    }
    set.items.push_back(std::move(item));
  }
  return set;
}

/// Independent oracle for build_qmatrix: a per-cell scan over every
/// (item, option, label) tuple in the set.
inline std::vector<std::uint8_t> brute_force_cells(
    const AnnotationSet& set, ConfidenceTier threshold,
    const std::vector<std::string>& item_ids,
    const std::vector<std::string>& attr_ids) {
  std::vector<std::uint8_t> cells(item_ids.size() * attr_ids.size(), 0);
  for (std::size_t i = 0; i < item_ids.size(); ++i) {
    for (std::size_t k = 0; k < attr_ids.size(); ++k) {
      bool hit = false;
      for (const auto& item : set.items) {
        if (item.item_id != item_ids[i]) continue;
        for (const auto& opt : item.options) {
          for (const auto& label : opt.labels) {
            if (label.misconception_id == attr_ids[k] &&
                static_cast<int>(label.tier) >= static_cast<int>(threshold)) {
              hit = true;
            }
          }
        }
      }
      cells[i * attr_ids.size() + k] = hit ? 1 : 0;
    }
  }
  return cells;
}

/// Independent oracle for AUC: O(n^2) pair counting, ties worth one half.
inline std::optional<double> brute_force_auc(const std::vector<PredLabel>& pairs) {
  double wins = 0.0;
  long n_pairs = 0;
  for (const auto& [pp, lp] : pairs) {
    if (lp != 1) continue;
    for (const auto& [pn, ln] : pairs) {
      if (ln != 0) continue;
      ++n_pairs;
      if (pp > pn) wins += 1.0;
      else if (pp == pn) wins += 0.5;
    }
  }
  if (n_pairs == 0) return std::nullopt;
  return wins / double(n_pairs);
}

/// Central finite difference of the batch loss wrt one parameter.
inline double fd_gradient(CdmModel& model, const std::vector<Obs>& batch,
                          std::size_t param_index, double step = 1e-4) {
  const double saved = model.params[param_index];
  model.params[param_index] = saved + step;
  const double up = batch_loss(model, batch);
  model.params[param_index] = saved - step;
  const double down = batch_loss(model, batch);
  model.params[param_index] = saved;
  return (up - down) / (2.0 * step);
}

/// Max relative error between analytic and finite-difference gradients over
/// every parameter; denominators floored to keep near-zero gradients from
/// amplifying FD noise.
inline double max_gradient_rel_error(CdmModel& model, const std::vector<Obs>& batch) {
  std::vector<double> grad;
  loss_and_gradients(model, batch, grad);
  double worst = 0.0;
  for (std::size_t i = 0; i < model.param_count(); ++i) {
    const double fd = fd_gradient(model, batch, i);
    const double denom = std::max({std::abs(grad[i]), std::abs(fd), 1e-3});
    worst = std::max(worst, std::abs(grad[i] - fd) / denom);
  }
  return worst;
}

}  // namespace qmv::test
