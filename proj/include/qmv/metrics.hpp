#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace qmv {

/// (prediction, binary label) pair.
using PredLabel = std::pair<double, int>;

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores a higher prediction, ties counting 0.5. Computed via
/// average ranks in O(n log n); equal to brute-force pair counting.
///
/// Returns nullopt when the labels are single-class (AUC undefined).
inline std::optional<double> auc(const std::vector<PredLabel>& pairs) {
  const std::size_t n = pairs.size();
  std::size_t n_pos = 0;
  for (const auto& [pred, label] : pairs) {
    (void)pred;
    if (label != 0 && label != 1) {
      throw std::runtime_error("auc: labels must be 0 or 1");
    }
    n_pos += static_cast<std::size_t>(label);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pairs[a].first < pairs[b].first;
  });

  // average ranks over tie groups, 1-based
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && pairs[order[j]].first == pairs[order[i]].first) ++j;
    const double avg_rank = 0.5 * (double(i + 1) + double(j));
    for (std::size_t k = i; k < j; ++k) {
      if (pairs[order[k]].second == 1) pos_rank_sum += avg_rank;
    }
    i = j;
  }
  const double u = pos_rank_sum - 0.5 * double(n_pos) * double(n_pos + 1);
  return u / (double(n_pos) * double(n_neg));
}

/// sqrt(mean((prediction - label)^2)). Throws on empty input.
inline double rmse(const std::vector<PredLabel>& pairs) {
  if (pairs.empty()) throw std::runtime_error("rmse: empty input");
  double sum_sq = 0.0;
  for (const auto& [pred, label] : pairs) {
    const double d = pred - double(label);
    sum_sq += d * d;
  }
  return std::sqrt(sum_sq / double(pairs.size()));
}

}  // namespace qmv
