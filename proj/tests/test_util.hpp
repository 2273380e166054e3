#pragma once

#include <algorithm>
#include <numeric>

#include "siamav/eval.hpp"
#include "siamav/rng.hpp"
#include "siamav/tensor.hpp"

namespace testutil {

inline siamav::Tensor<double> random_tensor(siamav::Shape s, siamav::Rng& rng, bool requires_grad = false,
                                            double scale = 1.0) {
  std::vector<double> v(siamav::shape_numel(s));
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return siamav::Tensor<double>(std::move(s), std::move(v), requires_grad);
}

// Scores drawn from a small set of levels so ties are common.
inline siamav::Matrix tied_matrix(std::size_t n, siamav::Rng& rng, std::size_t levels) {
  siamav::Matrix s{n, n, std::vector<double>(n * n)};
  for (auto& v : s.values) v = static_cast<double>(rng.below(levels)) / static_cast<double>(levels);
  return s;
}

// Sort each row by (score desc, index asc) and look up the diagonal position.
inline double recall_oracle(const siamav::Matrix& s, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < s.rows; ++r) {
    std::vector<std::size_t> order(s.cols);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return s(r, a) != s(r, b) ? s(r, a) > s(r, b) : a < b;
    });
    const auto pos = static_cast<std::size_t>(std::find(order.begin(), order.end(), r) - order.begin());
    if (pos < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(s.rows);
}

// AP by counting, per positive, how many items and positives sort at or ahead of it.
inline double map_oracle(const std::vector<double>& scores, const std::vector<std::vector<std::uint8_t>>& labels, std::size_t K) {
  const std::size_t N = labels.size();
  double total = 0;
  std::size_t classes = 0;
  for (std::size_t k = 0; k < K; ++k) {
    auto ahead_or_same = [&](std::size_t a, std::size_t i) {
      return scores[a * K + k] > scores[i * K + k] || (scores[a * K + k] == scores[i * K + k] && a <= i);
    };
    double ap = 0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (!labels[i][k]) continue;
      ++pos;
      std::size_t items = 0, positives = 0;
      for (std::size_t a = 0; a < N; ++a)
        if (ahead_or_same(a, i)) {
          ++items;
          positives += labels[a][k];
        }
      ap += static_cast<double>(positives) / static_cast<double>(items);
    }
    if (pos == 0) continue;
    total += ap / static_cast<double>(pos);
    ++classes;
  }
  return total / static_cast<double>(classes);
}

}  // namespace testutil
