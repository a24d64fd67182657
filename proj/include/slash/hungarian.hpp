// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "slash/error.hpp"

namespace slash {

struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major

  CostMatrix() = default;
  CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  CostMatrix(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v)) {
    if (values.size() != r * c) throw DimensionError("CostMatrix: value count does not match shape");
  }

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct Assignment {
  std::vector<int> row_to_col;  // -1 where the row is unmatched
  double total_cost = 0.0;

  std::size_t matched() const {
    return static_cast<std::size_t>(std::count_if(row_to_col.begin(), row_to_col.end(),
                                                  [](int c) { return c >= 0; }));
  }
};

/// Minimum-cost assignment of min(rows, cols) pairs (Kuhn-Munkres with
/// potentials, O(n^3)). Rectangular inputs are padded to square with a
/// constant strictly above every real entry.
inline Assignment hungarian(const CostMatrix& cost) {
  Assignment out;
  out.row_to_col.assign(cost.rows, -1);
  if (cost.rows == 0 || cost.cols == 0) return out;
  double hi = 0.0;
  for (double v : cost.values) {
    if (std::isnan(v)) throw std::invalid_argument("hungarian: NaN in cost matrix");
    if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost");
    hi = std::max(hi, std::abs(v));
  }
  const double pad = 2.0 * hi + 1.0;
  const std::size_t n = std::max(cost.rows, cost.cols);
  auto a = [&](std::size_t i, std::size_t j) {  // 1-based
    return (i <= cost.rows && j <= cost.cols) ? cost(i - 1, j - 1) : pad;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  for (std::size_t j = 1; j <= n; ++j) {
    const std::size_t i = p[j];
    if (i >= 1 && i <= cost.rows && j <= cost.cols) out.row_to_col[i - 1] = static_cast<int>(j - 1);
  }
  for (std::size_t r = 0; r < cost.rows; ++r)
    if (out.row_to_col[r] >= 0) out.total_cost += cost(r, static_cast<std::size_t>(out.row_to_col[r]));
  return out;
}

}  // namespace slash
