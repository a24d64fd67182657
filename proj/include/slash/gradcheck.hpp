// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "slash/tape.hpp"

namespace slash {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_tape = 0.0;
  double worst_fd = 0.0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // step reductions caused by kinks
  bool finite = true;

  bool passed(double tol) const { return finite && max_rel_error <= tol; }
};

/// |a-b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares tape gradients of `build_loss` against central finite
/// differences for every scalar of every parameter in `params`.
/// `build_loss` must record a scalar loss on the supplied tape and must be
/// deterministic. `stride` > 1 checks every stride-th scalar only.
/// `floor` is the smallest denominator of the relative error.
/// Slopes below this are too small for curvature and kinks to be told apart.
inline constexpr double kKinkFloor = 1e-4;

/// With `kink_retries` > 0, a scalar whose left and right one-sided
/// slopes disagree by more than 1e-3 relative (a ReLU or max kink inside
/// [x-h, x+h])
/// is re-measured with h/10, up to that many times.
template <typename T>
GradCheckResult finite_diff_check(const std::function<Var<T>(Tape<T>&)>& build_loss,
                                  const std::vector<Parameter<T>*>& params, T h,
                                  std::size_t stride = 1, double floor = 1e-8, std::size_t kink_retries = 0) {
  if (!(h > T(0))) throw ConfigError("finite_diff_check: step must be positive");
  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape;
    auto loss = build_loss(tape);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<T> tape(false);
    return static_cast<double>(build_loss(tape).value().item());
  };

  const double f0 = kink_retries ? eval() : 0.0;
  GradCheckResult res;
  std::size_t counter = 0;
  for (auto* p : params) {
    const Tensor<T> analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i, ++counter) {
      if (counter % stride != 0) continue;
      const T saved = p->value[i];
      T step = h;
      double fd = 0.0, best_mismatch = std::numeric_limits<double>::infinity();
      for (std::size_t attempt = 0;; ++attempt) {
        p->value[i] = saved + step;
        const double fp = eval();
        p->value[i] = saved - step;
        const double fm = eval();
        p->value[i] = saved;
        const double hs = static_cast<double>(step);
        const double central = (fp - fm) / (2.0 * hs);
        if (kink_retries == 0) {
          fd = central;
          break;
        }
        // Keep the step over which the function looks most linear.
        const double mismatch = relative_error((fp - f0) / hs, (f0 - fm) / hs, kKinkFloor);
        if (mismatch < best_mismatch) {
          best_mismatch = mismatch;
          fd = central;
        }
        if (mismatch <= 1e-3 || attempt == kink_retries) break;
        step /= T(10);
        ++res.refined;
      }
      const double a = static_cast<double>(analytic[i]);
      ++res.checked;
      if (!std::isfinite(fd) || !std::isfinite(a)) {
        res.finite = false;
        res.max_rel_error = std::numeric_limits<double>::infinity();
        res.worst_param = p->name;
        res.worst_index = i;
        continue;
      }
      const double err = relative_error(a, fd, floor);
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = p->name;
        res.worst_index = i;
        res.worst_tape = a;
        res.worst_fd = fd;
      }
    }
  }
  return res;
}

}  // namespace slash
