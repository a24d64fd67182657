// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "slash/error.hpp"
#include "slash/hungarian.hpp"
#include "slash/text.hpp"

namespace slash {

struct Segmentation {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;  // row-major, nonnegative

  Segmentation() = default;
  Segmentation(std::size_t h, std::size_t w, std::vector<int> l)
      : height(h), width(w), labels(std::move(l)) {
    if (labels.size() != h * w) throw DimensionError("Segmentation: label count does not match shape");
    for (int v : labels)
      if (v < 0) throw DimensionError("Segmentation: negative label");
  }

  std::size_t num_segments() const {
    return std::set<int>(labels.begin(), labels.end()).size();
  }
};

namespace detail {

inline void require_same_extent(const Segmentation& a, const Segmentation& b) {
  if (a.height != b.height || a.width != b.width || a.labels.size() != b.labels.size()) {
    throw DimensionError("segmentations differ in shape");
  }
}

inline std::int64_t pairs(std::int64_t n) { return n * (n - 1) / 2; }

/// ARI over the pixels where `keep` is true (or all pixels). Integer
/// accumulation keeps the result exactly symmetric and relabeling-invariant.
inline std::optional<double> ari_masked(const std::vector<int>& a, const std::vector<int>& b,
                                        const std::vector<char>* keep) {
  std::map<std::pair<int, int>, std::int64_t> joint;
  std::map<int, std::int64_t> ca, cb;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (keep && !(*keep)[i]) continue;
    ++joint[{a[i], b[i]}];
    ++ca[a[i]];
    ++cb[b[i]];
    ++n;
  }
  if (n == 0) return std::nullopt;
  std::int64_t index = 0, sa = 0, sb = 0;
  for (const auto& [k, c] : joint) index += pairs(c);
  for (const auto& [k, c] : ca) sa += pairs(c);
  for (const auto& [k, c] : cb) sb += pairs(c);
  const double total = static_cast<double>(pairs(n));
  const double expected = total > 0 ? static_cast<double>(sa) * static_cast<double>(sb) / total : 0.0;
  const double max_index = 0.5 * (static_cast<double>(sa) + static_cast<double>(sb));
  const double denom = max_index - expected;
  if (denom == 0.0) {
    // Both partitions are trivial (single cluster or all singletons).
    return (sa == sb && index == sa) ? 1.0 : 0.0;
  }
  return (static_cast<double>(index) - expected) / denom;
}

}  // namespace detail

/// Adjusted Rand index over all pixels; background counts as a cluster.
inline double ari(const Segmentation& pred, const Segmentation& gt) {
  detail::require_same_extent(pred, gt);
  return *detail::ari_masked(pred.labels, gt.labels, nullptr);
}

/// ARI restricted to pixels whose ground-truth label is not 0. Returns
/// nullopt when there are no foreground pixels.
inline std::optional<double> fg_ari(const Segmentation& pred, const Segmentation& gt) {
  detail::require_same_extent(pred, gt);
  std::vector<char> keep(gt.labels.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = gt.labels[i] != 0;
  return detail::ari_masked(pred.labels, gt.labels, &keep);
}

/// IoU between every predicted segment (rows) and gt segment (cols), in
/// ascending label order.
inline CostMatrix iou_matrix(const Segmentation& pred, const Segmentation& gt) {
  detail::require_same_extent(pred, gt);
  std::map<int, std::size_t> pi, gi;
  for (int v : pred.labels) pi.emplace(v, 0);
  for (int v : gt.labels) gi.emplace(v, 0);
  std::size_t k = 0;
  for (auto& [l, i] : pi) i = k++;
  k = 0;
  for (auto& [l, i] : gi) i = k++;
  std::vector<double> inter(pi.size() * gi.size(), 0.0), pa(pi.size(), 0.0), ga(gi.size(), 0.0);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const std::size_t r = pi[pred.labels[i]], c = gi[gt.labels[i]];
    inter[r * gi.size() + c] += 1.0;
    pa[r] += 1.0;
    ga[c] += 1.0;
  }
  CostMatrix iou(pi.size(), gi.size());
  for (std::size_t r = 0; r < pi.size(); ++r)
    for (std::size_t c = 0; c < gi.size(); ++c) {
      const double in = inter[r * gi.size() + c];
      iou(r, c) = in / (pa[r] + ga[c] - in);
    }
  return iou;
}

/// Mean IoU over gt segments (background included) after Hungarian
/// matching on cost 1 - IoU. Unmatched gt segments contribute 0.
inline double miou(const Segmentation& pred, const Segmentation& gt) {
  const CostMatrix iou = iou_matrix(pred, gt);
  CostMatrix cost(iou.rows, iou.cols);
  for (std::size_t i = 0; i < cost.values.size(); ++i) cost.values[i] = 1.0 - iou.values[i];
  const Assignment a = hungarian(cost);
  std::vector<double> matched;
  for (std::size_t r = 0; r < a.row_to_col.size(); ++r)
    if (a.row_to_col[r] >= 0) matched.push_back(iou(r, static_cast<std::size_t>(a.row_to_col[r])));
  // sorted so the result does not depend on how predicted labels are numbered
  std::sort(matched.begin(), matched.end());
  double total = 0.0;
  for (double v : matched) total += v;
  return total / static_cast<double>(iou.cols);
}

struct SampleMetrics {
  double ari = 0.0;
  double miou = 0.0;
  std::optional<double> fg_ari;
};

inline SampleMetrics evaluate_segmentation(const Segmentation& pred, const Segmentation& gt) {
  return SampleMetrics{ari(pred, gt), miou(pred, gt), fg_ari(pred, gt)};
}

/// Dataset-level metrics of one run (one seed).
struct SeedMetrics {
  std::uint64_t seed = 0;
  double ari = 0.0;
  double miou = 0.0;
  double fg_ari = 0.0;
  std::size_t samples = 0;
  std::size_t fg_ari_skipped = 0;
};

/// Averages per-sample metrics; samples without foreground are excluded
/// from fg-ARI and counted.
inline SeedMetrics average_samples(const std::vector<SampleMetrics>& samples, std::uint64_t seed = 0) {
  SeedMetrics out;
  out.seed = seed;
  out.samples = samples.size();
  std::size_t fg_n = 0;
  for (const auto& s : samples) {
    out.ari += s.ari;
    out.miou += s.miou;
    if (s.fg_ari) {
      out.fg_ari += *s.fg_ari;
      ++fg_n;
    } else {
      ++out.fg_ari_skipped;
    }
  }
  if (!samples.empty()) {
    out.ari /= static_cast<double>(samples.size());
    out.miou /= static_cast<double>(samples.size());
  }
  if (fg_n) out.fg_ari /= static_cast<double>(fg_n);
  return out;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population estimator
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return r;
}

struct MetricReport {
  std::string label;
  std::vector<SeedMetrics> per_seed;
  MeanStd ari, miou, fg_ari;
};

inline MetricReport aggregate_seeds(std::vector<SeedMetrics> per_seed, std::string label = {}) {
  if (per_seed.empty()) throw UsageError("aggregate_seeds: need at least one seed");
  MetricReport r;
  r.label = std::move(label);
  std::vector<double> a, m, f;
  for (const auto& s : per_seed) {
    a.push_back(s.ari);
    m.push_back(s.miou);
    f.push_back(s.fg_ari);
  }
  r.ari = mean_std(a);
  r.miou = mean_std(m);
  r.fg_ari = mean_std(f);
  r.per_seed = std::move(per_seed);
  return r;
}

/// One `seed=` record per seed followed by an `aggregate` record.
inline std::string format_report(const MetricReport& r) {
  using text::format_double;
  std::string out = "label=" + r.label + "\n";
  for (const auto& s : r.per_seed) {
    out += "seed=" + std::to_string(s.seed) + " ari=" + format_double(s.ari) + " miou=" + format_double(s.miou) +
           " fg_ari=" + format_double(s.fg_ari) + " samples=" + std::to_string(s.samples) +
           " fg_ari_skipped=" + std::to_string(s.fg_ari_skipped) + "\n";
  }
  out += "aggregate ari_mean=" + format_double(r.ari.mean) + " ari_std=" + format_double(r.ari.std) +
         " miou_mean=" + format_double(r.miou.mean) + " miou_std=" + format_double(r.miou.std) +
         " fg_ari_mean=" + format_double(r.fg_ari.mean) + " fg_ari_std=" + format_double(r.fg_ari.std) +
         " seeds=" + std::to_string(r.per_seed.size()) + "\n";
  return out;
}

/// label,metric,mean,std,seeds with one row per metric per report.
inline std::string report_csv(const std::vector<MetricReport>& reports) {
  using text::format_double;
  std::string out = "label,metric,mean,std,seeds\n";
  for (const auto& r : reports) {
    const std::pair<const char*, const MeanStd*> rows[] = {{"ari", &r.ari}, {"miou", &r.miou}, {"fg_ari", &r.fg_ari}};
    for (const auto& [name, ms] : rows) {
      out += r.label + "," + name + "," + format_double(ms->mean) + "," + format_double(ms->std) + "," +
             std::to_string(r.per_seed.size()) + "\n";
    }
  }
  return out;
}

}  // namespace slash
