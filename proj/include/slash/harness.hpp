// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <exception>
#include <filesystem>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "slash/run.hpp"

namespace slash {

/// Parses "a..b" (inclusive) or a single seed.
inline std::vector<std::uint64_t> parse_seed_range(const std::string& s) {
  const auto dots = s.find("..");
  std::uint64_t a = 0, b = 0;
  try {
    if (dots == std::string::npos) {
      a = b = text::parse_uint(text::trim(s), "seed");
    } else {
      a = text::parse_uint(text::trim(std::string_view(s).substr(0, dots)), "seed range");
      b = text::parse_uint(text::trim(std::string_view(s).substr(dots + 2)), "seed range");
    }
  } catch (const DataError&) {
    throw UsageError("invalid seed range '" + s + "' (expected a..b)");
  }
  if (b < a) throw UsageError("invalid seed range '" + s + "': end before start");
  if (b - a >= 100000) throw UsageError("seed range '" + s + "' is too large");
  std::vector<std::uint64_t> out;
  for (auto v = a; v <= b; ++v) out.push_back(v);
  return out;
}

struct SweepOptions {
  std::filesystem::path root;  // one seed-N directory per seed below it
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
  std::string label;
  std::ostream* log = nullptr;
};

struct SweepResult {
  std::vector<RunManifest> runs;  // in seed order
  MetricReport report;
};

/// Trains every seed as an independent run. Up to `jobs` runs execute
/// concurrently; each has its own model, optimizer and RNG streams, so the
/// results do not depend on `jobs`. Writes report.txt and report.csv under
/// the root. The first failure (in seed order) is rethrown after all
/// started runs finish.
template <typename T = float>
SweepResult run_seeds(const ExperimentConfig& cfg, const Datasets& data, const SweepOptions& opt) {
  if (opt.seeds.empty()) throw UsageError("run_seeds: no seeds");
  std::filesystem::create_directories(opt.root);
  const std::size_t n = opt.seeds.size();
  std::vector<std::optional<RunManifest>> runs(n);
  std::vector<std::exception_ptr> errors(n);
  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      if (failed) return;
      try {
        RunOptions ro;
        ro.dir = opt.root / ("seed-" + std::to_string(opt.seeds[i]));
        ro.seed = opt.seeds[i];
        ro.label = (opt.label.empty() ? std::string() : opt.label + "/") + "seed-" + std::to_string(opt.seeds[i]);
        ro.log = opt.log;
        ro.log_mutex = &log_mutex;
        runs[i] = train_run<T>(cfg, data, ro);
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opt.jobs, n));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  SweepResult r;
  std::vector<SeedMetrics> per_seed;
  for (auto& m : runs) {
    per_seed.push_back(m->final_metrics());
    r.runs.push_back(std::move(*m));
  }
  r.report = aggregate_seeds(std::move(per_seed), opt.label.empty() ? cfg.variant : opt.label);
  detail::write_text(opt.root / "report.txt", format_report(r.report));
  detail::write_text(opt.root / "report.csv", report_csv({r.report}));
  return r;
}

/// Outcome of the multi-seed comparison of full SLASH against plain Slot
/// Attention: higher mean ARI and mIoU, strictly lower ARI spread.
struct StabilityVerdict {
  MetricReport slash;
  MetricReport baseline;
  bool higher_ari = false;
  bool higher_miou = false;
  bool lower_ari_std = false;

  bool passed() const { return higher_ari && higher_miou && lower_ari_std; }
};

inline StabilityVerdict compare_stability(MetricReport slash_report, MetricReport baseline) {
  StabilityVerdict v;
  v.higher_ari = slash_report.ari.mean > baseline.ari.mean;
  v.higher_miou = slash_report.miou.mean > baseline.miou.mean;
  v.lower_ari_std = slash_report.ari.std < baseline.ari.std;
  v.slash = std::move(slash_report);
  v.baseline = std::move(baseline);
  return v;
}

inline std::string format_verdict(const StabilityVerdict& v) {
  using text::format_double;
  return "stability slash_ari_mean=" + format_double(v.slash.ari.mean) +
         " sa_ari_mean=" + format_double(v.baseline.ari.mean) +
         " slash_miou_mean=" + format_double(v.slash.miou.mean) +
         " sa_miou_mean=" + format_double(v.baseline.miou.mean) +
         " slash_ari_std=" + format_double(v.slash.ari.std) + " sa_ari_std=" + format_double(v.baseline.ari.std) +
         " higher_ari=" + (v.higher_ari ? "1" : "0") + " higher_miou=" + (v.higher_miou ? "1" : "0") +
         " lower_ari_std=" + (v.lower_ari_std ? "1" : "0") + " passed=" + (v.passed() ? "1" : "0") + "\n";
}

/// Trains the `slash` and `sa` variants of `base` on the same data and
/// seeds and compares them. Writes <root>/slash, <root>/sa, report.csv and
/// verdict.txt.
template <typename T = float>
StabilityVerdict stability_experiment(ExperimentConfig base, const std::vector<std::uint64_t>& seeds,
                                      const std::filesystem::path& root, std::size_t jobs,
                                      std::ostream* log = nullptr) {
  auto full = base, plain = base;
  apply_variant(full, "slash");
  apply_variant(plain, "sa");
  const auto data = prepare_datasets(full);
  auto a = run_seeds<T>(full, data, SweepOptions{root / "slash", seeds, jobs, "slash", log});
  auto b = run_seeds<T>(plain, data, SweepOptions{root / "sa", seeds, jobs, "sa", log});
  auto v = compare_stability(a.report, b.report);
  detail::write_text(root / "report.csv", report_csv({v.slash, v.baseline}));
  detail::write_text(root / "verdict.txt", format_verdict(v));
  return v;
}

}  // namespace slash
