// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "slash/checkpoint.hpp"
#include "slash/config.hpp"
#include "slash/dataset_io.hpp"
#include "slash/training.hpp"

// Run directory layout:
//
//   manifest.txt              key=value records, then the resolved config
//   metrics.csv               step,lr,loss,recon,point,val_ari,val_miou,val_fg_ari
//   checkpoints/step-N        binary checkpoints
//   abort.txt                 only after a numeric abort
//
// Progress lines on the log stream are `key=value` records starting with
// `event=`.

namespace slash {

inline constexpr const char* kSoftwareVersion = "slash 0.1.0";
inline constexpr int kRunFormatVersion = 1;

struct Datasets {
  Dataset train;
  Dataset val;
};

/// Seed of the generated validation set; disjoint stream from training.
inline std::uint64_t validation_seed(std::uint64_t data_seed) { return mix_seed(data_seed, 0x76616c69ULL); }

inline void check_dataset_extent(const Dataset& d, const ModelConfig& m, const std::string& what) {
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& s = d.samples[i];
    if (s.height != m.height || s.width != m.width) {
      throw DataError(what + " sample " + std::to_string(i) + " is " + std::to_string(s.height) + "x" +
                      std::to_string(s.width) + ", model expects " + std::to_string(m.height) + "x" +
                      std::to_string(m.width));
    }
  }
}

/// Loads or generates both splits. The configured annotation policy is
/// always (re)applied to the training split; validation carries no
/// annotations.
inline Datasets prepare_datasets(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& m = cfg.model;
  Datasets d;
  d.train = cfg.data.train_dir.empty()
                ? generate_dataset(cfg.data.seed, cfg.data.train_size, cfg.data.difficulty, m.height, m.width)
                : load_dataset(cfg.data.train_dir);
  if (d.train.samples.empty()) throw DataError("training set is empty");
  check_dataset_extent(d.train, m, "training");
  apply_annotation_policy(d.train, cfg.annotation);
  if (!cfg.data.val_dir.empty()) {
    d.val = load_dataset(cfg.data.val_dir);
  } else if (cfg.data.val_size > 0) {
    d.val = generate_dataset(validation_seed(cfg.data.seed), cfg.data.val_size, cfg.data.difficulty, m.height,
                             m.width);
  }
  check_dataset_extent(d.val, m, "validation");
  for (auto& s : d.val.samples) {
    s.annotated = false;
    s.annotated_objects.clear();
  }
  return d;
}

struct MetricsRow {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double recon = 0.0;
  double point = 0.0;
  std::optional<SeedMetrics> val;
};

inline std::string metrics_csv_header() { return "step,lr,loss,recon,point,val_ari,val_miou,val_fg_ari\n"; }

inline std::string format_metrics_row(const MetricsRow& r) {
  using text::format_double;
  std::string s = std::to_string(r.step) + "," + format_double(r.lr) + "," + format_double(r.loss) + "," +
                  format_double(r.recon) + "," + format_double(r.point);
  if (r.val) {
    s += "," + format_double(r.val->ari) + "," + format_double(r.val->miou) + "," + format_double(r.val->fg_ari);
  } else {
    s += ",,,";
  }
  return s + "\n";
}

inline std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing metrics file " + path.string());
  std::string line;
  std::getline(f, line);
  if (line + "\n" != metrics_csv_header()) throw DataError(path.string() + ": unexpected header");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto c = text::split(line, ',');
    if (c.size() != 8) throw DataError(where + ": expected 8 columns");
    MetricsRow r;
    r.step = text::parse_uint(c[0], where);
    r.lr = text::parse_double(c[1], where);
    r.loss = text::parse_double(c[2], where);
    r.recon = text::parse_double(c[3], where);
    r.point = text::parse_double(c[4], where);
    if (!c[5].empty()) {
      SeedMetrics m;
      m.ari = text::parse_double(c[5], where);
      m.miou = text::parse_double(c[6], where);
      m.fg_ari = text::parse_double(c[7], where);
      r.val = m;
    }
    rows.push_back(r);
  }
  return rows;
}

struct EvalRecord {
  std::size_t step = 0;
  SeedMetrics metrics;
};

struct RunManifest {
  std::string label;
  std::string status = "complete";  // complete | aborted
  std::uint64_t config_hash = 0;
  std::uint64_t dataset_seed = 0;
  std::uint64_t model_seed = 0;
  std::size_t steps_completed = 0;
  std::string resumed_from;
  std::vector<EvalRecord> trajectory;
  std::vector<std::string> checkpoints;  // relative to the run directory
  TrainCounters counters;
  std::size_t train_images = 0;
  std::size_t annotated_images = 0;
  std::string config_text;

  /// Metrics of the last evaluation.
  const SeedMetrics& final_metrics() const {
    if (trajectory.empty()) throw UsageError("run has no evaluation");
    return trajectory.back().metrics;
  }
};

inline std::string format_run_manifest(const RunManifest& m) {
  using text::format_double;
  std::ostringstream os;
  os << "format=slash-run\n";
  os << "version=" << kRunFormatVersion << "\n";
  os << "software=" << kSoftwareVersion << "\n";
  os << "label=" << m.label << "\n";
  os << "status=" << m.status << "\n";
  os << "config_hash=" << hex64(m.config_hash) << "\n";
  os << "dataset_seed=" << m.dataset_seed << "\n";
  os << "model_seed=" << m.model_seed << "\n";
  os << "steps_completed=" << m.steps_completed << "\n";
  os << "resumed_from=" << m.resumed_from << "\n";
  os << "train_images=" << m.train_images << "\n";
  os << "annotated_images=" << m.annotated_images << "\n";
  os << "samples_seen=" << m.counters.samples_seen << "\n";
  os << "annotated_samples_seen=" << m.counters.annotated_samples_seen << "\n";
  os << "gt_images_consumed=" << m.counters.distinct_gt_images() << "\n";
  os << "gt_points_consumed=" << m.counters.gt_points_consumed << "\n";
  os << "point_loss_skips=" << m.counters.point_loss_skips << "\n";
  for (const auto& e : m.trajectory) {
    os << "eval step=" << e.step << " ari=" << format_double(e.metrics.ari) << " miou="
       << format_double(e.metrics.miou) << " fg_ari=" << format_double(e.metrics.fg_ari)
       << " samples=" << e.metrics.samples << " fg_ari_skipped=" << e.metrics.fg_ari_skipped << "\n";
  }
  for (const auto& c : m.checkpoints) os << "checkpoint=" << c << "\n";
  os << "\n" << m.config_text;
  return os.str();
}

/// Reads the key=value header of a run manifest. Values are returned as
/// text; `eval` and `checkpoint` keys may repeat.
inline std::vector<std::pair<std::string, std::string>> read_run_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing run manifest " + path.string());
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  while (std::getline(f, line) && !line.empty()) {
    if (line.rfind("eval ", 0) == 0) {
      kv.emplace_back("eval", line.substr(5));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path.string() + ": malformed line '" + line + "'");
    kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  if (kv.empty() || kv[0] != std::pair<std::string, std::string>{"format", "slash-run"}) {
    throw DataError(path.string() + ": not a run manifest");
  }
  return kv;
}

struct RunOptions {
  std::filesystem::path dir;
  std::uint64_t seed = 0;       // model seed; training and eval streams derive from it
  std::string label;
  std::filesystem::path resume;  // checkpoint to continue from
  std::ostream* log = nullptr;   // progress records; may be shared
  std::mutex* log_mutex = nullptr;
};

/// Stream seeds of one run.
inline std::uint64_t training_stream_seed(std::uint64_t seed) { return mix_seed(seed, 0x747261696eULL); }
inline std::uint64_t eval_stream_seed(std::uint64_t seed) { return mix_seed(seed, 0x6576616cULL); }

namespace detail {

class RunLog {
 public:
  RunLog(const RunOptions& o) : o_(o) {}
  void line(const std::string& body) const {
    if (!o_.log) return;
    std::string s = "run=" + (o_.label.empty() ? std::string("-") : o_.label) + " " + body + "\n";
    if (o_.log_mutex) {
      std::lock_guard<std::mutex> g(*o_.log_mutex);
      *o_.log << s << std::flush;
    } else {
      *o_.log << s << std::flush;
    }
  }

 private:
  const RunOptions& o_;
};

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot write " + p.string());
  f << s;
  f.flush();
  if (!f) throw DataError("failed writing " + p.string());
}

/// Configs are resume-compatible when they differ at most in the schedule.
inline void check_resume_compatible(const ExperimentConfig& stored, const ExperimentConfig& now,
                                    const std::string& where) {
  auto a = stored, b = now;
  a.schedule = b.schedule = ScheduleConfig{};
  const auto ta = format_config(a), tb = format_config(b);
  if (ta == tb) return;
  std::istringstream sa(ta), sb(tb);
  std::string la, lb;
  while (std::getline(sa, la) && std::getline(sb, lb)) {
    if (la != lb) throw VersionError(where + ": checkpoint config '" + la + "' differs from run config '" + lb + "'");
  }
  throw VersionError(where + ": checkpoint config differs from run config");
}

}  // namespace detail

/// Mean training loss at initialization over the first batch of training
/// samples, without gradients and on its own noise stream.
template <typename T>
MetricsRow initial_loss_row(const SlashModel<T>& model, const Dataset& train, const ExperimentConfig& cfg,
                            std::uint64_t seed) {
  MetricsRow r;
  const std::size_t n = std::min(cfg.schedule.batch_size, train.samples.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = train.samples[i];
    std::mt19937_64 rng(mix_seed(mix_seed(seed, 0x696e6974ULL), i));
    std::vector<Point2> pts;
    if (s.annotated) pts = s.annotated_points();
    const std::vector<Point2>* gt = pts.empty() ? nullptr : &pts;
    Tape<T> tape(false);
    const auto image = s.image<T>();
    auto out = model.forward(tape, image, model.sample_noise(rng), Mode::train, gt);
    auto terms = total_loss(tape, image, out, gt, cfg.loss);
    r.loss += static_cast<double>(terms.total.value().item());
    r.recon += static_cast<double>(terms.recon.value().item());
    r.point += static_cast<double>(terms.point.value().item());
  }
  r.loss /= static_cast<double>(n);
  r.recon /= static_cast<double>(n);
  r.point /= static_cast<double>(n);
  return r;
}

/// Trains one seed to the configured step budget. Deterministic given the
/// config, datasets and seed; a run resumed from a checkpoint at step s is
/// bit-identical to an uninterrupted one.
template <typename T = float>
RunManifest train_run(const ExperimentConfig& cfg, const Datasets& data, const RunOptions& opt) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (opt.dir.empty()) throw UsageError("train_run: run directory not set");
  if (data.val.samples.empty()) throw DataError("train_run: validation set is empty");
  detail::RunLog log(opt);
  fs::create_directories(opt.dir / "checkpoints");

  RunManifest man;
  man.label = opt.label;
  man.config_hash = config_hash(cfg);
  man.dataset_seed = cfg.data.seed;
  man.model_seed = opt.seed;
  man.config_text = format_config(cfg);
  man.train_images = data.train.samples.size();
  man.annotated_images = data.train.annotated_count();

  SlashModel<T> model(cfg.model, opt.seed);
  Adam<T> adam(cfg.optimizer, model.parameters());
  Sampler sampler(training_stream_seed(opt.seed), data.train.samples.size());
  TrainCounters counters;
  counters.gt_images.assign(data.train.samples.size(), 0);
  std::vector<MetricsRow> rows;
  const auto eval_seed = eval_stream_seed(opt.seed);
  auto run_eval = [&](std::size_t step) {
    auto r = evaluate(model, data.val, cfg.schedule.eval_samples, eval_seed);
    r.metrics.seed = opt.seed;
    man.trajectory.push_back({step, r.metrics});
    log.line("event=eval step=" + std::to_string(step) + " ari=" + text::format_double(r.metrics.ari) +
             " miou=" + text::format_double(r.metrics.miou) + " fg_ari=" + text::format_double(r.metrics.fg_ari));
    return r.metrics;
  };

  std::size_t step = 0;
  if (!opt.resume.empty()) {
    const auto ck = load_checkpoint<T>(opt.resume);
    detail::check_resume_compatible(ck.config, cfg, opt.resume.string());
    if (ck.model_seed != opt.seed) {
      throw VersionError(opt.resume.string() + ": checkpoint seed " + std::to_string(ck.model_seed) +
                         " differs from run seed " + std::to_string(opt.seed));
    }
    if (ck.state.sampler.order.size() != data.train.samples.size()) {
      throw VersionError(opt.resume.string() + ": checkpoint was trained on " +
                         std::to_string(ck.state.sampler.order.size()) + " samples, dataset has " +
                         std::to_string(data.train.samples.size()));
    }
    restore_parameters(model, ck);
    adam.state() = ck.state.adam;
    sampler = ck.state.sampler;
    counters = ck.state.counters;
    step = adam.state().step;
    if (step > cfg.schedule.steps) {
      throw UsageError("resume: checkpoint is at step " + std::to_string(step) + ", beyond the budget of " +
                       std::to_string(cfg.schedule.steps));
    }
    // Trajectory up to the checkpoint comes from the run it was written by.
    const auto src = opt.resume.parent_path().parent_path();
    for (const auto& r : read_metrics_csv(src / "metrics.csv")) {
      if (r.step > step) break;
      rows.push_back(r);
      if (r.val) man.trajectory.push_back({r.step, *r.val});
    }
    if (rows.empty()) throw DataError((src / "metrics.csv").string() + ": no records before the checkpoint");
    for (auto& e : man.trajectory) e.metrics.seed = opt.seed;
    if (fs::exists(src / "manifest.txt")) {
      for (const auto& [k, v] : read_run_manifest(src / "manifest.txt")) {
        if (k != "checkpoint") continue;
        const auto n = text::parse_uint(fs::path(v).filename().string().substr(5), "checkpoint step");
        if (n <= step) man.checkpoints.push_back(v);
      }
      if (src != opt.dir) {
        for (const auto& c : man.checkpoints)
          if (fs::exists(src / c) && !fs::exists(opt.dir / c)) fs::copy_file(src / c, opt.dir / c);
      }
    }
    man.resumed_from = opt.resume.string();
    log.line("event=resume step=" + std::to_string(step) + " from=" + opt.resume.string());
  } else {
    auto row = initial_loss_row(model, data.train, cfg, opt.seed);
    row.step = 0;
    row.val = run_eval(0);
    rows.push_back(row);
  }

  const auto write_outputs = [&] {
    std::string csv = metrics_csv_header();
    for (const auto& r : rows) csv += format_metrics_row(r);
    detail::write_text(opt.dir / "metrics.csv", csv);
    man.steps_completed = step;
    man.counters = counters;
    detail::write_text(opt.dir / "manifest.txt", format_run_manifest(man));
  };
  const auto save = [&] {
    const std::string rel = "checkpoints/step-" + std::to_string(step);
    save_checkpoint(opt.dir / rel, cfg, model, TrainingState<T>{adam.state(), sampler, counters});
    if (std::find(man.checkpoints.begin(), man.checkpoints.end(), rel) == man.checkpoints.end())
      man.checkpoints.push_back(rel);
    log.line("event=checkpoint step=" + std::to_string(step) + " path=" + rel);
  };

  const auto& sc = cfg.schedule;
  std::vector<std::size_t> batch(sc.batch_size);
  try {
    while (step < sc.steps) {
      for (auto& b : batch) b = sampler.next();
      const auto s = train_step(model, adam, data.train, batch, cfg.loss, sampler.rng, counters);
      step = s.step;
      const bool last = step == sc.steps;
      const bool do_eval = last || (sc.eval_every > 0 && step % sc.eval_every == 0);
      if (do_eval || step % sc.log_every == 0) {
        MetricsRow row{step, s.lr, s.loss, s.recon, s.point, std::nullopt};
        log.line("event=step step=" + std::to_string(step) + " lr=" + text::format_double(s.lr) +
                 " loss=" + text::format_double(s.loss) + " recon=" + text::format_double(s.recon) +
                 " point=" + text::format_double(s.point) + " grad_norm=" + text::format_double(s.grad_norm) +
                 " param_norm=" + text::format_double(s.param_norm));
        if (do_eval) row.val = run_eval(step);
        rows.push_back(row);
      }
      if (last || (sc.checkpoint_every > 0 && step % sc.checkpoint_every == 0)) save();
    }
  } catch (const NumericError& e) {
    man.status = "aborted";
    std::ostringstream dump;
    dump << e.what() << "\n";
    const auto& store = model.parameters();
    for (std::size_t i = 0; i < store.size(); ++i) {
      double n2 = 0.0, g2 = 0.0;
      for (T v : store[i].value.vec()) n2 += static_cast<double>(v) * static_cast<double>(v);
      for (T v : store[i].grad.vec()) g2 += static_cast<double>(v) * static_cast<double>(v);
      dump << "param=" << store[i].name << " norm=" << text::format_double(std::sqrt(n2))
           << " grad_norm=" << text::format_double(std::sqrt(g2)) << "\n";
    }
    detail::write_text(opt.dir / "abort.txt", dump.str());
    write_outputs();
    log.line("event=abort step=" + std::to_string(step + 1) + " reason=non-finite");
    throw;
  }
  if (sc.steps == 0 || man.checkpoints.empty() || step == 0) save();
  write_outputs();
  const auto& f = man.final_metrics();
  log.line("event=done step=" + std::to_string(step) + " ari=" + text::format_double(f.ari) +
           " miou=" + text::format_double(f.miou) + " fg_ari=" + text::format_double(f.fg_ari));
  return man;
}

}  // namespace slash
