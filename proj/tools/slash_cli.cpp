// SPDX-License-Identifier: Apache-2.0
// slash: data generation, training, evaluation and visualization.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric abort (or a failed gradient check).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "slash/slash.hpp"

namespace fs = std::filesystem;
using namespace slash;

namespace {

constexpr const char* kOutputRootEnv = "SLASH_OUTPUT_ROOT";

/// Relative output paths live under $SLASH_OUTPUT_ROOT when it is set.
fs::path resolve_output(const std::string& out, const std::string& fallback) {
  const char* root = std::getenv(kOutputRootEnv);
  if (out.empty()) {
    if (!root || !*root) throw UsageError("--out is required when " + std::string(kOutputRootEnv) + " is not set");
    return fs::path(root) / fallback;
  }
  fs::path p(out);
  if (p.is_relative() && root && *root) return fs::path(root) / p;
  return p;
}

struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;

  void add_to(CLI::App* app) {
    app->add_option("--config", file, "experiment config file");
    app->add_option("--set", overrides, "override, section.key=value (repeatable)");
  }

  /// A variant given on the command line replaces the file's variant; keys
  /// set explicitly in the file or with --set still win over its preset.
  ExperimentConfig resolve(const std::string& variant = {}) const {
    std::string src;
    if (!file.empty()) {
      std::ifstream f(file);
      if (!f) throw ConfigError("cannot read config file '" + file + "'");
      std::ostringstream os;
      os << f.rdbuf();
      src = os.str();
    }
    if (!variant.empty()) src += "\n[experiment]\nvariant = " + variant + "\n";
    auto c = parse_config(src, {}, file.empty() ? "config" : file);
    apply_overrides(c, overrides);
    c.validate();
    return c;
  }
};

Dataset dataset_for(const std::string& dir, const ExperimentConfig& cfg) {
  if (!dir.empty()) return load_dataset(dir);
  auto c = cfg;
  c.data.val_dir.clear();
  return prepare_datasets(c).val;
}

int cmd_generate(std::uint64_t seed, std::size_t size, const std::string& difficulty, std::size_t height,
                 std::size_t width, const AnnotationPolicy& policy, const std::string& out) {
  if (size == 0) throw UsageError("--size must be >= 1");
  if (height < 8 || width < 8) throw UsageError("--height and --width must be >= 8");
  const auto dir = resolve_output(out, "data-" + std::to_string(seed));
  auto d = generate_dataset(seed, size, parse_difficulty(difficulty), height, width);
  apply_annotation_policy(d, policy);
  save_dataset(d, dir);
  std::cout << "event=dataset path=" << dir.string() << " samples=" << d.samples.size()
            << " annotated=" << d.annotated_count() << " kind=" << to_string(d.difficulty) << "\n";
  return 0;
}

int cmd_train(const ConfigArgs& ca, std::vector<std::string> variants, const std::string& seeds_arg,
              const std::string& out, std::size_t jobs, const std::string& resume) {
  const auto base = ca.resolve();
  const auto seeds = parse_seed_range(seeds_arg);
  if (variants.empty()) variants.push_back(base.variant);
  if (!resume.empty() && (seeds.size() != 1 || variants.size() != 1)) {
    throw UsageError("--resume needs exactly one seed and one variant");
  }
  const auto root = resolve_output(out, "train-" + hex64(config_hash(base)).substr(0, 8));
  fs::create_directories(root);
  const auto data = prepare_datasets(base);
  std::vector<MetricReport> reports;
  std::string text;
  for (const auto& v : variants) {
    const auto cfg = ca.resolve(v);
    detail::write_text(root / (v + ".config.txt"), format_config(cfg));
    if (!resume.empty()) {
      RunOptions ro;
      ro.dir = root / v / ("seed-" + std::to_string(seeds[0]));
      ro.seed = seeds[0];
      ro.label = v + "/seed-" + std::to_string(seeds[0]);
      ro.resume = resume;
      ro.log = &std::cout;
      const auto man = train_run<float>(cfg, data, ro);
      reports.push_back(aggregate_seeds({man.final_metrics()}, v));
    } else {
      reports.push_back(run_seeds<float>(cfg, data, SweepOptions{root / v, seeds, jobs, v, &std::cout}).report);
    }
    text += format_report(reports.back());
  }
  detail::write_text(root / "report.txt", text);
  detail::write_text(root / "report.csv", report_csv(reports));
  std::cout << text << "event=report path=" << (root / "report.csv").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset_dir, std::size_t samples,
             std::optional<std::uint64_t> noise_seed, const std::string& masks, const std::string& out) {
  const auto ck = load_checkpoint<float>(checkpoint);
  const auto model = model_from_checkpoint(ck);
  const auto data = dataset_for(dataset_dir, ck.config);
  const MaskSource src = masks == "attention" ? MaskSource::attention : MaskSource::decoder;
  auto r = evaluate(*model, data, samples, noise_seed.value_or(eval_stream_seed(ck.model_seed)), src);
  r.metrics.seed = ck.model_seed;
  const auto report = format_report(aggregate_seeds({r.metrics}, "eval")) +
                      "gt_points_consumed=" + std::to_string(r.gt_points_consumed) + "\n";
  if (!out.empty()) {
    const auto p = resolve_output(out, "eval.txt");
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    detail::write_text(p, report);
  }
  std::cout << report;
  return 0;
}

int cmd_viz(const std::string& checkpoint, const std::string& dataset_dir, const std::vector<std::size_t>& ids,
            const std::string& out, std::size_t scale) {
  const auto ck = load_checkpoint<float>(checkpoint);
  const auto model = model_from_checkpoint(ck);
  const auto data = dataset_for(dataset_dir, ck.config);
  const auto dir = resolve_output(out, "viz");
  fs::create_directories(dir);
  for (auto id : ids) {
    if (id >= data.samples.size()) {
      throw UsageError("sample id " + std::to_string(id) + " is out of range (dataset has " +
                       std::to_string(data.samples.size()) + " samples)");
    }
    const auto panels = collect_viz(*model, data.samples[id].image<float>(), mix_seed(ck.model_seed, id));
    const std::string stem = "sample-" + text::zero_pad(id, 5);
    write_png((dir / (stem + ".png")).string(), render_viz(panels, scale));
    std::string maps;
    for (std::size_t k = 0; k < panels.before.size(); ++k) {
      for (int stage = 0; stage < 2; ++stage) {
        maps += "slot=" + std::to_string(k) + (stage == 0 ? " stage=before" : " stage=after");
        for (float v : (stage == 0 ? panels.before[k] : panels.after[k]).vec()) maps += " " + text::format_double(v);
        maps += "\n";
      }
    }
    for (std::size_t t = 0; t < panels.points.size(); ++t) {
      maps += "points iteration=" + std::to_string(t + 1);
      for (const auto& p : panels.points[t]) maps += " " + text::format_double(p[0]) + "," + text::format_double(p[1]);
      maps += "\n";
    }
    detail::write_text(dir / (stem + ".maps.txt"), maps);
    std::cout << "event=viz sample=" << id << " path=" << (dir / (stem + ".png")).string() << "\n";
  }
  return 0;
}

int cmd_gradcheck(std::vector<std::string> variants, std::uint64_t seed, double tol) {
  if (variants.empty()) variants = variant_names();
  bool ok = true;
  for (const auto& v : variants) {
    ExperimentConfig c;
    auto& m = c.model;
    m.height = m.width = 8;
    m.num_slots = 3;
    m.iterations = 2;
    m.slot_dim = m.enc_dim = m.attn_dim = m.mlp_hidden = 16;
    m.cnn_channels = 4;
    m.cnn_kernel = 3;
    m.kernel.size = 3;
    apply_variant(c, v);
    const auto r = end_to_end_gradient_check(c, seed);
    const bool pass = r.passed(tol);
    ok = ok && pass;
    std::cout << "gradcheck variant=" << v << " checked=" << r.checked << " max_rel_error="
              << text::format_double(r.max_rel_error) << " worst=" << r.worst_param << "[" << r.worst_index
              << "] refined=" << r.refined << " status=" << (pass ? "pass" : "fail") << "\n";
  }
  return ok ? 0 : 3;
}

int cmd_stability(const ConfigArgs& ca, const std::string& seeds_arg, const std::string& out, std::size_t jobs) {
  const auto cfg = ca.resolve();
  const auto root = resolve_output(out, "stability");
  fs::create_directories(root);
  const auto v = stability_experiment<float>(cfg, parse_seed_range(seeds_arg), root, jobs, &std::cout);
  std::cout << format_report(v.slash) << format_report(v.baseline) << format_verdict(v);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SLASH object-centric learning laboratory"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kSoftwareVersion));

  std::string out;

  auto* gen = app.add_subcommand("generate-data", "render a synthetic multi-object dataset");
  std::uint64_t gen_seed = 0;
  std::size_t gen_size = 0, gen_h = 64, gen_w = 64;
  std::string gen_difficulty = "stripes";
  AnnotationPolicy policy;
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--size", gen_size, "number of samples")->required();
  gen->add_option("--difficulty", gen_difficulty, "flat|stripes|noise|texture");
  gen->add_option("--height", gen_h, "image height");
  gen->add_option("--width", gen_w, "image width");
  gen->add_option("--image-fraction", policy.image_fraction, "fraction of annotated images");
  gen->add_option("--object-fraction", policy.object_fraction, "fraction of annotated objects per image");
  gen->add_option("--annotation-seed", policy.seed, "annotation sampling seed");
  gen->add_option("--out", out, "output directory");

  ConfigArgs train_cfg;
  std::vector<std::string> train_variants;
  std::string seeds = "0..0", resume;
  std::size_t jobs = 1;
  auto* train = app.add_subcommand("train", "train one or more seeds and aggregate their metrics");
  train_cfg.add_to(train);
  train->add_option("--variant", train_variants, "model variant (repeatable)");
  train->add_option("--seeds", seeds, "seed range a..b");
  train->add_option("--out", out, "output directory");
  train->add_option("--jobs", jobs, "concurrent seed runs");
  train->add_option("--resume", resume, "continue from a checkpoint");

  std::string checkpoint, dataset_dir, masks = "decoder";
  std::size_t samples = 0;
  std::optional<std::uint64_t> noise_seed;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--dataset", dataset_dir, "dataset directory (default: the validation split of the config)");
  eval->add_option("--samples", samples, "number of samples (0 = all)");
  eval->add_option("--noise-seed", noise_seed, "slot noise seed");
  eval->add_option("--masks", masks, "decoder|attention")->check(CLI::IsMember({"decoder", "attention"}));
  eval->add_option("--out", out, "also write the report to this file");

  std::vector<std::size_t> ids{0};
  std::size_t scale = 4;
  auto* viz = app.add_subcommand("viz", "export attention, point and segmentation panels");
  viz->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  viz->add_option("--dataset", dataset_dir, "dataset directory (default: the validation split of the config)");
  viz->add_option("--sample-ids", ids, "comma-separated sample indices")->delimiter(',');
  viz->add_option("--out", out, "output directory");
  viz->add_option("--scale", scale, "pixel upscaling")->check(CLI::Range(1, 32));

  std::vector<std::string> gc_variants;
  std::uint64_t gc_seed = 21;
  double tol = 1e-3;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the total loss at H=W=8, K=3, T=2, D=16");
  gc->add_option("--variant", gc_variants, "variant (repeatable; default all)");
  gc->add_option("--seed", gc_seed, "model seed");
  gc->add_option("--tol", tol, "maximum relative error");

  ConfigArgs stab_cfg;
  std::string stab_seeds = "0..9";
  auto* stab = app.add_subcommand("stability", "multi-seed comparison of slash against plain slot attention");
  stab_cfg.add_to(stab);
  stab->add_option("--seeds", stab_seeds, "seed range a..b");
  stab->add_option("--out", out, "output directory");
  stab->add_option("--jobs", jobs, "concurrent seed runs");

  ConfigArgs show_cfg;
  auto* show = app.add_subcommand("config", "print the fully resolved config");
  show_cfg.add_to(show);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return cmd_generate(gen_seed, gen_size, gen_difficulty, gen_h, gen_w, policy, out);
    if (*train) return cmd_train(train_cfg, train_variants, seeds, out, jobs, resume);
    if (*eval) return cmd_eval(checkpoint, dataset_dir, samples, noise_seed, masks, out);
    if (*viz) return cmd_viz(checkpoint, dataset_dir, ids, out, scale);
    if (*gc) return cmd_gradcheck(gc_variants, gc_seed, tol);
    if (*stab) return cmd_stability(stab_cfg, stab_seeds, out, jobs);
    if (*show) {
      std::cout << format_config(show_cfg.resolve());
      return 0;
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
