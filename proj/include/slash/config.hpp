// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "slash/model.hpp"
#include "slash/scene.hpp"
#include "slash/text.hpp"

// Experiment configuration in a flat sectioned key=value format:
//
//   # comment
//   [model]
//   num_slots = 7
//
// Every key is addressable as section.key, which is also the override
// syntax accepted on the command line.

namespace slash {

enum class PointLossIterations { final, all };

inline std::string to_string(PointLossIterations p) { return p == PointLossIterations::final ? "final" : "all"; }

inline PointLossIterations parse_point_loss_iterations(const std::string& s) {
  if (s == "final") return PointLossIterations::final;
  if (s == "all") return PointLossIterations::all;
  throw ConfigError("unknown point_loss_iterations '" + s + "' (expected final|all)");
}

struct LossConfig {
  double recon_weight = 1.0;
  double point_weight = 0.1;
  PointLossIterations point_loss_iterations = PointLossIterations::final;

  void validate() const {
    if (!(recon_weight >= 0.0) || !(point_weight >= 0.0)) throw ConfigError("loss weights must be >= 0");
  }
};

struct OptimizerConfig {
  double base_lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 1000;
  double decay_half_life = 20000;

  void validate() const {
    if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("Adam eps must be > 0");
    if (!(decay_half_life > 0.0)) throw ConfigError("decay_half_life must be > 0");
  }
};

struct ScheduleConfig {
  std::size_t steps = 20000;
  std::size_t batch_size = 16;
  std::size_t eval_every = 1000;  // 0 = only at the start and the end
  std::size_t eval_samples = 200;
  std::size_t checkpoint_every = 5000;  // 0 = only at the end
  std::size_t log_every = 100;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
  }
};

struct DataConfig {
  std::uint64_t seed = 0;
  std::size_t train_size = 5000;
  std::size_t val_size = 1000;
  Difficulty difficulty = Difficulty::stripes;
  std::string train_dir;  // empty = generate in memory
  std::string val_dir;

  void validate() const {
    if (train_dir.empty() && train_size < 1) throw ConfigError("train_size must be >= 1");
  }
};

struct ExperimentConfig {
  std::string variant = "slash";
  ModelConfig model;
  LossConfig loss;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  DataConfig data;
  AnnotationPolicy annotation;

  void validate() const {
    model.validate();
    loss.validate();
    optimizer.validate();
    schedule.validate();
    data.validate();
    annotation.validate();
  }
};

/// Named model presets. Table-style ablations switch one module at a time
/// on top of plain Slot Attention.
inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"slash",   "sa",          "ws-sa",   "sa-ark",  "sa-ippe",
                                              "sa-tau2", "sa-gaussian", "sa-conv", "sa-wnconv"};
  return names;
}

inline void apply_variant(ExperimentConfig& c, const std::string& name) {
  auto& m = c.model;
  m.ws_init_enabled = false;
  m.kernel.tau = 1.0;
  if (name == "slash") {
    m.kernel.kind = KernelKind::wnconv;
    m.ippe_enabled = true;
  } else if (name == "sa") {
    m = ModelConfig::plain(m);
  } else if (name == "ws-sa") {
    m = ModelConfig::plain(m);
    m.ws_init_enabled = true;
  } else if (name == "sa-ark" || name == "sa-wnconv") {
    m.kernel.kind = KernelKind::wnconv;
    m.ippe_enabled = false;
  } else if (name == "sa-ippe") {
    m.kernel.kind = KernelKind::identity;
    m.ippe_enabled = true;
  } else if (name == "sa-tau2") {
    m.kernel.kind = KernelKind::temperature;
    m.kernel.tau = 2.0;
    m.ippe_enabled = false;
  } else if (name == "sa-gaussian") {
    m.kernel.kind = KernelKind::gaussian;
    m.ippe_enabled = false;
  } else if (name == "sa-conv") {
    m.kernel.kind = KernelKind::conv;
    m.ippe_enabled = false;
  } else {
    std::string all;
    for (const auto& n : variant_names()) all += (all.empty() ? "" : "|") + n;
    throw ConfigError("unknown variant '" + name + "' (expected " + all + ")");
  }
  c.variant = name;
}

namespace detail {

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true|false, got '" + s + "'");
}

inline std::uint64_t parse_count(const std::string& s, const std::string& key) {
  try {
    return text::parse_uint(s, key);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

inline double parse_real(const std::string& s, const std::string& key) {
  try {
    return text::parse_double(s, key);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename Member>
Field size_field(Member m, const std::string& key) {
  return {[m, key](ExperimentConfig& c, const std::string& v) { m(c) = static_cast<std::size_t>(parse_count(v, key)); },
          [m](const ExperimentConfig& c) { return std::to_string(m(c)); }};
}

template <typename Member>
Field u64_field(Member m, const std::string& key) {
  return {[m, key](ExperimentConfig& c, const std::string& v) { m(c) = parse_count(v, key); },
          [m](const ExperimentConfig& c) { return std::to_string(m(c)); }};
}

template <typename Member>
Field real_field(Member m, const std::string& key) {
  return {[m, key](ExperimentConfig& c, const std::string& v) { m(c) = parse_real(v, key); },
          [m](const ExperimentConfig& c) { return text::format_double(m(c)); }};
}

template <typename Member>
Field bool_field(Member m, const std::string& key) {
  return {[m, key](ExperimentConfig& c, const std::string& v) { m(c) = parse_bool(v, key); },
          [m](const ExperimentConfig& c) { return std::string(m(c) ? "true" : "false"); }};
}

template <typename Member>
Field string_field(Member m) {
  return {[m](ExperimentConfig& c, const std::string& v) { m(c) = v; },
          [m](const ExperimentConfig& c) { return m(c); }};
}

#define SLASH_REF(expr) [](auto& c) -> auto& { return c.expr; }

/// Ordered registry of every configurable key.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = [] {
    std::vector<std::pair<std::string, Field>> v;
    auto add = [&](const std::string& k, Field fld) { v.emplace_back(k, std::move(fld)); };
    add("experiment.variant", {[](ExperimentConfig& c, const std::string& s) { apply_variant(c, s); },
                               [](const ExperimentConfig& c) { return c.variant; }});
    add("model.height", size_field(SLASH_REF(model.height), "model.height"));
    add("model.width", size_field(SLASH_REF(model.width), "model.width"));
    add("model.num_slots", size_field(SLASH_REF(model.num_slots), "model.num_slots"));
    add("model.slot_dim", size_field(SLASH_REF(model.slot_dim), "model.slot_dim"));
    add("model.enc_dim", size_field(SLASH_REF(model.enc_dim), "model.enc_dim"));
    add("model.attn_dim", size_field(SLASH_REF(model.attn_dim), "model.attn_dim"));
    add("model.iterations", size_field(SLASH_REF(model.iterations), "model.iterations"));
    add("model.cnn_channels", size_field(SLASH_REF(model.cnn_channels), "model.cnn_channels"));
    add("model.cnn_kernel", size_field(SLASH_REF(model.cnn_kernel), "model.cnn_kernel"));
    add("model.mlp_hidden", size_field(SLASH_REF(model.mlp_hidden), "model.mlp_hidden"));
    add("model.ippe_hidden", size_field(SLASH_REF(model.ippe_hidden), "model.ippe_hidden"));
    add("model.ippe_enabled", bool_field(SLASH_REF(model.ippe_enabled), "model.ippe_enabled"));
    add("model.ippe_every_iteration", bool_field(SLASH_REF(model.ippe_every_iteration), "model.ippe_every_iteration"));
    add("model.ws_init_enabled", bool_field(SLASH_REF(model.ws_init_enabled), "model.ws_init_enabled"));
    add("kernel.kind", {[](ExperimentConfig& c, const std::string& s) { c.model.kernel.kind = parse_kernel_kind(s); },
                        [](const ExperimentConfig& c) { return to_string(c.model.kernel.kind); }});
    add("kernel.size", size_field(SLASH_REF(model.kernel.size), "kernel.size"));
    add("kernel.tau", real_field(SLASH_REF(model.kernel.tau), "kernel.tau"));
    add("kernel.gaussian_sigma", real_field(SLASH_REF(model.kernel.gaussian_sigma), "kernel.gaussian_sigma"));
    add("loss.recon_weight", real_field(SLASH_REF(loss.recon_weight), "loss.recon_weight"));
    add("loss.point_weight", real_field(SLASH_REF(loss.point_weight), "loss.point_weight"));
    add("loss.point_loss_iterations",
        {[](ExperimentConfig& c, const std::string& s) { c.loss.point_loss_iterations = parse_point_loss_iterations(s); },
         [](const ExperimentConfig& c) { return to_string(c.loss.point_loss_iterations); }});
    add("optimizer.base_lr", real_field(SLASH_REF(optimizer.base_lr), "optimizer.base_lr"));
    add("optimizer.beta1", real_field(SLASH_REF(optimizer.beta1), "optimizer.beta1"));
    add("optimizer.beta2", real_field(SLASH_REF(optimizer.beta2), "optimizer.beta2"));
    add("optimizer.eps", real_field(SLASH_REF(optimizer.eps), "optimizer.eps"));
    add("optimizer.warmup_steps", size_field(SLASH_REF(optimizer.warmup_steps), "optimizer.warmup_steps"));
    add("optimizer.decay_half_life", real_field(SLASH_REF(optimizer.decay_half_life), "optimizer.decay_half_life"));
    add("schedule.steps", size_field(SLASH_REF(schedule.steps), "schedule.steps"));
    add("schedule.batch_size", size_field(SLASH_REF(schedule.batch_size), "schedule.batch_size"));
    add("schedule.eval_every", size_field(SLASH_REF(schedule.eval_every), "schedule.eval_every"));
    add("schedule.eval_samples", size_field(SLASH_REF(schedule.eval_samples), "schedule.eval_samples"));
    add("schedule.checkpoint_every", size_field(SLASH_REF(schedule.checkpoint_every), "schedule.checkpoint_every"));
    add("schedule.log_every", size_field(SLASH_REF(schedule.log_every), "schedule.log_every"));
    add("data.seed", u64_field(SLASH_REF(data.seed), "data.seed"));
    add("data.train_size", size_field(SLASH_REF(data.train_size), "data.train_size"));
    add("data.val_size", size_field(SLASH_REF(data.val_size), "data.val_size"));
    add("data.difficulty", {[](ExperimentConfig& c, const std::string& s) { c.data.difficulty = parse_difficulty(s); },
                            [](const ExperimentConfig& c) { return to_string(c.data.difficulty); }});
    add("data.train_dir", string_field(SLASH_REF(data.train_dir)));
    add("data.val_dir", string_field(SLASH_REF(data.val_dir)));
    add("annotation.image_fraction", real_field(SLASH_REF(annotation.image_fraction), "annotation.image_fraction"));
    add("annotation.object_fraction", real_field(SLASH_REF(annotation.object_fraction), "annotation.object_fraction"));
    add("annotation.seed", u64_field(SLASH_REF(annotation.seed), "annotation.seed"));
    return v;
  }();
  return f;
}

#undef SLASH_REF

}  // namespace detail

/// Sets one `section.key`; unknown keys are rejected.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  for (const auto& [k, f] : detail::fields()) {
    if (k == key) {
      f.set(c, std::string(text::trim(value)));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies `section.key=value` overrides in order.
inline void apply_overrides(ExperimentConfig& c, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not section.key=value");
    set_config_value(c, std::string(text::trim(o.substr(0, eq))), o.substr(eq + 1));
  }
}

/// Parses the text format onto `base`. `variant` is applied before any
/// other key regardless of where it appears, so explicit keys win.
inline ExperimentConfig parse_config(const std::string& src, ExperimentConfig base = {},
                                     const std::string& origin = "config") {
  std::istringstream in(src);
  std::string line, section;
  std::vector<std::pair<std::string, std::string>> entries;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::string t(text::trim(line));
    if (t.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + ": malformed section header");
      section = std::string(text::trim(t.substr(1, t.size() - 2)));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of a [section]");
    const std::string key = section + "." + std::string(text::trim(t.substr(0, eq)));
    bool known = false;
    for (const auto& [k, f] : detail::fields()) known = known || k == key;
    if (!known) throw ConfigError(where + ": unknown config key '" + key + "'");
    entries.emplace_back(key, t.substr(eq + 1));
  }
  for (const auto& [k, v] : entries)
    if (k == "experiment.variant") set_config_value(base, k, v);
  for (const auto& [k, v] : entries)
    if (k != "experiment.variant") set_config_value(base, k, v);
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config(os.str(), std::move(base), path);
}

/// Fully resolved config in the same text format; parse_config(format_config(c)) == c.
inline std::string format_config(const ExperimentConfig& c) {
  std::string out, section;
  for (const auto& [k, f] : detail::fields()) {
    const auto dot = k.find('.');
    const std::string s = k.substr(0, dot);
    if (s != section) {
      out += (out.empty() ? "[" : "\n[") + s + "]\n";
      section = s;
    }
    out += k.substr(dot + 1) + " = " + f.get(c) + "\n";
  }
  return out;
}

/// FNV-1a of the resolved config text.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : format_config(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
  return s;
}

}  // namespace slash
