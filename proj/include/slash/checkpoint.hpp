// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "slash/config.hpp"
#include "slash/model.hpp"
#include "slash/training.hpp"

// Binary checkpoint (format version 1, host byte order):
//
//   "SLASHCKP" u32 version u32 scalar_bytes
//   str resolved_config  u64 model_seed
//   u64 n_params  { str name u32 constraint u64 rank u64 dims[rank] scalar data[] }
//   u64 adam_step { scalar m[] scalar v[] } per parameter
//   str sampler_rng  u64 n  u64 order[n]  u64 position
//   u64 samples_seen u64 annotated_seen u64 gt_points u64 point_skips
//   u64 n  u8 gt_images[n]
//
// str = u64 length + bytes. Parameter values are stored verbatim, so a
// round trip is bit-exact.

namespace slash {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct TrainingState {
  AdamState<T> adam;
  Sampler sampler;
  TrainCounters counters;
};

template <typename T>
struct Checkpoint {
  ExperimentConfig config;
  std::string config_text;
  std::uint64_t model_seed = 0;
  std::vector<std::pair<std::string, Tensor<T>>> params;
  TrainingState<T> state;
};

namespace detail {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& p) : f_(p, std::ios::binary) {
    if (!f_) throw DataError("cannot write checkpoint " + p.string());
  }
  template <typename V>
  void pod(const V& v) {
    f_.write(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  void u64(std::uint64_t v) { pod(v); }
  void str(const std::string& s) {
    u64(s.size());
    f_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void data(const Tensor<T>& t) {
    f_.write(reinterpret_cast<const char*>(t.vec().data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  }
  void finish(const std::filesystem::path& p) {
    f_.flush();
    if (!f_) throw DataError("failed writing checkpoint " + p.string());
  }

 private:
  std::ofstream f_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& p) : f_(p, std::ios::binary), where_(p.string()) {
    if (!f_) throw DataError("missing checkpoint " + where_);
  }
  template <typename V>
  V pod() {
    V v{};
    f_.read(reinterpret_cast<char*>(&v), sizeof(V));
    check();
    return v;
  }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::string str() {
    const auto n = u64();
    if (n > (1u << 30)) throw DataError(where_ + ": corrupt checkpoint (string length)");
    std::string s(n, '\0');
    f_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  template <typename T>
  void data(Tensor<T>& t) {
    f_.read(reinterpret_cast<char*>(t.vec().data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    check();
  }
  const std::string& where() const { return where_; }
  bool at_end() { return f_.peek() == std::char_traits<char>::eof(); }

 private:
  void check() {
    if (!f_) throw DataError(where_ + ": truncated checkpoint");
  }
  std::ifstream f_;
  std::string where_;
};

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config, const SlashModel<T>& model,
                     const TrainingState<T>& state) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  detail::Writer w(path);
  const char magic[8] = {'S', 'L', 'A', 'S', 'H', 'C', 'K', 'P'};
  for (char c : magic) w.pod(c);
  w.pod(kCheckpointVersion);
  w.pod(static_cast<std::uint32_t>(sizeof(T)));
  w.str(format_config(config));
  w.u64(model.seed());
  const auto& store = model.parameters();
  w.u64(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    w.str(p.name);
    w.pod(static_cast<std::uint32_t>(p.constraint));
    w.u64(p.value.rank());
    for (auto d : p.value.shape()) w.u64(d);
    w.data(p.value);
  }
  w.u64(state.adam.step);
  if (state.adam.m.size() != store.size() && !(state.adam.m.empty() && state.adam.step == 0)) {
    throw UsageError("save_checkpoint: optimizer state does not match the parameter store");
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Tensor<T> zero(store[i].value.shape());
    w.data(state.adam.m.empty() ? zero : state.adam.m[i]);
    w.data(state.adam.v.empty() ? zero : state.adam.v[i]);
  }
  w.str(state.sampler.rng_state());
  w.u64(state.sampler.order.size());
  for (auto o : state.sampler.order) w.u64(o);
  w.u64(state.sampler.position);
  const auto& c = state.counters;
  w.u64(c.samples_seen);
  w.u64(c.annotated_samples_seen);
  w.u64(c.gt_points_consumed);
  w.u64(c.point_loss_skips);
  w.u64(c.gt_images.size());
  for (auto b : c.gt_images) w.pod(b);
  w.finish(path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("missing checkpoint " + path.string());
  detail::Reader r(path);
  char magic[8];
  for (char& c : magic) c = r.pod<char>();
  if (std::memcmp(magic, "SLASHCKP", 8) != 0) throw DataError(r.where() + ": not a checkpoint file");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError(r.where() + ": checkpoint version " + std::to_string(version) + " is incompatible with " +
                       std::to_string(kCheckpointVersion));
  }
  const auto bytes = r.pod<std::uint32_t>();
  if (bytes != sizeof(T)) {
    throw VersionError(r.where() + ": checkpoint stores " + std::to_string(bytes * 8) + "-bit scalars, expected " +
                       std::to_string(sizeof(T) * 8));
  }
  Checkpoint<T> ck;
  ck.config_text = r.str();
  ck.config = parse_config(ck.config_text, {}, r.where());
  ck.model_seed = r.u64();
  const auto n = r.u64();
  if (n > 100000) throw DataError(r.where() + ": corrupt checkpoint (parameter count)");
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    r.pod<std::uint32_t>();
    const auto rank = r.u64();
    if (rank == 0 || rank > 8) throw DataError(r.where() + ": corrupt checkpoint (rank of " + name + ")");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    Tensor<T> t(shape);
    r.data(t);
    ck.params.emplace_back(std::move(name), std::move(t));
  }
  ck.state.adam.step = r.u64();
  for (const auto& [name, t] : ck.params) {
    ck.state.adam.m.emplace_back(t.shape());
    ck.state.adam.v.emplace_back(t.shape());
    r.data(ck.state.adam.m.back());
    r.data(ck.state.adam.v.back());
  }
  ck.state.sampler.set_rng_state(r.str());
  const auto order_n = r.u64();
  if (order_n > (1u << 28)) throw DataError(r.where() + ": corrupt checkpoint (sampler)");
  ck.state.sampler.order.resize(order_n);
  for (auto& o : ck.state.sampler.order) o = r.u64();
  ck.state.sampler.position = r.u64();
  auto& c = ck.state.counters;
  c.samples_seen = r.u64();
  c.annotated_samples_seen = r.u64();
  c.gt_points_consumed = r.u64();
  c.point_loss_skips = r.u64();
  const auto gi = r.u64();
  if (gi > (1u << 28)) throw DataError(r.where() + ": corrupt checkpoint (counters)");
  c.gt_images.resize(gi);
  for (auto& b : c.gt_images) b = r.pod<std::uint8_t>();
  if (!r.at_end()) throw DataError(r.where() + ": trailing bytes in checkpoint");
  return ck;
}

/// Copies checkpoint tensors into a model built from the same config.
/// Any difference in parameter names or shapes is a version error.
template <typename T>
void restore_parameters(SlashModel<T>& model, const Checkpoint<T>& ck) {
  auto& store = model.parameters();
  if (store.size() != ck.params.size()) {
    throw VersionError("checkpoint has " + std::to_string(ck.params.size()) + " parameters, model has " +
                       std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& [name, t] = ck.params[i];
    if (store[i].name != name || store[i].value.shape() != t.shape()) {
      throw VersionError("checkpoint parameter '" + name + "' " + shape_str(t.shape()) +
                         " does not match model parameter '" + store[i].name + "' " +
                         shape_str(store[i].value.shape()));
    }
    store[i].value = t;
  }
}

/// Builds the model described by a checkpoint and loads its parameters.
template <typename T>
std::unique_ptr<SlashModel<T>> model_from_checkpoint(const Checkpoint<T>& ck) {
  auto m = std::make_unique<SlashModel<T>>(ck.config.model, ck.model_seed);
  restore_parameters(*m, ck);
  return m;
}

}  // namespace slash
