// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "slash/error.hpp"
#include "slash/tensor.hpp"

namespace slash {

/// Projection/parametrization attached to a parameter. `simplex_softmax`
/// marks raw weights whose effective value is softmax(raw), so the
/// constraint holds by construction and no projection step is needed.
enum class Constraint { none, simplex_softmax };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Constraint constraint = Constraint::none;

  Parameter(std::string n, Tensor<T> v, Constraint c = Constraint::none)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), constraint(c) {}

  void zero_grad() { grad.fill(T(0)); }
};

/// Named parameters in insertion order. Addresses are stable for the
/// lifetime of the store.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value,
                    Constraint c = Constraint::none) {
    if (index_.count(name)) throw UsageError("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back(std::make_unique<Parameter<T>>(name, std::move(value), c));
    return *params_.back();
  }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return *params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::vector<Parameter<T>*> all() {
    std::vector<Parameter<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
  const Tensor<T>& grad() const { return tape->grad(id); }
};

/// Single-use reverse-mode tape. Entries are appended in evaluation order,
/// so the entry list is always topologically sorted. backward() may run
/// once; afterwards the tape is spent and a new one must be built.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Entry {
    const char* op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(Tensor<T> value) {
    return append("constant", {}, std::move(value), false, nullptr, {});
  }

  /// Records a parameter as a leaf; gradients flow back into param.grad.
  Var<T> leaf(Parameter<T>& param) {
    return append("leaf", {}, param.value, grad_enabled_, &param, {});
  }

  /// Leaf without a backing Parameter (used by gradient checks on inputs).
  Var<T> variable(Tensor<T> value) {
    return append("variable", {}, std::move(value), grad_enabled_, nullptr, {});
  }

  Var<T> push(const char* op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn fn) {
    bool rg = false;
    for (auto i : inputs) rg = rg || entries_[i].requires_grad;
    return append(op, std::move(inputs), std::move(value), rg, nullptr, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(std::size_t id) const { return entries_.at(id).value; }
  bool requires_grad(std::size_t id) const { return entries_.at(id).requires_grad; }
  const Entry& entry(std::size_t id) const { return entries_.at(id); }
  std::size_t size() const noexcept { return entries_.size(); }

  const Tensor<T>& grad(std::size_t id) {
    return grad_ref(id);
  }

  /// Gradient buffer of an entry, zero-allocated on first access.
  Tensor<T>& grad_ref(std::size_t id) {
    Entry& e = entries_[id];
    if (!e.has_grad) {
      e.grad = Tensor<T>(e.value.shape());
      e.has_grad = true;
    }
    return e.grad;
  }

  bool needs_grad(std::size_t id) const { return entries_[id].requires_grad; }

  void backward(Var<T> loss) {
    if (spent_) throw UsageError("tape already consumed by backward(); rebuild it for the next step");
    if (loss.tape != this) throw UsageError("loss was recorded on a different tape");
    if (entries_.at(loss.id).value.size() != 1) {
      throw UsageError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    spent_ = true;
    if (!entries_[loss.id].requires_grad) return;
    grad_ref(loss.id)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Entry& e = entries_[i];
      if (!e.requires_grad || !e.has_grad) continue;
      if (e.backward) e.backward(*this, i);
      if (e.param) {
        auto& dst = e.param->grad.vec();
        const auto& src = e.grad.vec();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

  bool spent() const noexcept { return spent_; }

 private:
  Var<T> append(const char* op, std::vector<std::size_t> inputs, Tensor<T> value, bool rg,
                Parameter<T>* param, BackwardFn fn) {
    if (spent_) throw UsageError("cannot record on a consumed tape");
    entries_.push_back(Entry{op, std::move(inputs), std::move(value), Tensor<T>(), rg && grad_enabled_,
                             false, param, std::move(fn)});
    return Var<T>{this, entries_.size() - 1};
  }

  std::vector<Entry> entries_;
  bool grad_enabled_;
  bool spent_ = false;
};

}  // namespace slash
