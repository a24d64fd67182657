// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "slash/ops.hpp"
#include "slash/tape.hpp"

// Parameter bundles for the standard layers the model is built from.

namespace slash::nn {

using Rng = std::mt19937_64;

template <typename T>
Tensor<T> xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;  // [in×out]
  Parameter<T>* bias = nullptr;    // [out], optional

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
         Rng& rng, bool with_bias = true) {
    weight = &store.add(name + ".weight", xavier_uniform<T>({in, out}, in, out, rng));
    if (with_bias) bias = &store.add(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    auto y = ops::matmul(x, tape.leaf(*weight));
    return bias ? ops::add_row(y, tape.leaf(*bias)) : y;
  }
};

/// Linear layers with ReLU between them (none after the last).
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  Mlp() = default;
  Mlp(ParameterStore<T>& store, const std::string& name, const std::vector<std::size_t>& widths,
      Rng& rng) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      layers.emplace_back(store, name + "." + std::to_string(i), widths[i], widths[i + 1], rng);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](tape, x);
      if (i + 1 < layers.size()) x = ops::relu(x);
    }
    return x;
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t n) {
    gain = &store.add(name + ".gain", Tensor<T>({n}, T(1)));
    bias = &store.add(name + ".bias", Tensor<T>({n}));
  }

  /// Normalizes rows of a 2D tensor.
  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return ops::layer_norm(x, 1, tape.leaf(*gain), tape.leaf(*bias));
  }
};

template <typename T>
struct Conv {
  Parameter<T>* weight = nullptr;  // [s,s,in,out]
  Parameter<T>* bias = nullptr;

  Conv() = default;
  Conv(ParameterStore<T>& store, const std::string& name, std::size_t ks, std::size_t in,
       std::size_t out, Rng& rng) {
    weight = &store.add(name + ".weight",
                        xavier_uniform<T>({ks, ks, in, out}, ks * ks * in, ks * ks * out, rng));
    bias = &store.add(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return ops::conv2d(x, tape.leaf(*weight), tape.leaf(*bias));
  }
};

/// Gated recurrent unit, one gate matrix per input/hidden path:
///   r = sigmoid(x Wir + bir + h Whr + bhr)
///   z = sigmoid(x Wiz + biz + h Whz + bhz)
///   n = tanh(x Win + bin + r * (h Whn + bhn))
///   h' = (1 - z) * n + z * h
template <typename T>
struct GruCell {
  Linear<T> ir, iz, in, hr, hz, hn;
  std::size_t input_dim = 0, hidden_dim = 0;

  GruCell() = default;
  GruCell(ParameterStore<T>& store, const std::string& name, std::size_t input, std::size_t hidden,
          Rng& rng)
      : ir(store, name + ".ir", input, hidden, rng),
        iz(store, name + ".iz", input, hidden, rng),
        in(store, name + ".in", input, hidden, rng),
        hr(store, name + ".hr", hidden, hidden, rng),
        hz(store, name + ".hz", hidden, hidden, rng),
        hn(store, name + ".hn", hidden, hidden, rng),
        input_dim(input),
        hidden_dim(hidden) {}
};

/// Row-wise GRU update of `state` [K×hidden] driven by `input` [K×input].
template <typename T>
Var<T> gru_cell(Tape<T>& tape, Var<T> state, Var<T> input, const GruCell<T>& p) {
  const auto& S = state.shape();
  const auto& X = input.shape();
  if (S.size() != 2 || X.size() != 2 || S[0] != X[0] || S[1] != p.hidden_dim ||
      X[1] != p.input_dim) {
    throw DimensionError("gru_cell: state " + shape_str(S) + " / input " + shape_str(X) +
                         " do not match cell " + std::to_string(p.input_dim) + "->" +
                         std::to_string(p.hidden_dim));
  }
  auto r = ops::sigmoid(ops::add(p.ir(tape, input), p.hr(tape, state)));
  auto z = ops::sigmoid(ops::add(p.iz(tape, input), p.hz(tape, state)));
  auto n = ops::tanh(ops::add(p.in(tape, input), ops::mul(r, p.hn(tape, state))));
  auto keep = ops::affine(z, T(-1), T(1));
  return ops::add(ops::mul(keep, n), ops::mul(z, state));
}

}  // namespace slash::nn
