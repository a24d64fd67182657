// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "slash/tape.hpp"
#include "slash/tensor.hpp"

// Differentiable operations over Tape/Var. Every op computes its forward
// value eagerly and records a closure that accumulates input gradients.

namespace slash::ops {

namespace detail {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape != b.tape) throw UsageError("operands recorded on different tapes");
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(s));
  }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto& d = dst.vec();
  const auto& s = src.vec();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " +
                         shape_str(B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* o = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* br = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return a.tape->push("matmul", {a.id, b.id}, std::move(out),
                      [m, k, n, ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        const auto& A = t.value(ai);
                        const auto& B = t.value(bi);
                        if (t.needs_grad(ai)) {
                          auto& dA = t.grad_ref(ai);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t p = 0; p < k; ++p) {
                              T acc = T(0);
                              for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
                              dA[i * k + p] += acc;
                            }
                        }
                        if (t.needs_grad(bi)) {
                          auto& dB = t.grad_ref(bi);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t p = 0; p < k; ++p) {
                              const T av = A[i * k + p];
                              for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
                            }
                        }
                      });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& A = a.value();
  detail::require_rank(A.shape(), 2, "transpose");
  const std::size_t r = A.dim(0), c = A.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return a.tape->push("transpose", {a.id}, std::move(out),
                      [r, c, ai = a.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        auto& dA = t.grad_ref(ai);
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < c; ++j) dA[i * c + j] += G[j * r + i];
                      });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  return a.tape->push("add", {a.id, b.id}, std::move(out),
                      [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        if (t.needs_grad(ai)) detail::add_into(t.grad_ref(ai), G);
                        if (t.needs_grad(bi)) detail::add_into(t.grad_ref(bi), G);
                      });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return a.tape->push("sub", {a.id, b.id}, std::move(out),
                      [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        if (t.needs_grad(ai)) detail::add_into(t.grad_ref(ai), G);
                        if (t.needs_grad(bi)) {
                          auto& dB = t.grad_ref(bi);
                          for (std::size_t i = 0; i < G.size(); ++i) dB[i] -= G[i];
                        }
                      });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return a.tape->push("mul", {a.id, b.id}, std::move(out),
                      [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        const auto& A = t.value(ai);
                        const auto& B = t.value(bi);
                        if (t.needs_grad(ai)) {
                          auto& dA = t.grad_ref(ai);
                          for (std::size_t i = 0; i < G.size(); ++i) dA[i] += G[i] * B[i];
                        }
                        if (t.needs_grad(bi)) {
                          auto& dB = t.grad_ref(bi);
                          for (std::size_t i = 0; i < G.size(); ++i) dB[i] += G[i] * A[i];
                        }
                      });
}

/// a[m×n] + b broadcast over rows; b has n elements.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_rank(A.shape(), 2, "add_row");
  const std::size_t m = A.dim(0), n = A.dim(1);
  if (B.size() != n) {
    throw DimensionError("add_row: bias " + shape_str(B.shape()) + " vs rows of " +
                         shape_str(A.shape()));
  }
  Tensor<T> out = A;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += B[j];
  return a.tape->push("add_row", {a.id, b.id}, std::move(out),
                      [m, n, ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        if (t.needs_grad(ai)) detail::add_into(t.grad_ref(ai), G);
                        if (t.needs_grad(bi)) {
                          auto& dB = t.grad_ref(bi);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) dB[j] += G[i * n + j];
                        }
                      });
}

/// scale * a + shift
template <typename T>
Var<T> affine(Var<T> a, T scale, T shift = T(0)) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v = scale * v + shift;
  return a.tape->push("affine", {a.id}, std::move(out),
                      [scale, ai = a.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        auto& dA = t.grad_ref(ai);
                        for (std::size_t i = 0; i < G.size(); ++i) dA[i] += scale * G[i];
                      });
}

namespace detail {

// Unary op whose derivative is expressed via (input, output).
template <typename T, typename F, typename D>
Var<T> unary(const char* name, Var<T> a, F f, D df) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v = f(v);
  return a.tape->push(name, {a.id}, std::move(out),
                      [df, ai = a.id](Tape<T>& t, std::size_t self) {
                        const auto& e = t.entry(self);
                        const auto& X = t.value(ai);
                        auto& dA = t.grad_ref(ai);
                        for (std::size_t i = 0; i < e.grad.size(); ++i)
                          dA[i] += e.grad[i] * df(X[i], e.value[i]);
                      });
}

}  // namespace detail

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return detail::unary<T>(
      "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return detail::unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

/// Softmax of x/temperature along `axis`, max-subtracted. The normalizer is
/// an order-invariant sum so permuting the axis permutes the output exactly.
template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis, T temperature = T(1)) {
  if (!(temperature > T(0))) {
    throw ConfigError("softmax: temperature must be positive, got " + std::to_string(temperature));
  }
  const auto& X = x.value();
  const AxisSplit s = split_axis(X.shape(), axis);
  Tensor<T> out(X.shape());
  std::vector<T> scratch(s.len);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, X[base + l * s.inner]);
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp((X[base + l * s.inner] - mx) / temperature);
        out[base + l * s.inner] = e;
        scratch[l] = e;
      }
      const T z = order_invariant_sum<T>(scratch);
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
    }
  return x.tape->push(
      "softmax", {x.id}, std::move(out),
      [s, temperature, xi = x.id](Tape<T>& t, std::size_t self) {
        const auto& e = t.entry(self);
        const auto& Y = e.value;
        const auto& G = e.grad;
        auto& dX = t.grad_ref(xi);
        std::vector<T> scratch(s.len);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            for (std::size_t l = 0; l < s.len; ++l)
              scratch[l] = Y[base + l * s.inner] * G[base + l * s.inner];
            const T dot = order_invariant_sum<T>(scratch);
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = base + l * s.inner;
              dX[idx] += Y[idx] * (G[idx] - dot) / temperature;
            }
          }
      });
}

/// Column-wise weighted-mean normalization of a 2D tensor:
/// out[i,j] = (a[i,j] + eps) / sum_l (a[l,j] + eps). Columns sum to 1.
template <typename T>
Var<T> normalize_columns(Var<T> a, T eps) {
  const auto& A = a.value();
  detail::require_rank(A.shape(), 2, "normalize_columns");
  const std::size_t m = A.dim(0), n = A.dim(1);
  std::vector<T> colsum(n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) colsum[j] += A[i * n + j] + eps;
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (A[i * n + j] + eps) / colsum[j];
  return a.tape->push("normalize_columns", {a.id}, std::move(out),
                      [m, n, colsum = std::move(colsum), ai = a.id](Tape<T>& t, std::size_t self) {
                        const auto& e = t.entry(self);
                        const auto& Y = e.value;
                        const auto& G = e.grad;
                        std::vector<T> dot(n, T(0));
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j) dot[j] += G[i * n + j] * Y[i * n + j];
                        auto& dA = t.grad_ref(ai);
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j)
                            dA[i * n + j] += (G[i * n + j] - dot[j]) / colsum[j];
                      });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Standardizes along `axis` (population variance + 1e-5), then applies
/// gain and bias, both of length shape[axis].
template <typename T>
Var<T> layer_norm(Var<T> x, std::size_t axis, Var<T> gain, Var<T> bias) {
  detail::require_same_tape(x, gain);
  detail::require_same_tape(x, bias);
  const auto& X = x.value();
  const AxisSplit s = split_axis(X.shape(), axis);
  if (gain.value().size() != s.len || bias.value().size() != s.len) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs normalized length " +
                         std::to_string(s.len));
  }
  const auto& Gn = gain.value();
  const auto& Bs = bias.value();
  const std::size_t groups = s.outer * s.inner;
  Tensor<T> out(X.shape());
  Tensor<T> xhat(X.shape());
  std::vector<T> inv_std(groups);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mean = T(0);
      for (std::size_t l = 0; l < s.len; ++l) mean += X[base + l * s.inner];
      mean /= T(s.len);
      T var = T(0);
      for (std::size_t l = 0; l < s.len; ++l) {
        const T d = X[base + l * s.inner] - mean;
        var += d * d;
      }
      var /= T(s.len);
      const T is = T(1) / std::sqrt(var + T(kLayerNormEps));
      inv_std[o * s.inner + in] = is;
      for (std::size_t l = 0; l < s.len; ++l) {
        const std::size_t idx = base + l * s.inner;
        xhat[idx] = (X[idx] - mean) * is;
        out[idx] = xhat[idx] * Gn[l] + Bs[l];
      }
    }
  return x.tape->push(
      "layer_norm", {x.id, gain.id, bias.id}, std::move(out),
      [s, xh = std::move(xhat), is = std::move(inv_std), xi = x.id, gi = gain.id,
       bi = bias.id](Tape<T>& t, std::size_t self) {
        const auto& G = t.entry(self).grad;
        const auto& Gn = t.value(gi);
        const bool want_x = t.needs_grad(xi);
        const bool want_g = t.needs_grad(gi);
        const bool want_b = t.needs_grad(bi);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = base + l * s.inner;
              const T d = G[idx] * Gn[l];
              mean_d += d;
              mean_dx += d * xh[idx];
              if (want_g) t.grad_ref(gi)[l] += G[idx] * xh[idx];
              if (want_b) t.grad_ref(bi)[l] += G[idx];
            }
            if (!want_x) continue;
            mean_d /= T(s.len);
            mean_dx /= T(s.len);
            auto& dX = t.grad_ref(xi);
            const T isd = is[o * s.inner + in];
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = base + l * s.inner;
              dX[idx] += isd * (G[idx] * Gn[l] - mean_d - xh[idx] * mean_dx);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Multi-channel stride-1 convolution with zero "same" padding.
/// input [H,W,Cin], weight [s,s,Cin,Cout], bias [Cout] -> [H,W,Cout].
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias) {
  detail::require_same_tape(input, weight);
  detail::require_same_tape(input, bias);
  const auto& X = input.value();
  const auto& Wt = weight.value();
  detail::require_rank(X.shape(), 3, "conv2d input");
  detail::require_rank(Wt.shape(), 4, "conv2d weight");
  const std::size_t H = X.dim(0), W = X.dim(1), Ci = X.dim(2);
  const std::size_t ks = Wt.dim(0), Co = Wt.dim(3);
  if (Wt.dim(1) != ks || Wt.dim(2) != Ci || bias.value().size() != Co) {
    throw DimensionError("conv2d: weight " + shape_str(Wt.shape()) + " incompatible with input " +
                         shape_str(X.shape()));
  }
  if (ks % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(ks));
  const long r = static_cast<long>(ks / 2);
  const auto& Bs = bias.value();
  Tensor<T> out({H, W, Co});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      T* o = &out[(y * W + x) * Co];
      for (std::size_t c = 0; c < Co; ++c) o[c] = Bs[c];
      for (std::size_t dy = 0; dy < ks; ++dy) {
        const long yy = static_cast<long>(y) + static_cast<long>(dy) - r;
        if (yy < 0 || yy >= static_cast<long>(H)) continue;
        for (std::size_t dx = 0; dx < ks; ++dx) {
          const long xx = static_cast<long>(x) + static_cast<long>(dx) - r;
          if (xx < 0 || xx >= static_cast<long>(W)) continue;
          const T* in = &X[(static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)) * Ci];
          const T* w = &Wt[(dy * ks + dx) * Ci * Co];
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const T a = in[ci];
            if (a == T(0)) continue;
            const T* wr = w + ci * Co;
            for (std::size_t c = 0; c < Co; ++c) o[c] += a * wr[c];
          }
        }
      }
    }
  return input.tape->push(
      "conv2d", {input.id, weight.id, bias.id}, std::move(out),
      [H, W, Ci, Co, ks, r, xi = input.id, wi = weight.id, bi = bias.id](Tape<T>& t,
                                                                         std::size_t self) {
        const auto& G = t.entry(self).grad;
        const auto& X = t.value(xi);
        const auto& Wt = t.value(wi);
        const bool want_x = t.needs_grad(xi);
        const bool want_w = t.needs_grad(wi);
        if (t.needs_grad(bi)) {
          auto& dB = t.grad_ref(bi);
          for (std::size_t p = 0; p < H * W; ++p)
            for (std::size_t c = 0; c < Co; ++c) dB[c] += G[p * Co + c];
        }
        Tensor<T>* dX = want_x ? &t.grad_ref(xi) : nullptr;
        Tensor<T>* dW = want_w ? &t.grad_ref(wi) : nullptr;
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const T* g = &G[(y * W + x) * Co];
            for (std::size_t dy = 0; dy < ks; ++dy) {
              const long yy = static_cast<long>(y) + static_cast<long>(dy) - r;
              if (yy < 0 || yy >= static_cast<long>(H)) continue;
              for (std::size_t dx = 0; dx < ks; ++dx) {
                const long xx = static_cast<long>(x) + static_cast<long>(dx) - r;
                if (xx < 0 || xx >= static_cast<long>(W)) continue;
                const std::size_t in_off =
                    (static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)) * Ci;
                const std::size_t w_off = (dy * ks + dx) * Ci * Co;
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                  const T* wr = &Wt[w_off + ci * Co];
                  if (dX) {
                    T acc = T(0);
                    for (std::size_t c = 0; c < Co; ++c) acc += g[c] * wr[c];
                    (*dX)[in_off + ci] += acc;
                  }
                  if (dW) {
                    const T a = X[in_off + ci];
                    if (a == T(0)) continue;
                    T* dw = &(*dW)[w_off + ci * Co];
                    for (std::size_t c = 0; c < Co; ++c) dw[c] += a * g[c];
                  }
                }
              }
            }
          }
      });
}

/// Single-channel same-size convolution with replicate (edge) padding.
/// input [H,W], kernel [s,s] with s odd.
template <typename T>
Var<T> conv2d_single(Var<T> input, Var<T> kernel) {
  detail::require_same_tape(input, kernel);
  const auto& X = input.value();
  const auto& K = kernel.value();
  detail::require_rank(X.shape(), 2, "conv2d_single input");
  detail::require_rank(K.shape(), 2, "conv2d_single kernel");
  const std::size_t ks = K.dim(0);
  if (K.dim(1) != ks) throw DimensionError("conv2d_single: kernel must be square, got " + shape_str(K.shape()));
  if (ks % 2 == 0) throw ConfigError("conv2d_single: kernel size must be odd, got " + std::to_string(ks));
  const long H = static_cast<long>(X.dim(0)), W = static_cast<long>(X.dim(1));
  const long r = static_cast<long>(ks / 2);
  auto clampi = [](long v, long hi) { return std::clamp(v, 0L, hi - 1); };
  Tensor<T> out(X.shape());
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      T acc = T(0);
      for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
          acc += K[static_cast<std::size_t>((dy + r) * static_cast<long>(ks) + (dx + r))] *
                 X[static_cast<std::size_t>(clampi(y + dy, H) * W + clampi(x + dx, W))];
        }
      out[static_cast<std::size_t>(y * W + x)] = acc;
    }
  return input.tape->push(
      "conv2d_single", {input.id, kernel.id}, std::move(out),
      [H, W, r, ks, clampi, xi = input.id, ki = kernel.id](Tape<T>& t, std::size_t self) {
        const auto& G = t.entry(self).grad;
        const auto& X = t.value(xi);
        const auto& K = t.value(ki);
        Tensor<T>* dX = t.needs_grad(xi) ? &t.grad_ref(xi) : nullptr;
        Tensor<T>* dK = t.needs_grad(ki) ? &t.grad_ref(ki) : nullptr;
        for (long y = 0; y < H; ++y)
          for (long x = 0; x < W; ++x) {
            const T g = G[static_cast<std::size_t>(y * W + x)];
            for (long dy = -r; dy <= r; ++dy)
              for (long dx = -r; dx <= r; ++dx) {
                const auto kidx = static_cast<std::size_t>((dy + r) * static_cast<long>(ks) + (dx + r));
                const auto xidx = static_cast<std::size_t>(clampi(y + dy, H) * W + clampi(x + dx, W));
                if (dX) (*dX)[xidx] += g * K[kidx];
                if (dK) (*dK)[kidx] += g * X[xidx];
              }
          }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->push("reshape", {a.id}, std::move(out), [ai = a.id](Tape<T>& t, std::size_t self) {
    const auto& G = t.entry(self).grad;
    auto& dA = t.grad_ref(ai);
    for (std::size_t i = 0; i < G.size(); ++i) dA[i] += G[i];
  });
}

/// Rows [begin, begin+count) of a 2D tensor.
template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t count) {
  const auto& A = a.value();
  detail::require_rank(A.shape(), 2, "slice_rows");
  const std::size_t n = A.dim(1);
  if (count == 0 || begin + count > A.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") out of " + shape_str(A.shape()));
  }
  Tensor<T> out({count, n});
  std::copy_n(&A[begin * n], count * n, &out[0]);
  return a.tape->push("slice_rows", {a.id}, std::move(out),
                      [begin, n, ai = a.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        auto& dA = t.grad_ref(ai);
                        for (std::size_t i = 0; i < G.size(); ++i) dA[begin * n + i] += G[i];
                      });
}

/// Selected rows of a 2D tensor, in the given order.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> rows) {
  const auto& A = a.value();
  detail::require_rank(A.shape(), 2, "gather_rows");
  const std::size_t n = A.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  Tensor<T> out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= A.dim(0)) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(&A[rows[i] * n], n, &out[i * n]);
  }
  return a.tape->push("gather_rows", {a.id}, std::move(out),
                      [rows = std::move(rows), n, ai = a.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        auto& dA = t.grad_ref(ai);
                        for (std::size_t i = 0; i < rows.size(); ++i)
                          for (std::size_t j = 0; j < n; ++j) dA[rows[i] * n + j] += G[i * n + j];
                      });
}

/// Column j of a 2D tensor as [rows×1].
template <typename T>
Var<T> column(Var<T> a, std::size_t j) {
  const auto& A = a.value();
  detail::require_rank(A.shape(), 2, "column");
  const std::size_t m = A.dim(0), n = A.dim(1);
  if (j >= n) throw DimensionError("column: index out of range for " + shape_str(A.shape()));
  Tensor<T> out({m, 1});
  for (std::size_t i = 0; i < m; ++i) out[i] = A[i * n + j];
  return a.tape->push("column", {a.id}, std::move(out),
                      [m, n, j, ai = a.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        auto& dA = t.grad_ref(ai);
                        for (std::size_t i = 0; i < m; ++i) dA[i * n + j] += G[i];
                      });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].value().dim(1);
  std::size_t rows = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    detail::require_rank(p.shape(), 2, "concat_rows");
    if (p.value().dim(1) != n) throw DimensionError("concat_rows: column count mismatch");
    ids.push_back(p.id);
    offsets.push_back(rows * n);
    rows += p.value().dim(0);
  }
  Tensor<T> out({rows, n});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value().vec();
    std::copy(v.begin(), v.end(), out.vec().begin() + static_cast<std::ptrdiff_t>(offsets[k]));
  }
  return parts[0].tape->push("concat_rows", ids, std::move(out),
                             [ids, offsets](Tape<T>& t, std::size_t self) {
                               const auto& G = t.entry(self).grad;
                               for (std::size_t k = 0; k < ids.size(); ++k) {
                                 if (!t.needs_grad(ids[k])) continue;
                                 auto& d = t.grad_ref(ids[k]);
                                 for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[offsets[k] + i];
                               }
                             });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].value().dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> ids, widths, offsets;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    detail::require_rank(p.shape(), 2, "concat_cols");
    if (p.value().dim(0) != m) throw DimensionError("concat_cols: row count mismatch");
    ids.push_back(p.id);
    widths.push_back(p.value().dim(1));
    offsets.push_back(cols);
    cols += p.value().dim(1);
  }
  Tensor<T> out({m, cols});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * cols + offsets[k] + j] = v[i * widths[k] + j];
  }
  return parts[0].tape->push("concat_cols", ids, std::move(out),
                             [ids, widths, offsets, m, cols](Tape<T>& t, std::size_t self) {
                               const auto& G = t.entry(self).grad;
                               for (std::size_t k = 0; k < ids.size(); ++k) {
                                 if (!t.needs_grad(ids[k])) continue;
                                 auto& d = t.grad_ref(ids[k]);
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < widths[k]; ++j)
                                     d[i * widths[k] + j] += G[i * cols + offsets[k] + j];
                               }
                             });
}

/// Tiles a length-n vector into [rows×n].
template <typename T>
Var<T> broadcast_rows(Var<T> v, std::size_t rows) {
  const auto& V = v.value();
  const std::size_t n = V.size();
  Tensor<T> out({rows, n});
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(&V[0], n, &out[i * n]);
  return v.tape->push("broadcast_rows", {v.id}, std::move(out),
                      [rows, n, vi = v.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        auto& dV = t.grad_ref(vi);
                        for (std::size_t i = 0; i < rows; ++i)
                          for (std::size_t j = 0; j < n; ++j) dV[j] += G[i * n + j];
                      });
}

/// Row i of the output is replacement row i where mask[i] is set, else
/// row i of `a`. Gradient reaches `a` only through unmasked rows.
template <typename T>
Var<T> route_rows(Var<T> a, const Tensor<T>& replacement, const std::vector<std::uint8_t>& mask) {
  const auto& A = a.value();
  detail::require_same_shape(A.shape(), replacement.shape(), "route_rows");
  detail::require_rank(A.shape(), 2, "route_rows");
  const std::size_t m = A.dim(0), n = A.dim(1);
  if (mask.size() != m) throw DimensionError("route_rows: mask length mismatch");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < m; ++i)
    if (mask[i]) std::copy_n(&replacement[i * n], n, &out[i * n]);
  return a.tape->push("route_rows", {a.id}, std::move(out),
                      [mask, n, ai = a.id](Tape<T>& t, std::size_t self) {
                        const auto& G = t.entry(self).grad;
                        auto& dA = t.grad_ref(ai);
                        for (std::size_t i = 0; i < mask.size(); ++i)
                          if (!mask[i])
                            for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += G[i * n + j];
                      });
}

/// Alpha compositing: out[p,c] = sum_k mixture[p,k] * rgb[k, p*C + c].
/// mixture [P×K], rgb [K×(P·C)] -> [P×C]. Sums over k are order-invariant.
template <typename T>
Var<T> composite(Var<T> mixture, Var<T> rgb, std::size_t channels) {
  detail::require_same_tape(mixture, rgb);
  const auto& Mx = mixture.value();
  const auto& R = rgb.value();
  detail::require_rank(Mx.shape(), 2, "composite mixture");
  const std::size_t P = Mx.dim(0), K = Mx.dim(1), C = channels;
  if (R.rank() != 2 || R.dim(0) != K || R.dim(1) != P * C) {
    throw DimensionError("composite: rgb " + shape_str(R.shape()) + " vs mixture " +
                         shape_str(Mx.shape()));
  }
  Tensor<T> out({P, C});
  std::vector<T> scratch(K);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t k = 0; k < K; ++k) scratch[k] = Mx[p * K + k] * R[k * P * C + p * C + c];
      out[p * C + c] = order_invariant_sum<T>(scratch);
    }
  return mixture.tape->push("composite", {mixture.id, rgb.id}, std::move(out),
                            [P, K, C, mi = mixture.id, ri = rgb.id](Tape<T>& t, std::size_t self) {
                              const auto& G = t.entry(self).grad;
                              const auto& Mx = t.value(mi);
                              const auto& R = t.value(ri);
                              const bool want_m = t.needs_grad(mi);
                              const bool want_r = t.needs_grad(ri);
                              for (std::size_t p = 0; p < P; ++p)
                                for (std::size_t c = 0; c < C; ++c) {
                                  const T g = G[p * C + c];
                                  for (std::size_t k = 0; k < K; ++k) {
                                    const std::size_t ridx = k * P * C + p * C + c;
                                    if (want_m) t.grad_ref(mi)[p * K + k] += g * R[ridx];
                                    if (want_r) t.grad_ref(ri)[ridx] += g * Mx[p * K + k];
                                  }
                                }
                            });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(Var<T> a) {
  T acc = T(0);
  for (T v : a.value().vec()) acc += v;
  return a.tape->push("sum", {a.id}, Tensor<T>::scalar(acc), [ai = a.id](Tape<T>& t, std::size_t self) {
    const T g = t.entry(self).grad[0];
    for (auto& d : t.grad_ref(ai).vec()) d += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return affine(sum(a), T(1) / T(a.value().size()));
}

/// Mean squared error over all elements.
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  auto d = sub(a, b);
  return mean(mul(d, d));
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace slash::ops
