// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "slash/hungarian.hpp"
#include "slash/metrics.hpp"
#include "slash/nn.hpp"
#include "slash/ops.hpp"
#include "slash/scene.hpp"
#include "slash/tape.hpp"

namespace slash {

enum class KernelKind { identity, temperature, gaussian, conv, wnconv };

inline std::string to_string(KernelKind k) {
  switch (k) {
    case KernelKind::identity: return "identity";
    case KernelKind::temperature: return "temperature";
    case KernelKind::gaussian: return "gaussian";
    case KernelKind::conv: return "conv";
    case KernelKind::wnconv: return "wnconv";
  }
  return "?";
}

inline KernelKind parse_kernel_kind(const std::string& s) {
  if (s == "identity") return KernelKind::identity;
  if (s == "temperature") return KernelKind::temperature;
  if (s == "gaussian") return KernelKind::gaussian;
  if (s == "conv") return KernelKind::conv;
  if (s == "wnconv") return KernelKind::wnconv;
  throw ConfigError("unknown kernel kind '" + s + "' (expected identity|temperature|gaussian|conv|wnconv)");
}

/// Attention refining kernel configuration. Learnable raw weights for the
/// conv/wnconv kinds live in the model's parameter store ("ark.raw").
struct KernelVariant {
  KernelKind kind = KernelKind::wnconv;
  std::size_t size = 5;
  double tau = 1.0;
  double gaussian_sigma = 1.0;

  void validate() const {
    if (size % 2 == 0) throw ConfigError("kernel size must be odd, got " + std::to_string(size));
    if (!(tau > 0.0)) throw ConfigError("kernel tau must be positive");
    if (!(gaussian_sigma > 0.0)) throw ConfigError("gaussian sigma must be positive");
  }
  bool learnable() const { return kind == KernelKind::conv || kind == KernelKind::wnconv; }
};

struct ModelConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_slots = 7;
  std::size_t slot_dim = 64;
  std::size_t enc_dim = 64;
  std::size_t attn_dim = 64;
  std::size_t iterations = 3;
  std::size_t cnn_channels = 32;
  std::size_t cnn_kernel = 5;
  std::size_t mlp_hidden = 128;
  std::size_t ippe_hidden = 0;  // 0 -> slot_dim
  KernelVariant kernel;
  bool ippe_enabled = true;
  bool ippe_every_iteration = true;
  bool ws_init_enabled = false;

  std::size_t pixels() const { return height * width; }
  std::size_t ippe_width() const { return ippe_hidden ? ippe_hidden : slot_dim; }

  void validate() const {
    if (num_slots < 2) throw ConfigError("num_slots must be >= 2");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    for (auto d : {height, width, slot_dim, enc_dim, attn_dim, cnn_channels, mlp_hidden}) {
      if (d < 1) throw ConfigError("model dimensions must be >= 1");
    }
    if (cnn_kernel % 2 == 0) throw ConfigError("cnn_kernel must be odd");
    kernel.validate();
    if (ippe_enabled && ws_init_enabled) {
      throw ConfigError("ippe_enabled and ws_init_enabled cannot both drive slot positions");
    }
  }

  /// Plain Slot Attention: no refinement, unit temperature, no point modules.
  static ModelConfig plain(ModelConfig base) {
    base.kernel.kind = KernelKind::identity;
    base.kernel.tau = 1.0;
    base.ippe_enabled = false;
    base.ws_init_enabled = false;
    return base;
  }
};

enum class Mode { train, inference };

inline constexpr double kAttentionEps = 1e-8;

template <typename T>
struct AttentionField {
  Var<T> logits;   // M, [HW×K]
  Var<T> refined;  // M after the refining kernel
  Var<T> attn;     // softmax over slots per pixel
  Var<T> weights;  // attn renormalized over pixels per slot
};

template <typename T>
struct IppeResult {
  Var<T> slots;
  Var<T> points;                     // [K×2] predictions in [0,1]^2
  std::vector<std::uint8_t> routed;  // 1 where the encoder consumed a gt point
  std::vector<int> matched_gt;       // gt index per slot, -1 if none
};

template <typename T>
struct IterationTrace {
  AttentionField<T> field;
  Var<T> slots;  // after this iteration
  std::optional<IppeResult<T>> ippe;
};

template <typename T>
struct DecoderOutput {
  Var<T> rgb;           // [K × HW·3], per-slot RGB
  Var<T> alpha_logits;  // [HW×K]
  Var<T> mixture;       // [HW×K], softmax of alpha logits over slots
  Var<T> reconstruction;  // [HW×3]
};

template <typename T>
struct ForwardResult {
  Var<T> initial_slots;
  Var<T> slots;
  std::vector<IterationTrace<T>> iterations;
  DecoderOutput<T> decoded;
  std::size_t gt_points_consumed = 0;
};

/// Squared-distance Hungarian matching of K predictions to n targets.
/// Returns the target index per prediction row (-1 if unmatched).
template <typename T>
std::vector<int> match_points(const Tensor<T>& predicted, const std::vector<Point2>& targets) {
  const std::size_t K = predicted.dim(0);
  if (targets.size() > K) {
    throw ConfigError("cannot match " + std::to_string(targets.size()) + " annotated points to " +
                      std::to_string(K) + " slots");
  }
  for (T v : predicted.vec())
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite point prediction");
  CostMatrix cost(K, targets.size());
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < targets.size(); ++j) {
      const double dx = static_cast<double>(predicted[k * 2]) - targets[j][0];
      const double dy = static_cast<double>(predicted[k * 2 + 1]) - targets[j][1];
      cost(k, j) = dx * dx + dy * dy;
    }
  return hungarian(cost).row_to_col;
}

/// 4-channel linear coordinate grid (x, y, 1-x, 1-y), [HW×4].
template <typename T>
Tensor<T> coordinate_grid(std::size_t H, std::size_t W) {
  Tensor<T> g({H * W, 4});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const T fx = W > 1 ? T(x) / T(W - 1) : T(0);
      const T fy = H > 1 ? T(y) / T(H - 1) : T(0);
      const std::size_t p = y * W + x;
      g[p * 4 + 0] = fx;
      g[p * 4 + 1] = fy;
      g[p * 4 + 2] = T(1) - fx;
      g[p * 4 + 3] = T(1) - fy;
    }
  return g;
}

/// Fixed isotropic Gaussian, normalized to sum 1.
template <typename T>
Tensor<T> gaussian_kernel(std::size_t size, double sigma) {
  Tensor<T> k({size, size});
  const double r = static_cast<double>(size / 2);
  double total = 0.0;
  std::vector<double> w(size * size);
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double dy = static_cast<double>(i) - r, dx = static_cast<double>(j) - r;
      w[i * size + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += w[i * size + j];
    }
  for (std::size_t i = 0; i < w.size(); ++i) k[i] = static_cast<T>(w[i] / total);
  return k;
}

template <typename T>
Tensor<T> delta_kernel(std::size_t size) {
  Tensor<T> k({size, size});
  k[(size / 2) * size + size / 2] = T(1);
  return k;
}

/// The SLASH network: CNN encoder, Slot Attention with a refining kernel
/// on the attention logits, point predictor/encoder between slot updates,
/// and a spatial broadcast decoder. With the identity kernel, tau = 1 and
/// the point modules off it is plain Slot Attention.
template <typename T>
class SlashModel {
 public:
  SlashModel(ModelConfig config, std::uint64_t seed) : cfg_(std::move(config)), seed_(seed) {
    cfg_.validate();
    grid_ = coordinate_grid<T>(cfg_.height, cfg_.width);
    build();
  }

  SlashModel(const SlashModel&) = delete;
  SlashModel& operator=(const SlashModel&) = delete;

  const ModelConfig& config() const noexcept { return cfg_; }
  std::uint64_t seed() const noexcept { return seed_; }
  ParameterStore<T>& parameters() noexcept { return store_; }
  const ParameterStore<T>& parameters() const noexcept { return store_; }

  /// Standard-normal slot noise, [K×D_slot].
  Tensor<T> sample_noise(std::mt19937_64& rng) const {
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor<T> t({cfg_.num_slots, cfg_.slot_dim});
    for (auto& v : t.vec()) v = static_cast<T>(n(rng));
    return t;
  }

  // -- encoder --------------------------------------------------------------

  /// image [H,W,3] -> features [HW×D_enc]
  Var<T> encode_image(Tape<T>& tape, const Tensor<T>& image) const {
    if (image.shape() != Shape{cfg_.height, cfg_.width, 3}) {
      throw DimensionError("encode_image: expected " + shape_str({cfg_.height, cfg_.width, 3}) +
                           ", got " + shape_str(image.shape()));
    }
    auto x = tape.constant(image);
    for (const auto& c : enc_conv_) x = ops::relu(c(tape, x));
    x = ops::reshape(x, {cfg_.pixels(), cfg_.cnn_channels});
    x = ops::add(x, enc_pos_(tape, tape.constant(grid_)));
    x = enc_norm_(tape, x);
    return enc_mlp_(tape, x);
  }

  // -- slot attention -------------------------------------------------------

  struct Projected {
    Var<T> keys;    // k(inputs), [HW×D]
    Var<T> values;  // v(inputs), [HW×D]
  };

  Projected project_inputs(Tape<T>& tape, Var<T> features) const {
    auto x = norm_inputs_(tape, features);
    return Projected{to_k_(tape, x), to_v_(tape, x)};
  }

  /// q(slots) after layer norm, [K×D].
  Var<T> queries(Tape<T>& tape, Var<T> slots) const { return to_q_(tape, norm_slots_(tape, slots)); }

  /// M = k q^T / sqrt(D)
  static Var<T> scaled_logits(Var<T> keys, Var<T> queries) {
    const auto d = static_cast<T>(keys.shape().back());
    return ops::affine(ops::matmul(keys, ops::transpose(queries)), T(1) / std::sqrt(d));
  }

  Var<T> attention_logits_from_keys(Tape<T>& tape, Var<T> keys, Var<T> slots) const {
    return scaled_logits(keys, queries(tape, slots));
  }

  Var<T> attention_logits(Tape<T>& tape, Var<T> features, Var<T> slots) const {
    return attention_logits_from_keys(tape, project_inputs(tape, features).keys, slots);
  }

  /// Effective [s×s] refining kernel for the configured variant.
  Var<T> ark_effective_kernel(Tape<T>& tape) const {
    const auto& kv = cfg_.kernel;
    const std::size_t s = kv.size;
    switch (kv.kind) {
      case KernelKind::wnconv: {
        auto flat = ops::reshape(tape.leaf(*ark_raw_), {s * s});
        return ops::reshape(ops::softmax(flat, 0, T(1)), {s, s});
      }
      case KernelKind::conv:
        return tape.leaf(*ark_raw_);
      case KernelKind::gaussian:
        return tape.constant(gaussian_kernel<T>(s, kv.gaussian_sigma));
      case KernelKind::identity:
        return tape.constant(delta_kernel<T>(s));
      case KernelKind::temperature:
        break;
    }
    throw UsageError("ark_effective_kernel: the temperature variant has no kernel");
  }

  /// Convolves each slot's logit map (a column of M reshaped to H×W).
  /// identity and temperature return M itself.
  Var<T> ark_apply(Tape<T>& tape, Var<T> logits) const {
    if (logits.shape() != Shape{cfg_.pixels(), cfg_.num_slots}) {
      throw DimensionError("ark_apply: logits " + shape_str(logits.shape()) + " do not match H*W x K");
    }
    if (cfg_.kernel.kind == KernelKind::identity || cfg_.kernel.kind == KernelKind::temperature) {
      return logits;
    }
    auto kernel = ark_effective_kernel(tape);
    std::vector<Var<T>> cols;
    cols.reserve(cfg_.num_slots);
    for (std::size_t j = 0; j < cfg_.num_slots; ++j) {
      auto map = ops::reshape(ops::column(logits, j), {cfg_.height, cfg_.width});
      cols.push_back(ops::reshape(ops::conv2d_single(map, kernel), {cfg_.pixels(), 1}));
    }
    return ops::concat_cols(cols);
  }

  /// attn = softmax over slots at temperature tau; weights = attn
  /// renormalized over pixels per slot.
  std::pair<Var<T>, Var<T>> attention_normalize(Var<T> refined, double tau) const {
    auto attn = ops::softmax(refined, 1, static_cast<T>(tau));
    auto weights = ops::normalize_columns(attn, static_cast<T>(kAttentionEps));
    return {attn, weights};
  }

  /// updates = W^T v(inputs), [K×D]
  static Var<T> aggregate(Var<T> weights, Var<T> values) {
    return ops::matmul(ops::transpose(weights), values);
  }

  /// GRU on the aggregated updates, then a residual MLP with pre-norm.
  Var<T> slot_update(Tape<T>& tape, Var<T> slots, Var<T> values, Var<T> weights) const {
    auto updates = aggregate(weights, values);
    auto next = nn::gru_cell(tape, slots, updates, gru_);
    return ops::add(next, slot_mlp_(tape, norm_mlp_(tape, next)));
  }

  // -- point predictor / encoder -------------------------------------------

  IppeResult<T> ippe_step(Tape<T>& tape, Var<T> slots, const std::vector<Point2>* gt, Mode mode) const {
    if (!cfg_.ippe_enabled) throw UsageError("ippe_step: point modules are disabled");
    if (gt && mode == Mode::inference) {
      throw UsageError("ippe_step: ground-truth points must not be supplied at inference");
    }
    IppeResult<T> r;
    r.points = ops::sigmoid(point_predictor_(tape, slots));
    const std::size_t K = cfg_.num_slots;
    r.routed.assign(K, 0);
    r.matched_gt.assign(K, -1);
    Var<T> encoder_in = r.points;
    if (gt && !gt->empty()) {
      r.matched_gt = match_points(r.points.value(), *gt);
      Tensor<T> replacement = r.points.value();
      for (std::size_t k = 0; k < K; ++k) {
        const int j = r.matched_gt[k];
        if (j < 0) continue;
        r.routed[k] = 1;
        replacement[k * 2] = static_cast<T>((*gt)[static_cast<std::size_t>(j)][0]);
        replacement[k * 2 + 1] = static_cast<T>((*gt)[static_cast<std::size_t>(j)][1]);
      }
      encoder_in = ops::route_rows(r.points, replacement, r.routed);
    }
    r.slots = ops::add(slots, point_encoder_(tape, encoder_in));
    return r;
  }

  /// Encoder output for explicit coordinates [n×2].
  Var<T> encode_points(Tape<T>& tape, const Tensor<T>& points) const {
    return point_encoder_(tape, tape.constant(points));
  }

  // -- slot initialization --------------------------------------------------

  /// mu + sigma * noise; with weak-supervision init, the first n slots are
  /// seeded from the annotated points and the surplus stays Gaussian.
  Var<T> initial_slots(Tape<T>& tape, const Tensor<T>& noise, const std::vector<Point2>* gt,
                       Mode mode) const {
    if (noise.shape() != Shape{cfg_.num_slots, cfg_.slot_dim}) {
      throw DimensionError("initial_slots: noise " + shape_str(noise.shape()) + " is not K x D_slot");
    }
    auto mu = ops::broadcast_rows(tape.leaf(*slots_mu_), cfg_.num_slots);
    auto sigma = ops::broadcast_rows(ops::exp(tape.leaf(*slots_log_sigma_)), cfg_.num_slots);
    auto gaussian = ops::add(mu, ops::mul(sigma, tape.constant(noise)));
    if (!cfg_.ws_init_enabled || !gt || gt->empty()) return gaussian;
    if (mode == Mode::inference) {
      throw UsageError("initial_slots: ground-truth points must not be supplied at inference");
    }
    const std::size_t n = gt->size();
    if (n > cfg_.num_slots) throw ConfigError("more annotated points than slots");
    Tensor<T> pts({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      pts[i * 2] = static_cast<T>((*gt)[i][0]);
      pts[i * 2 + 1] = static_cast<T>((*gt)[i][1]);
    }
    auto seeded = ws_init_(tape, tape.constant(pts));
    if (n == cfg_.num_slots) return seeded;
    return ops::concat_rows<T>({seeded, ops::slice_rows(gaussian, n, cfg_.num_slots - n)});
  }

  // -- decoder --------------------------------------------------------------

  DecoderOutput<T> decode_slots(Tape<T>& tape, Var<T> slots) const {
    if (slots.shape() != Shape{cfg_.num_slots, cfg_.slot_dim}) {
      throw DimensionError("decode_slots: slots " + shape_str(slots.shape()) + " are not K x D_slot");
    }
    const std::size_t P = cfg_.pixels(), K = cfg_.num_slots;
    auto pos = dec_pos_(tape, tape.constant(grid_));
    std::vector<Var<T>> rgb_rows, alpha_cols;
    for (std::size_t k = 0; k < K; ++k) {
      auto x = ops::add(ops::broadcast_rows(ops::slice_rows(slots, k, 1), P), pos);
      x = ops::reshape(x, {cfg_.height, cfg_.width, cfg_.slot_dim});
      for (std::size_t i = 0; i < dec_conv_.size(); ++i) {
        x = dec_conv_[i](tape, x);
        if (i + 1 < dec_conv_.size()) x = ops::relu(x);
      }
      x = ops::reshape(x, {P, 4});
      auto rgb = ops::concat_cols<T>({ops::column(x, 0), ops::column(x, 1), ops::column(x, 2)});
      rgb_rows.push_back(ops::reshape(rgb, {1, P * 3}));
      alpha_cols.push_back(ops::column(x, 3));
    }
    DecoderOutput<T> out;
    out.rgb = ops::concat_rows(rgb_rows);
    out.alpha_logits = ops::concat_cols(alpha_cols);
    out.mixture = ops::softmax(out.alpha_logits, 1, T(1));
    out.reconstruction = ops::composite(out.mixture, out.rgb, 3);
    return out;
  }

  // -- full forward ---------------------------------------------------------

  /// `gt` holds the annotated points of the sample; it may only be passed in
  /// training mode and is consumed by the point encoder (or by the
  /// weak-supervision initializer).
  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& image, const Tensor<T>& noise, Mode mode,
                           const std::vector<Point2>* gt = nullptr) const {
    if (gt && mode == Mode::inference) {
      throw UsageError("forward: ground-truth points must not be supplied at inference");
    }
    ForwardResult<T> r;
    auto features = encode_image(tape, image);
    auto proj = project_inputs(tape, features);
    r.initial_slots = initial_slots(tape, noise, gt, mode);
    if (cfg_.ws_init_enabled && gt) r.gt_points_consumed += gt->size();
    auto slots = r.initial_slots;
    for (std::size_t it = 0; it < cfg_.iterations; ++it) {
      IterationTrace<T> trace;
      trace.field.logits = attention_logits_from_keys(tape, proj.keys, slots);
      trace.field.refined = ark_apply(tape, trace.field.logits);
      std::tie(trace.field.attn, trace.field.weights) = attention_normalize(trace.field.refined, cfg_.kernel.tau);
      slots = slot_update(tape, slots, proj.values, trace.field.weights);
      const bool last = it + 1 == cfg_.iterations;
      if (cfg_.ippe_enabled && (cfg_.ippe_every_iteration || last)) {
        auto step = ippe_step(tape, slots, gt, mode);
        for (auto f : step.routed) r.gt_points_consumed += f;
        slots = step.slots;
        trace.ippe = std::move(step);
      }
      trace.slots = slots;
      r.iterations.push_back(std::move(trace));
    }
    r.slots = slots;
    r.decoded = decode_slots(tape, slots);
    return r;
  }

 private:
  void build() {
    const auto& c = cfg_;
    auto stream = [&](std::uint64_t module) { return nn::Rng(mix_seed(seed_, module)); };

    auto rng = stream(1);
    enc_conv_.emplace_back(store_, "encoder.conv0", c.cnn_kernel, 3, c.cnn_channels, rng);
    for (int i = 1; i < 4; ++i)
      enc_conv_.emplace_back(store_, "encoder.conv" + std::to_string(i), c.cnn_kernel, c.cnn_channels,
                             c.cnn_channels, rng);
    enc_pos_ = nn::Linear<T>(store_, "encoder.pos", 4, c.cnn_channels, rng);
    enc_norm_ = nn::LayerNorm<T>(store_, "encoder.norm", c.cnn_channels);
    enc_mlp_ = nn::Mlp<T>(store_, "encoder.mlp", {c.cnn_channels, c.enc_dim, c.enc_dim}, rng);

    rng = stream(2);
    slots_mu_ = &store_.add("slots.mu", nn::xavier_uniform<T>({c.slot_dim}, 1, c.slot_dim, rng));
    slots_log_sigma_ = &store_.add("slots.log_sigma", nn::xavier_uniform<T>({c.slot_dim}, 1, c.slot_dim, rng));
    norm_inputs_ = nn::LayerNorm<T>(store_, "attention.norm_inputs", c.enc_dim);
    norm_slots_ = nn::LayerNorm<T>(store_, "attention.norm_slots", c.slot_dim);
    norm_mlp_ = nn::LayerNorm<T>(store_, "attention.norm_mlp", c.slot_dim);
    to_k_ = nn::Linear<T>(store_, "attention.k", c.enc_dim, c.attn_dim, rng, false);
    to_q_ = nn::Linear<T>(store_, "attention.q", c.slot_dim, c.attn_dim, rng, false);
    to_v_ = nn::Linear<T>(store_, "attention.v", c.enc_dim, c.attn_dim, rng, false);
    gru_ = nn::GruCell<T>(store_, "attention.gru", c.attn_dim, c.slot_dim, rng);
    slot_mlp_ = nn::Mlp<T>(store_, "attention.mlp", {c.slot_dim, c.mlp_hidden, c.slot_dim}, rng);

    if (c.kernel.learnable()) {
      const std::size_t s = c.kernel.size;
      // wnconv: zero raw weights = uniform kernel; conv starts at the same kernel.
      const T init = c.kernel.kind == KernelKind::conv ? T(1) / T(s * s) : T(0);
      ark_raw_ = &store_.add("ark.raw", Tensor<T>({s, s}, init),
                             c.kernel.kind == KernelKind::wnconv ? Constraint::simplex_softmax
                                                                 : Constraint::none);
    }

    if (c.ippe_enabled) {
      rng = stream(3);
      const std::size_t h = c.ippe_width();
      point_predictor_ = nn::Mlp<T>(store_, "ippe.predictor", {c.slot_dim, h, h, 2}, rng);
      point_encoder_ = nn::Mlp<T>(store_, "ippe.encoder", {2, h, h, c.slot_dim}, rng);
    }
    if (c.ws_init_enabled) {
      rng = stream(4);
      ws_init_ = nn::Mlp<T>(store_, "ws_init", {2, c.ippe_width(), c.slot_dim}, rng);
    }

    rng = stream(5);
    dec_pos_ = nn::Linear<T>(store_, "decoder.pos", 4, c.slot_dim, rng);
    dec_conv_.emplace_back(store_, "decoder.conv0", c.cnn_kernel, c.slot_dim, c.cnn_channels, rng);
    for (int i = 1; i < 3; ++i)
      dec_conv_.emplace_back(store_, "decoder.conv" + std::to_string(i), c.cnn_kernel, c.cnn_channels,
                             c.cnn_channels, rng);
    dec_conv_.emplace_back(store_, "decoder.conv3", c.cnn_kernel, c.cnn_channels, 4, rng);
  }

  ModelConfig cfg_;
  std::uint64_t seed_;
  ParameterStore<T> store_;
  Tensor<T> grid_;

  std::vector<nn::Conv<T>> enc_conv_;
  nn::Linear<T> enc_pos_;
  nn::LayerNorm<T> enc_norm_;
  nn::Mlp<T> enc_mlp_;

  Parameter<T>* slots_mu_ = nullptr;
  Parameter<T>* slots_log_sigma_ = nullptr;
  nn::LayerNorm<T> norm_inputs_, norm_slots_, norm_mlp_;
  nn::Linear<T> to_k_, to_q_, to_v_;
  nn::GruCell<T> gru_;
  nn::Mlp<T> slot_mlp_;

  Parameter<T>* ark_raw_ = nullptr;
  nn::Mlp<T> point_predictor_, point_encoder_;
  nn::Mlp<T> ws_init_;

  nn::Linear<T> dec_pos_;
  std::vector<nn::Conv<T>> dec_conv_;
};

/// Reference Slot Attention forward (no refining kernel, unit temperature,
/// no point modules), built from the model's public pieces.
template <typename T>
ForwardResult<T> plain_slot_attention_forward(const SlashModel<T>& model, Tape<T>& tape,
                                              const Tensor<T>& image, const Tensor<T>& noise) {
  ForwardResult<T> r;
  auto features = model.encode_image(tape, image);
  auto proj = model.project_inputs(tape, features);
  r.initial_slots = model.initial_slots(tape, noise, nullptr, Mode::inference);
  auto slots = r.initial_slots;
  for (std::size_t it = 0; it < model.config().iterations; ++it) {
    IterationTrace<T> trace;
    trace.field.logits = model.attention_logits_from_keys(tape, proj.keys, slots);
    trace.field.refined = trace.field.logits;
    trace.field.attn = ops::softmax(trace.field.logits, 1, T(1));
    trace.field.weights = ops::normalize_columns(trace.field.attn, static_cast<T>(kAttentionEps));
    slots = model.slot_update(tape, slots, proj.values, trace.field.weights);
    trace.slots = slots;
    r.iterations.push_back(std::move(trace));
  }
  r.slots = slots;
  r.decoded = model.decode_slots(tape, slots);
  return r;
}

enum class MaskSource { decoder, attention };

/// Per-pixel argmax over the columns of `scores` [HW×K]; ties go to the
/// lowest slot index.
template <typename T>
Segmentation argmax_segmentation(const Tensor<T>& scores, std::size_t H, std::size_t W) {
  if (scores.rank() != 2 || scores.dim(0) != H * W) {
    throw DimensionError("argmax_segmentation: scores " + shape_str(scores.shape()) + " vs " +
                         std::to_string(H) + "x" + std::to_string(W));
  }
  const std::size_t K = scores.dim(1);
  std::vector<int> labels(H * W, 0);
  for (std::size_t p = 0; p < H * W; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (scores[p * K + k] > scores[p * K + best]) best = k;
    labels[p] = static_cast<int>(best);
  }
  return Segmentation(H, W, std::move(labels));
}

template <typename T>
Segmentation masks_from_model(const ForwardResult<T>& r, MaskSource source, std::size_t H, std::size_t W) {
  if (source == MaskSource::decoder) return argmax_segmentation(r.decoded.mixture.value(), H, W);
  return argmax_segmentation(r.iterations.back().field.attn.value(), H, W);
}

}  // namespace slash
