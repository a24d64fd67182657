// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "slash/config.hpp"
#include "slash/gradcheck.hpp"
#include "slash/metrics.hpp"
#include "slash/model.hpp"
#include "slash/scene.hpp"

namespace slash {

// ---------------------------------------------------------------------------
// Losses

/// Mean squared distance between annotated points and their Hungarian-matched
/// predictions. `predicted` is [K×2]. With no points the loss is a constant
/// zero and `skips` (if given) is incremented.
template <typename T>
Var<T> point_loss(Var<T> predicted, const std::vector<Point2>& gt, std::size_t* skips = nullptr) {
  Tape<T>& tape = *predicted.tape;
  if (gt.empty()) {
    if (skips) ++*skips;
    return tape.constant(Tensor<T>::scalar(T(0)));
  }
  const auto match = match_points(predicted.value(), gt);  // throws if gt.size() > K
  std::vector<std::size_t> rows(gt.size());
  for (std::size_t k = 0; k < match.size(); ++k)
    if (match[k] >= 0) rows[static_cast<std::size_t>(match[k])] = k;
  Tensor<T> target({gt.size(), 2});
  for (std::size_t j = 0; j < gt.size(); ++j) {
    target[j * 2] = static_cast<T>(gt[j][0]);
    target[j * 2 + 1] = static_cast<T>(gt[j][1]);
  }
  auto d = ops::sub(ops::gather_rows(predicted, rows), tape.constant(target));
  return ops::affine(ops::sum(ops::mul(d, d)), T(1) / static_cast<T>(gt.size()));
}

template <typename T>
struct LossTerms {
  Var<T> total;
  Var<T> recon;
  Var<T> point;
  bool point_active = false;  // the model predicts points and the sample had annotations
};

/// recon_weight * MSE(image, reconstruction) + point_weight * point loss.
/// The point term is zero unless the model predicts points and `annotated`
/// is non-empty.
template <typename T>
LossTerms<T> total_loss(Tape<T>& tape, const Tensor<T>& image, const ForwardResult<T>& out,
                        const std::vector<Point2>* annotated, const LossConfig& cfg, std::size_t* skips = nullptr) {
  LossTerms<T> r;
  const auto& rec = out.decoded.reconstruction;
  r.recon = ops::mse(rec, tape.constant(image.reshaped(rec.shape())));
  std::vector<Var<T>> preds;
  for (const auto& it : out.iterations)
    if (it.ippe) preds.push_back(it.ippe->points);
  if (cfg.point_loss_iterations == PointLossIterations::final && !preds.empty()) preds = {preds.back()};
  static const std::vector<Point2> none;
  const auto& gt = annotated ? *annotated : none;
  if (preds.empty()) {
    r.point = tape.constant(Tensor<T>::scalar(T(0)));
  } else {
    r.point_active = !gt.empty();
    Var<T> acc = point_loss(preds[0], gt, skips);
    for (std::size_t i = 1; i < preds.size(); ++i) acc = ops::add(acc, point_loss(preds[i], gt));
    r.point = preds.size() == 1 ? acc : ops::affine(acc, T(1) / static_cast<T>(preds.size()));
  }
  r.total = ops::add(ops::affine(r.recon, static_cast<T>(cfg.recon_weight)),
                     ops::affine(r.point, static_cast<T>(cfg.point_weight)));
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

/// base_lr * min(step / warmup, 1) * 0.5^(step / half_life); `step` is the
/// 1-based index of the update being applied.
inline double learning_rate(const OptimizerConfig& c, std::size_t step) {
  const double s = static_cast<double>(step);
  const double warm = c.warmup_steps == 0 ? 1.0 : std::min(s / static_cast<double>(c.warmup_steps), 1.0);
  return c.base_lr * warm * std::pow(0.5, s / c.decay_half_life);
}

template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<Tensor<T>> m, v;  // parallel to the parameter store
};

template <typename T>
class Adam {
 public:
  Adam(OptimizerConfig cfg, ParameterStore<T>& params) : cfg_(cfg), params_(&params) {
    cfg_.validate();
    for (std::size_t i = 0; i < params.size(); ++i) {
      state_.m.emplace_back(params[i].value.shape());
      state_.v.emplace_back(params[i].value.shape());
    }
  }

  /// Applies one update from the accumulated gradients; returns the
  /// learning rate used.
  double step() {
    const std::size_t t = ++state_.step;
    const double lr = learning_rate(cfg_, t);
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < params_->size(); ++i) {
      auto& p = (*params_)[i];
      auto& m = state_.m[i];
      auto& v = state_.v[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = static_cast<double>(p.grad[k]);
        m[k] = static_cast<T>(b1 * static_cast<double>(m[k]) + (1.0 - b1) * g);
        v[k] = static_cast<T>(b2 * static_cast<double>(v[k]) + (1.0 - b2) * g * g);
        const double mh = static_cast<double>(m[k]) / c1, vh = static_cast<double>(v[k]) / c2;
        p.value[k] = static_cast<T>(static_cast<double>(p.value[k]) - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    return lr;
  }

  const AdamState<T>& state() const noexcept { return state_; }
  AdamState<T>& state() noexcept { return state_; }
  const OptimizerConfig& config() const noexcept { return cfg_; }

 private:
  OptimizerConfig cfg_;
  ParameterStore<T>* params_;
  AdamState<T> state_;
};

// ---------------------------------------------------------------------------
// Sampling, counters

/// Epoch-wise shuffled sampling; the whole state is serializable so a
/// resumed run draws the same batches and noise.
struct Sampler {
  std::mt19937_64 rng;
  std::vector<std::size_t> order;
  std::size_t position = 0;

  Sampler() = default;
  Sampler(std::uint64_t seed, std::size_t n) : rng(seed), order(n) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    position = n;  // shuffle on first draw
  }

  std::size_t next() {
    if (order.empty()) throw UsageError("Sampler: empty dataset");
    if (position == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      position = 0;
    }
    return order[position++];
  }

  std::string rng_state() const {
    std::ostringstream os;
    os << rng;
    return os.str();
  }
  void set_rng_state(const std::string& s) {
    std::istringstream is(s);
    is >> rng;
    if (!is) throw DataError("Sampler: corrupt RNG state");
  }
};

/// Audit of weak-supervision usage during training.
struct TrainCounters {
  std::uint64_t samples_seen = 0;
  std::uint64_t annotated_samples_seen = 0;
  std::uint64_t gt_points_consumed = 0;  // by the point encoder / slot initializer
  std::uint64_t point_loss_skips = 0;
  std::vector<std::uint8_t> gt_images;  // per training image: gt was ever consumed

  std::size_t distinct_gt_images() const {
    return static_cast<std::size_t>(std::count(gt_images.begin(), gt_images.end(), 1));
  }
};

struct StepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double recon = 0.0;
  double point = 0.0;
  double grad_norm = 0.0;
  double param_norm = 0.0;
  std::size_t annotated = 0;  // annotated samples in the batch
};

template <typename T>
double parameter_norm(const ParameterStore<T>& store) {
  double s = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i)
    for (T v : store[i].value.vec()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

template <typename T>
double gradient_norm(const ParameterStore<T>& store) {
  double s = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i)
    for (T v : store[i].grad.vec()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

/// One optimizer step on the batch of `dataset` indices. Per-sample tapes,
/// gradients averaged over the batch in sample order. Throws NumericError
/// (with step, loss components and parameter norm) on a non-finite loss or
/// gradient, before touching the parameters.
template <typename T>
StepLog train_step(SlashModel<T>& model, Adam<T>& opt, const Dataset& dataset,
                   const std::vector<std::size_t>& batch, const LossConfig& loss_cfg, std::mt19937_64& rng,
                   TrainCounters& counters) {
  if (batch.empty()) throw UsageError("train_step: empty batch");
  auto& store = model.parameters();
  store.zero_grad();
  StepLog log;
  log.step = opt.state().step + 1;
  const T scale = T(1) / static_cast<T>(batch.size());
  if (counters.gt_images.size() != dataset.samples.size()) counters.gt_images.assign(dataset.samples.size(), 0);
  const auto fail = [&](const std::string& what) {
    std::ostringstream os;
    os << what << " at step=" << log.step << " loss=" << log.loss << " recon=" << log.recon
       << " point=" << log.point << " grad_norm=" << gradient_norm(store)
       << " param_norm=" << parameter_norm(store);
    return NumericError(os.str());
  };
  for (auto idx : batch) {
    const auto& s = dataset.samples.at(idx);
    const auto image = s.image<T>();
    const auto noise = model.sample_noise(rng);
    std::vector<Point2> pts;
    if (s.annotated) pts = s.annotated_points();
    const std::vector<Point2>* gt = pts.empty() ? nullptr : &pts;
    std::size_t skips = 0;
    Tape<T> tape;
    std::optional<ForwardResult<T>> out;
    std::optional<LossTerms<T>> terms;
    try {
      out.emplace(model.forward(tape, image, noise, Mode::train, gt));
      terms.emplace(total_loss(tape, image, *out, gt, loss_cfg, &skips));
    } catch (const NumericError& e) {
      throw fail(std::string("non-finite training state (") + e.what() + ")");
    }
    tape.backward(ops::affine(terms->total, scale));

    log.loss += static_cast<double>(terms->total.value().item());
    log.recon += static_cast<double>(terms->recon.value().item());
    log.point += static_cast<double>(terms->point.value().item());
    log.annotated += gt ? 1 : 0;
    ++counters.samples_seen;
    counters.annotated_samples_seen += gt ? 1 : 0;
    counters.gt_points_consumed += out->gt_points_consumed;
    counters.point_loss_skips += skips;
    if (out->gt_points_consumed > 0 || terms->point_active) counters.gt_images[idx] = 1;
  }
  const double n = static_cast<double>(batch.size());
  log.loss /= n;
  log.recon /= n;
  log.point /= n;
  log.grad_norm = gradient_norm(store);
  log.param_norm = parameter_norm(store);
  if (!std::isfinite(log.loss) || !std::isfinite(log.grad_norm)) throw fail("non-finite training state");
  log.lr = opt.step();
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  SeedMetrics metrics;
  std::size_t gt_points_consumed = 0;
};

/// Inference-mode evaluation of the first `count` samples (all if 0) with
/// per-sample noise derived from `noise_seed`. Ground-truth points are never
/// passed to the model; the consumption counter is checked.
template <typename T>
EvalResult evaluate(const SlashModel<T>& model, const Dataset& dataset, std::size_t count, std::uint64_t noise_seed,
                    MaskSource source = MaskSource::decoder) {
  const std::size_t n = count == 0 ? dataset.samples.size() : std::min(count, dataset.samples.size());
  if (n == 0) throw UsageError("evaluate: empty dataset");
  const auto& cfg = model.config();
  std::vector<SampleMetrics> per;
  per.reserve(n);
  EvalResult r;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = dataset.samples[i];
    if (s.height != cfg.height || s.width != cfg.width) {
      throw DataError("evaluate: sample " + std::to_string(i) + " is " + std::to_string(s.height) + "x" +
                      std::to_string(s.width) + ", model expects " + std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width));
    }
    std::mt19937_64 rng(mix_seed(noise_seed, i));
    Tape<T> tape(false);
    auto out = model.forward(tape, s.image<T>(), model.sample_noise(rng), Mode::inference);
    r.gt_points_consumed += out.gt_points_consumed;
    per.push_back(evaluate_segmentation(masks_from_model(out, source, cfg.height, cfg.width), s.gt));
  }
  if (r.gt_points_consumed != 0) throw UsageError("evaluate: ground-truth points reached the model at inference");
  r.metrics = average_samples(per);
  return r;
}

// ---------------------------------------------------------------------------
// End-to-end gradient check

struct GradientSuiteOptions {
  double step = 1e-5;
  double floor = 1e-6;    // denominators below this turn the check into an absolute bound
  double jitter = 0.05;   // moves zero-initialized biases off ReLU kinks
  std::size_t kink_retries = 2;
  bool annotate = true;   // train mode with two annotated points
};

/// Central finite differences of the total loss with respect to every
/// parameter of a freshly built 64-bit model for one random image.
inline GradCheckResult end_to_end_gradient_check(const ExperimentConfig& cfg, std::uint64_t seed,
                                                 const GradientSuiteOptions& o = {}) {
  SlashModel<double> m(cfg.model, seed);
  std::mt19937_64 rng(mix_seed(seed, 0x67726164ULL));
  std::uniform_real_distribution<double> u(-o.jitter, o.jitter);
  for (auto* p : m.parameters().all())
    for (auto& v : p->value.vec()) v += u(rng);
  Tensor<double> image({cfg.model.height, cfg.model.width, 3});
  std::uniform_real_distribution<double> pix(0.0, 1.0);
  for (auto& v : image.vec()) v = pix(rng);
  const auto noise = m.sample_noise(rng);
  const std::vector<Point2> gt{{0.3, 0.25}, {0.7, 0.65}};
  const bool points = o.annotate && (cfg.model.ippe_enabled || cfg.model.ws_init_enabled);
  const std::vector<Point2>* g = points ? &gt : nullptr;
  return finite_diff_check<double>(
      [&](Tape<double>& t) {
        auto out = m.forward(t, image, noise, Mode::train, g);
        return total_loss(t, image, out, g, cfg.loss).total;
      },
      m.parameters().all(), o.step, 1, o.floor, o.kink_retries);
}

}  // namespace slash
