// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "slash/gradcheck.hpp"
#include "slash/model.hpp"
#include "test_support.hpp"

using namespace slash;
using slash::testing::jitter_parameters;
using slash::testing::random_image;
using slash::testing::random_tensor;
using slash::testing::tiny_config;

namespace {

// mean(x * m) for a fixed random m, so every output entry matters.
template <typename T>
Var<T> probe(Var<T> x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::mean(ops::mul(x, x.tape->constant(random_tensor<T>(x.shape(), rng))));
}

std::vector<Parameter<double>*> all_params(SlashModel<double>& m) { return m.parameters().all(); }

void expect_rows_sum_to_one(const Tensor<double>& t, double tol) {
  const std::size_t R = t.dim(0), C = t.dim(1);
  for (std::size_t i = 0; i < R; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < C; ++j) s += t[i * C + j];
    ASSERT_NEAR(s, 1.0, tol) << "row " << i;
  }
}

void expect_cols_sum_to_one(const Tensor<double>& t, double tol) {
  const std::size_t R = t.dim(0), C = t.dim(1);
  for (std::size_t j = 0; j < C; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < R; ++i) s += t[i * C + j];
    ASSERT_NEAR(s, 1.0, tol) << "column " << j;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration

TEST(ModelConfig, RejectsInvalidValues) {
  auto c = tiny_config();
  c.num_slots = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.kernel.size = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.kernel.tau = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.ws_init_enabled = true;  // with ippe on
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_kernel_kind("box"), ConfigError);
  for (auto k : {KernelKind::identity, KernelKind::temperature, KernelKind::gaussian, KernelKind::conv,
                 KernelKind::wnconv})
    EXPECT_EQ(parse_kernel_kind(to_string(k)), k);
}

TEST(ModelConfig, SameSeedSameParameters) {
  SlashModel<float> a(tiny_config(), 3), b(tiny_config(), 3), c(tiny_config(), 4);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
    any_diff |= !(a.parameters()[i].value == c.parameters()[i].value);
  }
  EXPECT_TRUE(any_diff);
}

// ---------------------------------------------------------------------------
// encoder

TEST(EncodeImage, ZeroImageGivesFiniteFeatures) {
  SlashModel<double> m(tiny_config(), 1);
  Tape<double> t(false);
  auto f = m.encode_image(t, Tensor<double>({8, 8, 3}));
  EXPECT_EQ(f.shape(), (Shape{64, 16}));
  for (double v : f.value().vec()) ASSERT_TRUE(std::isfinite(v));
}

TEST(EncodeImage, HorizontalFlipChangesFeatures) {
  SlashModel<double> m(tiny_config(), 1);
  Tensor<double> img({8, 8, 3}, 0.5);  // flip-symmetric content
  Tensor<double> flipped = img;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < 3; ++c) flipped[(y * 8 + x) * 3 + c] = img[(y * 8 + 7 - x) * 3 + c];
  Tape<double> t(false);
  auto a = m.encode_image(t, img).value();
  auto b = m.encode_image(t, flipped).value();
  EXPECT_EQ(a, b);  // identical inputs
  // Same content mirrored: feature maps should not be mirror images.
  double diff = 0;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t d = 0; d < 16; ++d)
        diff += std::abs(a[(y * 8 + x) * 16 + d] - a[(y * 8 + 7 - x) * 16 + d]);
  EXPECT_GT(diff, 1e-6);
}

TEST(EncodeImage, FlippedImageGivesDifferentOutput) {
  SlashModel<double> m(tiny_config(), 1);
  std::mt19937_64 rng(2);
  auto img = random_image<double>(8, 8, rng);
  Tensor<double> flipped = img;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < 3; ++c) flipped[(y * 8 + x) * 3 + c] = img[(y * 8 + 7 - x) * 3 + c];
  Tape<double> t(false);
  EXPECT_FALSE(m.encode_image(t, img).value() == m.encode_image(t, flipped).value());
}

TEST(EncodeImage, RejectsWrongShape) {
  SlashModel<double> m(tiny_config(), 1);
  Tape<double> t;
  EXPECT_THROW(m.encode_image(t, Tensor<double>({8, 7, 3})), DimensionError);
}

TEST(EncodeImage, GradientMatchesFiniteDifferences) {
  SlashModel<double> m(tiny_config(), 5);
  jitter_parameters(m.parameters(), 5);
  std::mt19937_64 rng(6);
  auto img = random_image<double>(8, 8, rng);
  std::vector<Parameter<double>*> params;
  for (auto* p : all_params(m))
    if (p->name.rfind("encoder.", 0) == 0) params.push_back(p);
  auto res = finite_diff_check<double>([&](Tape<double>& t) { return probe(m.encode_image(t, img), 9); },
                                       params, 1e-5);
  EXPECT_LE(res.max_rel_error, 1e-3) << res.worst_param << "[" << res.worst_index << "] tape=" << res.worst_tape << " fd=" << res.worst_fd;
  EXPECT_GT(res.checked, 100u);
}

// ---------------------------------------------------------------------------
// attention logits

TEST(AttentionLogits, IdenticalSlotsGiveIdenticalColumns) {
  SlashModel<double> m(tiny_config(), 1);
  std::mt19937_64 rng(3);
  Tape<double> t(false);
  auto feats = m.encode_image(t, random_image<double>(8, 8, rng));
  auto row = random_tensor<double>({1, 16}, rng);
  auto slots = ops::broadcast_rows(t.constant(row.reshaped({16})), 3);
  auto M = m.attention_logits(t, feats, slots).value();
  for (std::size_t p = 0; p < 64; ++p) {
    EXPECT_EQ(M[p * 3 + 0], M[p * 3 + 1]);
    EXPECT_EQ(M[p * 3 + 0], M[p * 3 + 2]);
  }
}

TEST(AttentionLogits, HandArithmeticWithUnitDimension) {
  Tape<double> t;
  auto k = t.constant(Tensor<double>::from_rows({{1}, {2}}));
  auto q = t.constant(Tensor<double>::from_rows({{3}, {4}}));
  EXPECT_EQ(SlashModel<double>::scaled_logits(k, q).value(), Tensor<double>::from_rows({{3, 4}, {6, 8}}));
}

TEST(AttentionLogits, MatchesScalarRecomputation) {
  SlashModel<double> m(tiny_config(), 11);
  std::mt19937_64 rng(12);
  Tape<double> t(false);
  auto feats = m.encode_image(t, random_image<double>(8, 8, rng));
  auto slots_val = random_tensor<double>({3, 16}, rng);
  auto M = m.attention_logits(t, feats, t.constant(slots_val)).value();

  auto& P = m.parameters();
  auto norm = [](const Tensor<double>& x, std::size_t r, const Tensor<double>& g, const Tensor<double>& b) {
    const std::size_t n = x.dim(1);
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < n; ++j) mean += x[r * n + j];
    mean /= n;
    for (std::size_t j = 0; j < n; ++j) var += (x[r * n + j] - mean) * (x[r * n + j] - mean);
    var /= n;
    std::vector<double> out(n);
    for (std::size_t j = 0; j < n; ++j) out[j] = (x[r * n + j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j];
    return out;
  };
  const auto& F = feats.value();
  const auto& Wk = P.get("attention.k.weight").value;
  const auto& Wq = P.get("attention.q.weight").value;
  for (std::size_t p = 0; p < 64; ++p) {
    auto xn = norm(F, p, P.get("attention.norm_inputs.gain").value, P.get("attention.norm_inputs.bias").value);
    for (std::size_t j = 0; j < 3; ++j) {
      auto sn = norm(slots_val, j, P.get("attention.norm_slots.gain").value,
                     P.get("attention.norm_slots.bias").value);
      double acc = 0;
      for (std::size_t d = 0; d < 16; ++d) {
        double kd = 0, qd = 0;
        for (std::size_t i = 0; i < 16; ++i) kd += xn[i] * Wk[i * 16 + d];
        for (std::size_t i = 0; i < 16; ++i) qd += sn[i] * Wq[i * 16 + d];
        acc += kd * qd;
      }
      EXPECT_NEAR(M[p * 3 + j], acc / 4.0, 1e-5);
    }
  }
}

// ---------------------------------------------------------------------------
// refining kernel

TEST(ArkKernel, WnconvEqualRawWeightsGiveUniformKernel) {
  SlashModel<double> m(tiny_config(), 1);
  m.parameters().get("ark.raw").value.fill(0.7);
  Tape<double> t;
  auto k = m.ark_effective_kernel(t).value();
  for (double v : k.vec()) EXPECT_NEAR(v, 1.0 / 9.0, 1e-15);
}

TEST(ArkKernel, IdentityIsDeltaAndReproducesInput) {
  auto c = tiny_config();
  c.kernel.kind = KernelKind::identity;
  SlashModel<double> m(c, 1);
  Tape<double> t;
  auto k = m.ark_effective_kernel(t);
  EXPECT_EQ(k.value(), delta_kernel<double>(3));
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({8, 8}, rng);
  EXPECT_EQ(ops::conv2d_single(t.constant(x), k).value(), x);
}

TEST(ArkKernel, TemperatureHasNoKernel) {
  auto c = tiny_config();
  c.kernel.kind = KernelKind::temperature;
  SlashModel<double> m(c, 1);
  Tape<double> t;
  EXPECT_THROW(m.ark_effective_kernel(t), UsageError);
}

TEST(ArkKernel, GaussianIsFixedAndNormalized) {
  auto c = tiny_config();
  c.kernel.kind = KernelKind::gaussian;
  c.kernel.size = 5;
  SlashModel<double> m(c, 1);
  EXPECT_FALSE(m.parameters().contains("ark.raw"));
  Tape<double> t;
  auto k = m.ark_effective_kernel(t);
  EXPECT_FALSE(k.requires_grad());
  EXPECT_NEAR(std::accumulate(k.value().vec().begin(), k.value().vec().end(), 0.0), 1.0, 1e-12);
  EXPECT_GT(k.value()[12], k.value()[0]);
}

TEST(ArkApply, IdentityAndTemperatureReturnLogitsUnchanged) {
  std::mt19937_64 rng(2);
  auto M = random_tensor<double>({64, 3}, rng);
  for (auto kind : {KernelKind::identity, KernelKind::temperature}) {
    auto c = tiny_config();
    c.kernel.kind = kind;
    SlashModel<double> m(c, 1);
    Tape<double> t;
    EXPECT_EQ(m.ark_apply(t, t.constant(M)).value(), M);
  }
}

TEST(ArkApply, ConstantMapUnchangedBySimplexKernel) {
  auto c = tiny_config();
  SlashModel<double> m(c, 1);
  std::mt19937_64 rng(4);
  m.parameters().get("ark.raw").value = random_tensor<double>({3, 3}, rng, -2, 2);
  Tensor<double> M({64, 3});
  for (std::size_t p = 0; p < 64; ++p)
    for (std::size_t j = 0; j < 3; ++j) M[p * 3 + j] = 0.5 + static_cast<double>(j);
  Tape<double> t;
  auto out = m.ark_apply(t, t.constant(M)).value();
  for (std::size_t i = 0; i < M.size(); ++i) EXPECT_NEAR(out[i], M[i], 1e-14);
}

TEST(ArkApply, SpikeSpreadsToNeighborhoodUnderUniformKernel) {
  SlashModel<double> m(tiny_config(), 1);  // wnconv, zero raw weights -> 3x3 uniform
  Tensor<double> M({64, 3});
  const std::size_t sy = 3, sx = 4;
  M[(sy * 8 + sx) * 3 + 1] = 9.0;
  Tape<double> t;
  auto out = m.ark_apply(t, t.constant(M)).value();
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      const bool near = std::abs(static_cast<long>(y) - 3) <= 1 && std::abs(static_cast<long>(x) - 4) <= 1;
      EXPECT_NEAR(out[(y * 8 + x) * 3 + 1], near ? 1.0 : 0.0, 1e-14) << y << "," << x;
      EXPECT_EQ(out[(y * 8 + x) * 3 + 0], 0.0);
    }
}

TEST(ArkApply, RejectsWrongShape) {
  SlashModel<double> m(tiny_config(), 1);
  Tape<double> t;
  EXPECT_THROW(m.ark_apply(t, t.constant(Tensor<double>({63, 3}))), DimensionError);
}

// ---------------------------------------------------------------------------
// normalization and update

TEST(AttentionNormalize, EqualLogitsSplitEvenly) {
  SlashModel<double> m([] { auto c = tiny_config(); c.num_slots = 2; return c; }(), 1);
  Tape<double> t;
  auto [attn, w] = m.attention_normalize(t.constant(Tensor<double>({64, 2}, 0.3)), 1.0);
  for (double v : attn.value().vec()) EXPECT_DOUBLE_EQ(v, 0.5);
  expect_cols_sum_to_one(w.value(), 1e-12);
}

TEST(AttentionNormalize, DominantSlotSaturates) {
  SlashModel<double> m(tiny_config(), 1);
  std::mt19937_64 rng(5);
  auto M = random_tensor<double>({64, 3}, rng);
  for (std::size_t p = 0; p < 64; ++p) M[p * 3 + 2] += 10.0;
  Tape<double> t;
  auto [attn, w] = m.attention_normalize(t.constant(M), 1.0);
  for (std::size_t p = 0; p < 64; ++p) EXPECT_GT(attn.value()[p * 3 + 2], 0.999);
}

TEST(AttentionNormalize, RandomFieldSumsToOne) {
  SlashModel<double> m(tiny_config(), 1);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> t;
    auto [attn, w] = m.attention_normalize(t.constant(random_tensor<double>({64, 3}, rng, -5, 5)), 0.5 + trial % 3);
    expect_rows_sum_to_one(attn.value(), 1e-12);
    expect_cols_sum_to_one(w.value(), 1e-12);
  }
}

TEST(SlotUpdate, PointMassSelectsValueRow) {
  std::mt19937_64 rng(7);
  Tape<double> t;
  auto values = t.constant(random_tensor<double>({64, 16}, rng));
  Tensor<double> W({64, 3});
  W[10 * 3 + 1] = 1.0;
  W[0 * 3 + 0] = 1.0;
  W[63 * 3 + 2] = 1.0;
  auto u = SlashModel<double>::aggregate(t.constant(W), values).value();
  for (std::size_t d = 0; d < 16; ++d) {
    EXPECT_EQ(u[1 * 16 + d], values.value()[10 * 16 + d]);
    EXPECT_EQ(u[0 * 16 + d], values.value()[0 * 16 + d]);
    EXPECT_EQ(u[2 * 16 + d], values.value()[63 * 16 + d]);
  }
}

TEST(SlotUpdate, UniformWeightsGiveMeanOfValues) {
  std::mt19937_64 rng(8);
  Tape<double> t;
  auto values = random_tensor<double>({64, 16}, rng);
  SlashModel<double> m(tiny_config(), 1);
  auto [attn, w] = m.attention_normalize(t.constant(Tensor<double>({64, 3})), 1.0);
  auto u = SlashModel<double>::aggregate(w, t.constant(values)).value();
  for (std::size_t d = 0; d < 16; ++d) {
    double mean = 0;
    for (std::size_t p = 0; p < 64; ++p) mean += values[p * 16 + d];
    mean /= 64;
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(u[k * 16 + d], mean, 1e-12);
  }
}

TEST(SlotUpdate, GradientMatchesFiniteDifferences) {
  SlashModel<double> m(tiny_config(), 13);
  jitter_parameters(m.parameters(), 13);
  std::mt19937_64 rng(14);
  auto slots = random_tensor<double>({3, 16}, rng);
  auto values = random_tensor<double>({64, 16}, rng);
  auto logits = random_tensor<double>({64, 3}, rng);
  std::vector<Parameter<double>*> params;
  for (auto* p : all_params(m))
    if (p->name.rfind("attention.", 0) == 0 && p->name.find("norm_inputs") == std::string::npos &&
        p->name.find(".k.") == std::string::npos && p->name.find(".q.") == std::string::npos &&
        p->name.find(".v.") == std::string::npos)
      params.push_back(p);
  auto res = finite_diff_check<double>(
      [&](Tape<double>& t) {
        auto [attn, w] = m.attention_normalize(t.constant(logits), 1.0);
        return probe(m.slot_update(t, t.constant(slots), t.constant(values), w), 15);
      },
      params, 1e-5);
  EXPECT_LE(res.max_rel_error, 1e-3) << res.worst_param << "[" << res.worst_index << "] tape=" << res.worst_tape << " fd=" << res.worst_fd;
  EXPECT_GT(res.checked, 100u);
}

// ---------------------------------------------------------------------------
// point predictor / encoder

TEST(Ippe, ZeroSlotReceivesEncoderOutputOfCenterPoint) {
  SlashModel<double> m(tiny_config(), 2);
  Tape<double> t;
  // Zero slots and zero-initialized biases put every prediction at sigmoid(0).
  auto r = m.ippe_step(t, t.constant(Tensor<double>({3, 16})), nullptr, Mode::inference);
  for (double v : r.points.value().vec()) EXPECT_EQ(v, 0.5);
  auto enc = m.encode_points(t, Tensor<double>({3, 2}, 0.5)).value();
  EXPECT_EQ(r.slots.value(), enc);
}

TEST(Ippe, WithoutGtEncoderConsumesPredictions) {
  SlashModel<double> m(tiny_config(), 3);
  std::mt19937_64 rng(3);
  auto slots = random_tensor<double>({3, 16}, rng);
  Tape<double> t;
  auto r = m.ippe_step(t, t.constant(slots), nullptr, Mode::train);
  EXPECT_EQ(std::count(r.routed.begin(), r.routed.end(), 1), 0);
  auto expect = ops::add(t.constant(slots), m.encode_points(t, r.points.value())).value();
  EXPECT_EQ(r.slots.value(), expect);
  EXPECT_FALSE(r.slots.value() == slots);
}

TEST(Ippe, GtRoutedOnlyToMatchedSlots) {
  SlashModel<double> m(tiny_config(), 4);
  std::mt19937_64 rng(4);
  auto slots = random_tensor<double>({3, 16}, rng);
  Tape<double> t;
  auto pred = m.ippe_step(t, t.constant(slots), nullptr, Mode::train).points.value();
  // Place each gt point next to a distinct prediction so the matching is forced.
  std::vector<Point2> gt{{pred[2 * 2] + 0.01, pred[2 * 2 + 1]}, {pred[0], pred[1] - 0.01}};
  auto r = m.ippe_step(t, t.constant(slots), &gt, Mode::train);
  EXPECT_EQ(r.matched_gt, (std::vector<int>{1, -1, 0}));
  EXPECT_EQ(r.routed, (std::vector<std::uint8_t>{1, 0, 1}));
  Tensor<double> enc_in = pred;
  enc_in[0] = gt[1][0];
  enc_in[1] = gt[1][1];
  enc_in[4] = gt[0][0];
  enc_in[5] = gt[0][1];
  auto expect = ops::add(t.constant(slots), m.encode_points(t, enc_in)).value();
  EXPECT_EQ(r.slots.value(), expect);
}

TEST(Ippe, GtAtInferenceIsRejected) {
  SlashModel<double> m(tiny_config(), 4);
  Tape<double> t;
  std::vector<Point2> gt{{0.5, 0.5}};
  EXPECT_THROW(m.ippe_step(t, t.constant(Tensor<double>({3, 16})), &gt, Mode::inference), UsageError);
  std::mt19937_64 rng(1);
  EXPECT_THROW(m.forward(t, random_image<double>(8, 8, rng), m.sample_noise(rng), Mode::inference, &gt),
               UsageError);
}

TEST(Ippe, TooManyGtPointsIsConfigError) {
  SlashModel<double> m(tiny_config(), 4);
  Tape<double> t;
  std::vector<Point2> gt{{0.1, 0.1}, {0.2, 0.2}, {0.3, 0.3}, {0.4, 0.4}};
  EXPECT_THROW(m.ippe_step(t, t.constant(Tensor<double>({3, 16})), &gt, Mode::train), ConfigError);
}

TEST(Ippe, DisabledModuleRejectsStep) {
  auto c = tiny_config();
  c.ippe_enabled = false;
  SlashModel<double> m(c, 4);
  Tape<double> t;
  EXPECT_THROW(m.ippe_step(t, t.constant(Tensor<double>({3, 16})), nullptr, Mode::train), UsageError);
}

// ---------------------------------------------------------------------------
// decoder

TEST(Decoder, IdenticalSlotsSplitMixtureEvenly) {
  SlashModel<double> m(tiny_config(), 5);
  std::mt19937_64 rng(5);
  auto row = random_tensor<double>({16}, rng);
  Tape<double> t;
  auto out = m.decode_slots(t, ops::broadcast_rows(t.constant(row), 3));
  const auto& rgb = out.rgb.value();
  for (std::size_t i = 0; i < 64 * 3; ++i) {
    EXPECT_EQ(rgb[i], rgb[64 * 3 + i]);
    EXPECT_EQ(rgb[i], rgb[2 * 64 * 3 + i]);
  }
  for (double v : out.mixture.value().vec()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Decoder, MixtureSumsToOneAndReconstructionComposites) {
  SlashModel<double> m(tiny_config(), 6);
  std::mt19937_64 rng(6);
  Tape<double> t;
  auto out = m.decode_slots(t, t.constant(random_tensor<double>({3, 16}, rng)));
  expect_rows_sum_to_one(out.mixture.value(), 1e-12);
  const auto& mix = out.mixture.value();
  const auto& rgb = out.rgb.value();
  for (std::size_t p = 0; p < 64; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += mix[p * 3 + k] * rgb[k * 192 + p * 3 + c];
      EXPECT_NEAR(out.reconstruction.value()[p * 3 + c], s, 1e-12);
    }
}

TEST(Decoder, GradientMatchesFiniteDifferences) {
  SlashModel<double> m(tiny_config(), 7);
  jitter_parameters(m.parameters(), 7);
  std::mt19937_64 rng(7);
  auto slots = random_tensor<double>({3, 16}, rng);
  std::vector<Parameter<double>*> params;
  for (auto* p : all_params(m))
    if (p->name.rfind("decoder.", 0) == 0) params.push_back(p);
  auto res = finite_diff_check<double>(
      [&](Tape<double>& t) { return probe(m.decode_slots(t, t.constant(slots)).reconstruction, 3); }, params,
      1e-5);
  EXPECT_LE(res.max_rel_error, 1e-3) << res.worst_param << "[" << res.worst_index << "] tape=" << res.worst_tape << " fd=" << res.worst_fd;
}

// ---------------------------------------------------------------------------
// full forward

TEST(Forward, IterationPrefixIsDeterministic) {
  auto c1 = tiny_config();
  c1.iterations = 1;
  auto c2 = tiny_config();
  c2.iterations = 2;
  SlashModel<double> m1(c1, 8), m2(c2, 8);
  std::mt19937_64 rng(8);
  auto img = random_image<double>(8, 8, rng);
  auto noise = m1.sample_noise(rng);
  Tape<double> t1(false), t2(false);
  auto r1 = m1.forward(t1, img, noise, Mode::inference);
  auto r2 = m2.forward(t2, img, noise, Mode::inference);
  EXPECT_EQ(r1.iterations[0].field.logits.value(), r2.iterations[0].field.logits.value());
  EXPECT_EQ(r1.iterations[0].field.attn.value(), r2.iterations[0].field.attn.value());
  EXPECT_EQ(r1.iterations[0].slots.value(), r2.iterations[0].slots.value());
  EXPECT_EQ(r1.iterations[0].ippe->points.value(), r2.iterations[0].ippe->points.value());
}

TEST(Forward, ReducesToPlainSlotAttention) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SlashModel<float> m(ModelConfig::plain(tiny_config()), seed);
    std::mt19937_64 rng(seed + 100);
    auto img = random_image<float>(8, 8, rng);
    auto noise = m.sample_noise(rng);
    Tape<float> ta(false), tb(false);
    auto a = m.forward(ta, img, noise, Mode::inference);
    auto b = plain_slot_attention_forward(m, tb, img, noise);
    EXPECT_EQ(a.slots.value(), b.slots.value());
    EXPECT_EQ(a.decoded.reconstruction.value(), b.decoded.reconstruction.value());
    for (std::size_t i = 0; i < a.iterations.size(); ++i)
      EXPECT_EQ(a.iterations[i].field.attn.value(), b.iterations[i].field.attn.value());
  }
}

TEST(Forward, InvariantsHoldAtSixteenPixels) {
  auto c = tiny_config();
  c.height = c.width = 16;
  c.num_slots = 4;
  c.iterations = 3;
  SlashModel<double> m(c, 9);
  std::mt19937_64 rng(9);
  Tape<double> t(false);
  auto r = m.forward(t, random_image<double>(16, 16, rng), m.sample_noise(rng), Mode::inference);
  ASSERT_EQ(r.iterations.size(), 3u);
  for (const auto& it : r.iterations) {
    EXPECT_EQ(it.field.logits.shape(), (Shape{256, 4}));
    expect_rows_sum_to_one(it.field.attn.value(), 1e-5);
    expect_cols_sum_to_one(it.field.weights.value(), 1e-5);
    EXPECT_EQ(it.slots.shape(), (Shape{4, 16}));
    ASSERT_TRUE(it.ippe.has_value());
    for (double v : it.ippe->points.value().vec()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  }
  expect_rows_sum_to_one(r.decoded.mixture.value(), 1e-5);
  EXPECT_EQ(r.decoded.reconstruction.shape(), (Shape{256, 3}));
  EXPECT_EQ(r.gt_points_consumed, 0u);
}

TEST(Forward, FinalIterationOnlyIppe) {
  auto c = tiny_config();
  c.ippe_every_iteration = false;
  SlashModel<double> m(c, 9);
  std::mt19937_64 rng(9);
  Tape<double> t(false);
  auto r = m.forward(t, random_image<double>(8, 8, rng), m.sample_noise(rng), Mode::inference);
  EXPECT_FALSE(r.iterations[0].ippe.has_value());
  EXPECT_TRUE(r.iterations[1].ippe.has_value());
}

TEST(Forward, GtConsumptionIsCountedInTraining) {
  SlashModel<double> m(tiny_config(), 10);
  std::mt19937_64 rng(10);
  std::vector<Point2> gt{{0.2, 0.3}, {0.7, 0.6}};
  Tape<double> t(false);
  auto r = m.forward(t, random_image<double>(8, 8, rng), m.sample_noise(rng), Mode::train, &gt);
  EXPECT_EQ(r.gt_points_consumed, 4u);  // 2 points x 2 iterations
}

TEST(Forward, PermutingNoiseRowsPermutesOutputs) {
  for (auto kind : {KernelKind::wnconv, KernelKind::identity}) {
    auto c = tiny_config();
    c.kernel.kind = kind;
    SlashModel<float> m(c, 11);
    std::mt19937_64 rng(11);
    auto img = random_image<float>(8, 8, rng);
    auto noise = m.sample_noise(rng);
    const std::vector<std::size_t> perm{2, 0, 1};
    Tensor<float> permuted(noise.shape());
    for (std::size_t k = 0; k < 3; ++k)
      std::copy_n(&noise[perm[k] * 16], 16, &permuted[k * 16]);
    Tape<float> ta(false), tb(false);
    auto a = m.forward(ta, img, noise, Mode::inference);
    auto b = m.forward(tb, img, permuted, Mode::inference);
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t d = 0; d < 16; ++d)
        ASSERT_EQ(b.slots.value()[k * 16 + d], a.slots.value()[perm[k] * 16 + d]);
      for (std::size_t p = 0; p < 64; ++p) {
        ASSERT_EQ(b.iterations.back().field.attn.value()[p * 3 + k],
                  a.iterations.back().field.attn.value()[p * 3 + perm[k]]);
        ASSERT_EQ(b.decoded.mixture.value()[p * 3 + k], a.decoded.mixture.value()[p * 3 + perm[k]]);
      }
      for (std::size_t i = 0; i < 192; ++i)
        ASSERT_EQ(b.decoded.rgb.value()[k * 192 + i], a.decoded.rgb.value()[perm[k] * 192 + i]);
    }
    EXPECT_EQ(a.decoded.reconstruction.value(), b.decoded.reconstruction.value());
  }
}

TEST(Forward, WeakSupervisionInitSeedsLeadingSlots) {
  auto c = tiny_config();
  c.ippe_enabled = false;
  c.ws_init_enabled = true;
  SlashModel<double> m(c, 12);
  std::mt19937_64 rng(12);
  auto noise = m.sample_noise(rng);
  std::vector<Point2> gt{{0.25, 0.75}};
  Tape<double> t(false);
  auto with = m.initial_slots(t, noise, &gt, Mode::train).value();
  auto without = m.initial_slots(t, noise, nullptr, Mode::train).value();
  for (std::size_t d = 0; d < 16; ++d) EXPECT_NE(with[d], without[d]);
  for (std::size_t i = 16; i < 48; ++i) EXPECT_EQ(with[i], without[i]);  // surplus stays Gaussian
  EXPECT_THROW(m.initial_slots(t, noise, &gt, Mode::inference), UsageError);
}

TEST(Forward, GaussianInitUsesMeanAndScale) {
  SlashModel<double> m(tiny_config(), 13);
  auto& P = m.parameters();
  std::mt19937_64 rng(13);
  auto noise = m.sample_noise(rng);
  Tape<double> t(false);
  auto s = m.initial_slots(t, noise, nullptr, Mode::inference).value();
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t d = 0; d < 16; ++d)
      EXPECT_NEAR(s[k * 16 + d],
                  P.get("slots.mu").value[d] + std::exp(P.get("slots.log_sigma").value[d]) * noise[k * 16 + d],
                  1e-15);
}

// ---------------------------------------------------------------------------
// masks

TEST(Masks, DominantSlotGivesSingleSegment) {
  Tensor<double> s({16, 3}, 0.1);
  for (std::size_t p = 0; p < 16; ++p) s[p * 3 + 1] = 0.8;
  auto seg = argmax_segmentation(s, 4, 4);
  for (int l : seg.labels) EXPECT_EQ(l, 1);
  EXPECT_EQ(seg.num_segments(), 1u);
}

TEST(Masks, TiesGoToLowestSlot) {
  Tensor<double> s({1, 7});
  s[2] = 0.4;
  s[5] = 0.4;
  EXPECT_EQ(argmax_segmentation(s, 1, 1).labels[0], 2);
}

TEST(Masks, MatchesScanOracle) {
  std::mt19937_64 rng(14);
  std::uniform_int_distribution<int> d(0, 3);  // frequent ties
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> s({36, 5});
    for (auto& v : s.vec()) v = d(rng);
    auto seg = argmax_segmentation(s, 6, 6);
    for (std::size_t p = 0; p < 36; ++p) {
      const auto* row = &s[p * 5];
      EXPECT_EQ(seg.labels[p], std::max_element(row, row + 5) - row);
    }
  }
}

TEST(Masks, SourcesSelectMixtureOrAttention) {
  SlashModel<double> m(tiny_config(), 15);
  std::mt19937_64 rng(15);
  Tape<double> t(false);
  auto r = m.forward(t, random_image<double>(8, 8, rng), m.sample_noise(rng), Mode::inference);
  EXPECT_EQ(masks_from_model(r, MaskSource::decoder, 8, 8).labels,
            argmax_segmentation(r.decoded.mixture.value(), 8, 8).labels);
  EXPECT_EQ(masks_from_model(r, MaskSource::attention, 8, 8).labels,
            argmax_segmentation(r.iterations.back().field.attn.value(), 8, 8).labels);
}
