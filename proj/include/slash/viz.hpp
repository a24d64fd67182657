// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "slash/model.hpp"
#include "slash/png_io.hpp"

// Per-sample visualization grid:
//
//   row 0   input | segmentation | points after iteration 1..T (IPPE only)
//   row 1   slot logit maps before the refining kernel, one per slot
//   row 2   the same maps after the kernel
//
// Each slot's before/after pair shares one gray-scale normalization.

namespace slash {

template <typename T>
struct VizPanels {
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor<T> image;                            // [H×W×3]
  std::vector<Tensor<T>> before;              // per slot, [H×W], last iteration
  std::vector<Tensor<T>> after;               // per slot, [H×W]
  std::vector<std::vector<Point2>> points;    // per iteration, K predictions
  Segmentation segmentation;
};

/// Inference forward of one image; panels come from the last iteration.
template <typename T>
VizPanels<T> collect_viz(const SlashModel<T>& model, const Tensor<T>& image, std::uint64_t noise_seed,
                         MaskSource source = MaskSource::decoder) {
  const auto& c = model.config();
  std::mt19937_64 rng(noise_seed);
  Tape<T> tape(false);
  auto out = model.forward(tape, image, model.sample_noise(rng), Mode::inference);
  VizPanels<T> v;
  v.height = c.height;
  v.width = c.width;
  v.image = image;
  const auto& f = out.iterations.back().field;
  const auto& lb = f.logits.value();
  const auto& la = f.refined.value();
  const std::size_t K = c.num_slots, HW = c.pixels();
  for (std::size_t k = 0; k < K; ++k) {
    Tensor<T> b({c.height, c.width}), a({c.height, c.width});
    for (std::size_t p = 0; p < HW; ++p) {
      b[p] = lb[p * K + k];
      a[p] = la[p * K + k];
    }
    v.before.push_back(std::move(b));
    v.after.push_back(std::move(a));
  }
  for (const auto& it : out.iterations) {
    if (!it.ippe) continue;
    const auto& pts = it.ippe->points.value();
    std::vector<Point2> row(K);
    for (std::size_t k = 0; k < K; ++k)
      row[k] = {static_cast<double>(pts[k * 2]), static_cast<double>(pts[k * 2 + 1])};
    v.points.push_back(std::move(row));
  }
  v.segmentation = masks_from_model(out, source, c.height, c.width);
  return v;
}

namespace detail {

inline std::array<std::uint8_t, 3> palette(std::size_t i) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 12> colors{{{230, 25, 75},
                                                                       {60, 180, 75},
                                                                       {255, 225, 25},
                                                                       {0, 130, 200},
                                                                       {245, 130, 48},
                                                                       {145, 30, 180},
                                                                       {70, 240, 240},
                                                                       {240, 50, 230},
                                                                       {210, 245, 60},
                                                                       {250, 190, 212},
                                                                       {0, 128, 128},
                                                                       {170, 110, 40}}};
  return colors[i % colors.size()];
}

class Canvas {
 public:
  Canvas(std::size_t w, std::size_t h) { img_ = Image8{w, h, std::vector<std::uint8_t>(w * h * 3, 255)}; }
  void set(std::size_t x, std::size_t y, std::array<std::uint8_t, 3> c) {
    if (x >= img_.width || y >= img_.height) return;
    std::copy(c.begin(), c.end(), img_.rgb.begin() + static_cast<std::ptrdiff_t>((y * img_.width + x) * 3));
  }
  Image8 take() { return std::move(img_); }

 private:
  Image8 img_;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Renders the grid with nearest-neighbour upscaling by `scale`.
template <typename T>
Image8 render_viz(const VizPanels<T>& v, std::size_t scale = 4) {
  if (scale < 1) throw UsageError("render_viz: scale must be >= 1");
  const std::size_t H = v.height, W = v.width, K = v.before.size();
  const std::size_t ph = H * scale, pw = W * scale, gap = scale;
  const std::size_t cols = std::max(K, 2 + v.points.size());
  detail::Canvas cv(cols * pw + (cols + 1) * gap, 3 * ph + 4 * gap);
  auto origin = [&](std::size_t row, std::size_t col) {
    return std::pair<std::size_t, std::size_t>{gap + col * (pw + gap), gap + row * (ph + gap)};
  };
  auto fill = [&](std::size_t row, std::size_t col, auto&& color_at) {
    const auto [ox, oy] = origin(row, col);
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x) cv.set(ox + x, oy + y, color_at(y / scale, x / scale));
  };
  auto pixel = [&](std::size_t y, std::size_t x, double dim) {
    std::array<std::uint8_t, 3> c{};
    for (std::size_t ch = 0; ch < 3; ++ch)
      c[ch] = detail::to_byte(dim * static_cast<double>(v.image[(y * W + x) * 3 + ch]));
    return c;
  };

  fill(0, 0, [&](std::size_t y, std::size_t x) { return pixel(y, x, 1.0); });
  fill(0, 1, [&](std::size_t y, std::size_t x) {
    return detail::palette(static_cast<std::size_t>(v.segmentation.labels[y * W + x]));
  });
  for (std::size_t t = 0; t < v.points.size(); ++t) {
    fill(0, 2 + t, [&](std::size_t y, std::size_t x) { return pixel(y, x, 0.5); });
    const auto [ox, oy] = origin(0, 2 + t);
    for (std::size_t k = 0; k < v.points[t].size(); ++k) {
      const auto& p = v.points[t][k];
      const auto cx = static_cast<long>(std::lround(std::clamp(p[0], 0.0, 1.0) * static_cast<double>(pw - 1)));
      const auto cy = static_cast<long>(std::lround(std::clamp(p[1], 0.0, 1.0) * static_cast<double>(ph - 1)));
      const long arm = static_cast<long>(scale) + 1;
      for (long d = -arm; d <= arm; ++d) {
        if (cx + d >= 0 && cx + d < static_cast<long>(pw))
          cv.set(ox + static_cast<std::size_t>(cx + d), oy + static_cast<std::size_t>(cy), detail::palette(k));
        if (cy + d >= 0 && cy + d < static_cast<long>(ph))
          cv.set(ox + static_cast<std::size_t>(cx), oy + static_cast<std::size_t>(cy + d), detail::palette(k));
      }
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto* m : {&v.before[k], &v.after[k]})
      for (T x : m->vec()) {
        lo = std::min(lo, static_cast<double>(x));
        hi = std::max(hi, static_cast<double>(x));
      }
    const double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t row = 1; row <= 2; ++row) {
      const auto& m = row == 1 ? v.before[k] : v.after[k];
      fill(row, k, [&](std::size_t y, std::size_t x) {
        const auto g = detail::to_byte((static_cast<double>(m[y * W + x]) - lo) / span);
        return std::array<std::uint8_t, 3>{g, g, g};
      });
    }
  }
  return cv.take();
}

}  // namespace slash
