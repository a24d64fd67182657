// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "slash/error.hpp"
#include "slash/metrics.hpp"
#include "slash/tensor.hpp"

// Procedural multi-object sprite scenes, rasterization with instance
// ground truth, and the weak semi-supervision annotation sampler.

namespace slash {

enum class ShapeKind { circle, square, triangle };
enum class Difficulty { flat, stripes, noise, texture };

inline std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::flat: return "flat";
    case Difficulty::stripes: return "stripes";
    case Difficulty::noise: return "noise";
    case Difficulty::texture: return "texture";
  }
  return "?";
}

inline Difficulty parse_difficulty(const std::string& s) {
  if (s == "flat") return Difficulty::flat;
  if (s == "stripes") return Difficulty::stripes;
  if (s == "noise") return Difficulty::noise;
  if (s == "texture") return Difficulty::texture;
  throw ConfigError("unknown difficulty '" + s + "' (expected flat|stripes|noise|texture)");
}

using Rgb8 = std::array<std::uint8_t, 3>;
using Point2 = std::array<double, 2>;  // (x, y) normalized to [0,1]

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Rgb8 color{};
  double size = 0.08;  // half-extent as a fraction of the shorter image side
  double cx = 0.5;
  double cy = 0.5;
};

struct BackgroundSpec {
  Difficulty kind = Difficulty::flat;
  Rgb8 color_a{};
  Rgb8 color_b{};
  double period = 0.1;     // stripes: period as a fraction of the image width
  double angle = 0.0;      // stripes: radians
  double amplitude = 0.0;  // noise: per-channel amplitude in [0,1]
  std::uint64_t pattern_seed = 0;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  BackgroundSpec background;
  std::uint64_t seed = 0;
};

struct GenerationOptions {
  std::size_t min_objects = 3;
  std::size_t max_objects = 6;
  double min_spacing = 0.15;
  double min_size = 0.06;
  double max_size = 0.10;
  std::size_t max_retries = 1000;
};

/// splitmix64, used to derive independent per-sample seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace detail {

inline Rgb8 random_color(std::mt19937_64& rng, int lo, int hi) {
  std::uniform_int_distribution<int> d(lo, hi);
  return Rgb8{static_cast<std::uint8_t>(d(rng)), static_cast<std::uint8_t>(d(rng)),
              static_cast<std::uint8_t>(d(rng))};
}

}  // namespace detail

inline SceneSpec generate_scene(std::uint64_t seed, Difficulty difficulty,
                                const GenerationOptions& opt = {}) {
  if (opt.min_objects > opt.max_objects) throw ConfigError("min_objects > max_objects");
  std::mt19937_64 rng(seed);
  SceneSpec spec;
  spec.seed = seed;

  auto& bg = spec.background;
  bg.kind = difficulty;
  bg.color_a = detail::random_color(rng, 40, 215);
  bg.color_b = detail::random_color(rng, 40, 215);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  switch (difficulty) {
    case Difficulty::flat:
      bg.color_b = bg.color_a;
      break;
    case Difficulty::stripes:
      bg.period = 0.08 + 0.12 * unit(rng);
      bg.angle = 3.141592653589793 * unit(rng);
      break;
    case Difficulty::noise:
      bg.amplitude = 0.15 + 0.15 * unit(rng);
      bg.pattern_seed = rng();
      break;
    case Difficulty::texture:
      bg.pattern_seed = rng();
      break;
  }

  std::uniform_int_distribution<std::size_t> count(opt.min_objects, opt.max_objects);
  const std::size_t n = count(rng);
  std::uniform_real_distribution<double> pos(0.1, 0.9);
  std::uniform_real_distribution<double> size(opt.min_size, opt.max_size);
  std::uniform_int_distribution<int> shape(0, 2);
  std::size_t retries = 0;
  while (spec.objects.size() < n) {
    SceneObject o;
    o.cx = pos(rng);
    o.cy = pos(rng);
    const bool ok = std::all_of(spec.objects.begin(), spec.objects.end(), [&](const SceneObject& p) {
      return std::hypot(p.cx - o.cx, p.cy - o.cy) >= opt.min_spacing;
    });
    if (!ok) {
      if (++retries > opt.max_retries) {
        throw DataError("generate_scene: spacing constraint unsatisfiable after " +
                        std::to_string(opt.max_retries) + " retries (seed " + std::to_string(seed) + ")");
      }
      continue;
    }
    o.shape = static_cast<ShapeKind>(shape(rng));
    o.size = size(rng);
    o.color = detail::random_color(rng, 0, 255);
    spec.objects.push_back(o);
  }
  return spec;
}

struct RenderedSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;  // H*W*3
  Segmentation gt;                // 0 = background, 1..n objects
  std::vector<Point2> gt_points;  // gt_points[i] belongs to segment i+1
  bool annotated = false;
  std::vector<std::size_t> annotated_objects;  // segment ids, ascending
  std::size_t dropped_objects = 0;

  std::size_t num_objects() const { return gt_points.size(); }

  template <typename T>
  Tensor<T> image() const {
    Tensor<T> t({height, width, 3});
    for (std::size_t i = 0; i < rgb.size(); ++i) t[i] = static_cast<T>(rgb[i]) / T(255);
    return t;
  }

  std::vector<Point2> annotated_points() const {
    std::vector<Point2> out;
    for (auto id : annotated_objects) out.push_back(gt_points.at(id - 1));
    return out;
  }

  friend bool operator==(const RenderedSample& a, const RenderedSample& b) {
    return a.height == b.height && a.width == b.width && a.rgb == b.rgb &&
           a.gt.labels == b.gt.labels && a.gt_points == b.gt_points && a.annotated == b.annotated &&
           a.annotated_objects == b.annotated_objects && a.dropped_objects == b.dropped_objects;
  }
};

namespace detail {

inline double lattice_value(std::uint64_t seed, long x, long y) {
  const std::uint64_t h = mix_seed(seed, static_cast<std::uint64_t>(x) * 73856093ULL ^
                                             static_cast<std::uint64_t>(y) * 19349663ULL);
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

/// Multi-octave bilinear value noise in [0,1].
inline double value_noise(std::uint64_t seed, double x, double y) {
  double total = 0.0, amp = 0.5, norm = 0.0, freq = 4.0;
  for (int octave = 0; octave < 4; ++octave) {
    const double fx = x * freq, fy = y * freq;
    const long x0 = static_cast<long>(std::floor(fx)), y0 = static_cast<long>(std::floor(fy));
    const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
    const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(octave));
    const double v00 = lattice_value(s, x0, y0), v10 = lattice_value(s, x0 + 1, y0);
    const double v01 = lattice_value(s, x0, y0 + 1), v11 = lattice_value(s, x0 + 1, y0 + 1);
    const double top = v00 + (v10 - v00) * tx, bot = v01 + (v11 - v01) * tx;
    total += amp * (top + (bot - top) * ty);
    norm += amp;
    amp *= 0.5;
    freq *= 2.0;
  }
  return total / norm;
}

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

inline Rgb8 blend(const Rgb8& a, const Rgb8& b, double t) {
  return Rgb8{to_u8(a[0] + (b[0] - a[0]) * t), to_u8(a[1] + (b[1] - a[1]) * t),
              to_u8(a[2] + (b[2] - a[2]) * t)};
}

inline Rgb8 background_pixel(const BackgroundSpec& bg, std::size_t px, std::size_t py,
                             std::size_t H, std::size_t W) {
  const double x = (static_cast<double>(px) + 0.5) / static_cast<double>(W);
  const double y = (static_cast<double>(py) + 0.5) / static_cast<double>(H);
  switch (bg.kind) {
    case Difficulty::flat:
      return bg.color_a;
    case Difficulty::stripes: {
      const double u = x * std::cos(bg.angle) + y * std::sin(bg.angle);
      const double phase = u / bg.period - std::floor(u / bg.period);
      return phase < 0.5 ? bg.color_a : bg.color_b;
    }
    case Difficulty::noise: {
      Rgb8 c = bg.color_a;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double r = lattice_value(bg.pattern_seed + ch, static_cast<long>(px), static_cast<long>(py));
        c[ch] = to_u8(c[ch] + (r - 0.5) * 2.0 * bg.amplitude * 255.0);
      }
      return c;
    }
    case Difficulty::texture:
      return blend(bg.color_a, bg.color_b, value_noise(bg.pattern_seed, x, y));
  }
  return bg.color_a;
}

inline bool covers(const SceneObject& o, double x, double y, double aspect_x, double aspect_y) {
  // aspect_* rescale normalized offsets to units of the shorter side.
  const double dx = (x - o.cx) * aspect_x, dy = (y - o.cy) * aspect_y;
  const double r = o.size;
  switch (o.shape) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::square:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::triangle: {
      // apex up: (0,-r), (-r,r), (r,r)
      if (dy > r || dy < -r) return false;
      const double half_width = r * (dy + r) / (2.0 * r);
      return std::abs(dx) <= half_width;
    }
  }
  return false;
}

}  // namespace detail

/// Painter's-order rasterization: later objects occlude earlier ones.
/// Fully occluded objects are dropped and counted.
inline RenderedSample render(const SceneSpec& spec, std::size_t H, std::size_t W) {
  if (H == 0 || W == 0) throw DimensionError("render: empty image size");
  RenderedSample s;
  s.height = H;
  s.width = W;
  s.rgb.resize(H * W * 3);
  std::vector<int> owner(H * W, -1);
  const double side = static_cast<double>(std::min(H, W));
  const double ax = static_cast<double>(W) / side, ay = static_cast<double>(H) / side;
  for (std::size_t py = 0; py < H; ++py)
    for (std::size_t px = 0; px < W; ++px) {
      const std::size_t p = py * W + px;
      Rgb8 c = detail::background_pixel(spec.background, px, py, H, W);
      const double x = (static_cast<double>(px) + 0.5) / static_cast<double>(W);
      const double y = (static_cast<double>(py) + 0.5) / static_cast<double>(H);
      for (std::size_t k = 0; k < spec.objects.size(); ++k) {
        if (detail::covers(spec.objects[k], x, y, ax, ay)) {
          owner[p] = static_cast<int>(k);
          c = spec.objects[k].color;
        }
      }
      std::copy(c.begin(), c.end(), s.rgb.begin() + static_cast<std::ptrdiff_t>(p * 3));
    }

  std::vector<int> relabel(spec.objects.size(), 0);
  std::vector<std::size_t> count(spec.objects.size(), 0);
  for (int o : owner)
    if (o >= 0) ++count[static_cast<std::size_t>(o)];
  int next = 1;
  for (std::size_t k = 0; k < spec.objects.size(); ++k) {
    if (count[k] == 0) {
      ++s.dropped_objects;
    } else {
      relabel[k] = next++;
    }
  }
  const std::size_t n = static_cast<std::size_t>(next - 1);
  std::vector<int> labels(H * W, 0);
  std::vector<std::size_t> xmin(n, W), xmax(n, 0), ymin(n, H), ymax(n, 0);
  for (std::size_t py = 0; py < H; ++py)
    for (std::size_t px = 0; px < W; ++px) {
      const int o = owner[py * W + px];
      if (o < 0) continue;
      const int id = relabel[static_cast<std::size_t>(o)];
      labels[py * W + px] = id;
      const std::size_t i = static_cast<std::size_t>(id - 1);
      xmin[i] = std::min(xmin[i], px);
      xmax[i] = std::max(xmax[i], px);
      ymin[i] = std::min(ymin[i], py);
      ymax[i] = std::max(ymax[i], py);
    }
  s.gt = Segmentation(H, W, std::move(labels));
  for (std::size_t i = 0; i < n; ++i) {
    s.gt_points.push_back(
        Point2{(static_cast<double>(xmin[i] + xmax[i]) + 1.0) / 2.0 / static_cast<double>(W),
               (static_cast<double>(ymin[i] + ymax[i]) + 1.0) / 2.0 / static_cast<double>(H)});
  }
  return s;
}

struct AnnotationPolicy {
  double image_fraction = 0.10;
  double object_fraction = 0.75;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(image_fraction >= 0.0 && image_fraction <= 1.0) ||
        !(object_fraction >= 0.0 && object_fraction <= 1.0)) {
      throw ConfigError("annotation fractions must lie in [0,1]");
    }
  }
};

inline std::size_t annotated_object_count(const AnnotationPolicy& p, std::size_t n) {
  return std::min<std::size_t>(
      n, std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(p.object_fraction * static_cast<double>(n)))));
}

struct Dataset {
  std::uint64_t seed = 0;
  Difficulty difficulty = Difficulty::flat;
  std::size_t height = 0;
  std::size_t width = 0;
  AnnotationPolicy policy;
  bool policy_applied = false;
  std::vector<RenderedSample> samples;

  std::size_t annotated_count() const {
    return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(),
                                                  [](const RenderedSample& s) { return s.annotated; }));
  }
};

inline Dataset generate_dataset(std::uint64_t seed, std::size_t size, Difficulty difficulty,
                                std::size_t H, std::size_t W, const GenerationOptions& opt = {}) {
  Dataset d;
  d.seed = seed;
  d.difficulty = difficulty;
  d.height = H;
  d.width = W;
  d.samples.reserve(size);
  for (std::size_t i = 0; i < size; ++i) d.samples.push_back(render(generate_scene(mix_seed(seed, i), difficulty, opt), H, W));
  return d;
}

/// Marks exactly round(image_fraction * N) images as annotated and, in each,
/// max(1, round(object_fraction * n)) of its objects. Deterministic in
/// policy.seed; previous flags are cleared.
inline void apply_annotation_policy(Dataset& d, const AnnotationPolicy& policy) {
  if (d.samples.empty()) throw UsageError("apply_annotation_policy: empty dataset");
  policy.validate();
  for (auto& s : d.samples) {
    s.annotated = false;
    s.annotated_objects.clear();
  }
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < d.samples.size(); ++i)
    if (d.samples[i].num_objects() > 0) eligible.push_back(i);
  const auto wanted = static_cast<std::size_t>(
      std::llround(policy.image_fraction * static_cast<double>(d.samples.size())));
  if (wanted > eligible.size()) {
    throw DataError("apply_annotation_policy: " + std::to_string(wanted) +
                    " annotated images requested but only " + std::to_string(eligible.size()) +
                    " contain objects");
  }
  std::mt19937_64 rng(policy.seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(wanted);
  std::sort(eligible.begin(), eligible.end());
  for (auto i : eligible) {
    auto& s = d.samples[i];
    std::vector<std::size_t> ids(s.num_objects());
    std::iota(ids.begin(), ids.end(), std::size_t{1});
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(annotated_object_count(policy, s.num_objects()));
    std::sort(ids.begin(), ids.end());
    s.annotated = true;
    s.annotated_objects = std::move(ids);
  }
  d.policy = policy;
  d.policy_applied = true;
}

}  // namespace slash
