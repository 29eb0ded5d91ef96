#pragma once

// Synthetic top-view rosettes: elongated elliptical leaves radiating from a
// centre, with controllable overlap. Produces instance labels, tight boxes
// and a half-resolution feature tensor for the bases decoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "leafmask/assembly.hpp"
#include "leafmask/errors.hpp"
#include "leafmask/metrics.hpp"
#include "leafmask/tensor.hpp"

namespace leafmask {

struct RosetteSpec {
  std::size_t n_leaves = 8;
  std::size_t size = 64;          // square image extent, even
  double overlap = 0.2;           // 0 keeps every leaf inside its own angular sector
  std::size_t feature_groups = 4; // leaf i is rendered into channel 1 + i % groups
  double noise = 0.05;            // std of additive feature noise
};

struct SynthScene {
  LabelImage labels;                             // after occlusion, id = leaf index + 1
  std::vector<std::vector<std::uint8_t>> leaves; // unoccluded leaf masks
  std::vector<Box> boxes;                        // tight boxes of the visible leaves
  Tensor<float> features;                        // (1 + groups, size/2, size/2)

  // 0/1 mask of one visible instance as an (H,W) tensor.
  template <class T>
  Tensor<T> instance_mask(std::size_t index) const {
    Tensor<T> m({labels.height, labels.width});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels.ids[i] == index + 1 ? T{1} : T{0};
    return m;
  }
  template <class T>
  Tensor<T> foreground() const {
    Tensor<T> m({labels.height, labels.width});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels.ids[i] ? T{1} : T{0};
    return m;
  }
};

inline SynthScene synth_rosette(std::uint64_t seed, const RosetteSpec& spec) {
  if (spec.n_leaves < 1) throw ConfigError("synth_rosette: n_leaves must be >= 1");
  if (spec.size < 8 || spec.size % 2) throw ConfigError("synth_rosette: size must be even and >= 8");
  if (spec.overlap < 0.0) throw ConfigError("synth_rosette: overlap must be >= 0");
  if (spec.feature_groups < 1) throw ConfigError("synth_rosette: feature_groups must be >= 1");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double pi = std::numbers::pi;
  const double s = static_cast<double>(spec.size);
  const std::size_t n = spec.n_leaves;
  const double sector = 2.0 * pi / static_cast<double>(n);
  const double cx = s / 2.0 + (unit(rng) - 0.5) * 0.06 * s;
  const double cy = s / 2.0 + (unit(rng) - 0.5) * 0.06 * s;

  struct Leaf {
    double angle, inner, length, half_width;
  };
  std::vector<Leaf> leaves(n);
  for (std::size_t i = 0; i < n; ++i) {
    Leaf& l = leaves[i];
    l.angle = sector * static_cast<double>(i) + (unit(rng) - 0.5) * 0.3 * sector;
    l.inner = 0.04 * s;
    l.length = s * (0.30 + 0.12 * unit(rng));
    const double mid = l.inner + l.length / 2.0;
    const double spread = n == 1 ? 0.25 * l.length : mid * std::tan(std::min(sector / 2.0, pi / 4.0));
    l.half_width = std::min(spread * (0.85 + spec.overlap) * (0.9 + 0.2 * unit(rng)), 0.45 * l.length);
  }

  SynthScene scene;
  scene.labels = LabelImage(spec.size, spec.size);
  scene.leaves.assign(n, std::vector<std::uint8_t>(spec.size * spec.size, 0));
  for (std::size_t i = 0; i < n; ++i) {
    const Leaf& l = leaves[i];
    const double ca = std::cos(l.angle), sa = std::sin(l.angle);
    const double ex = cx + ca * (l.inner + l.length / 2.0), ey = cy + sa * (l.inner + l.length / 2.0);
    for (std::size_t y = 0; y < spec.size; ++y)
      for (std::size_t x = 0; x < spec.size; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        const double u = (px - ex) * ca + (py - ey) * sa;
        const double v = -(px - ex) * sa + (py - ey) * ca;
        const double a = l.length / 2.0;
        if ((u * u) / (a * a) + (v * v) / (l.half_width * l.half_width) > 1.0) continue;
        if (spec.overlap == 0.0 && n > 1) {
          // Restrict to the leaf's own sector around the rosette centre.
          double d = std::atan2(py - cy, px - cx) - sector * static_cast<double>(i);
          d = std::remainder(d, 2.0 * pi);
          if (d < -sector / 2.0 || d >= sector / 2.0) continue;
        }
        scene.leaves[i][y * spec.size + x] = 1;
        scene.labels.at(x, y) = static_cast<std::uint32_t>(i + 1);  // later leaves occlude
      }
  }

  for (std::size_t i = 0; i < n; ++i) {
    std::size_t x0 = spec.size, y0 = spec.size, x1 = 0, y1 = 0;
    for (std::size_t y = 0; y < spec.size; ++y)
      for (std::size_t x = 0; x < spec.size; ++x)
        if (scene.labels.at(x, y) == i + 1) {
          x0 = std::min(x0, x), y0 = std::min(y0, y);
          x1 = std::max(x1, x), y1 = std::max(y1, y);
        }
    if (x0 > x1) throw ConfigError("synth_rosette: leaf " + std::to_string(i) + " is fully occluded");
    scene.boxes.push_back({static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 + 1),
                           static_cast<double>(y1 + 1), 1.0});
  }

  // Features: 2x2 area average of the foreground and per-group one-hot
  // renderings, a 3x3 box blur, then Gaussian noise.
  const std::size_t fh = spec.size / 2, channels = 1 + spec.feature_groups;
  Tensor<float> raw({channels, fh, fh});
  for (std::size_t y = 0; y < spec.size; ++y)
    for (std::size_t x = 0; x < spec.size; ++x) {
      const auto id = scene.labels.at(x, y);
      if (!id) continue;
      raw(std::size_t{0}, y / 2, x / 2) += 0.25f;
      raw(1 + (id - 1) % spec.feature_groups, y / 2, x / 2) += 0.25f;
    }
  scene.features = Tensor<float>({channels, fh, fh});
  std::normal_distribution<double> noise(0.0, spec.noise);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < fh; ++y)
      for (std::size_t x = 0; x < fh; ++x) {
        double acc = 0.0;
        int count = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(fh) || xx >= static_cast<std::ptrdiff_t>(fh))
              continue;
            acc += raw(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
            ++count;
          }
        scene.features(c, y, x) = static_cast<float>(0.5 * raw(c, y, x) + 0.5 * acc / count + noise(rng));
      }
  return scene;
}

}  // namespace leafmask
