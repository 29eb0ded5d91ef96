#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>

#include "leafmask/tensor.hpp"

namespace lmtest {

template <class T>
leafmask::Tensor<T> random_tensor(leafmask::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  leafmask::Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

// Half-pixel source coordinate of destination index `dst`, clamped.
inline double source_coord(std::size_t dst, std::size_t in, std::size_t out) {
  double c = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  if (c < 0.0) c = 0.0;
  if (c > static_cast<double>(in - 1)) c = static_cast<double>(in - 1);
  return c;
}

// Scalar bilinear lookup with clamping, independent of the library taps.
template <class T>
double bilinear_at(const T* plane, std::size_t h, std::size_t w, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(plane[yy * w + xx]); };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace lmtest
