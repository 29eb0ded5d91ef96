#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "leafmask/ops.hpp"
#include "leafmask/tensor.hpp"

namespace leafmask {

// Kaiming gain for a leaky rectifier with the given negative slope.
inline double kaiming_gain(double negative_slope) {
  return std::sqrt(2.0 / (1.0 + negative_slope * negative_slope));
}

// Default slope used to initialise every conv in this library. A slope of 1
// makes the gain exactly 1, i.e. std = 1/sqrt(fan_in).
inline constexpr double kInitNegativeSlope = 1.0;

template <class T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng,
                         double negative_slope = kInitNegativeSlope) {
  if (fan_in == 0) throw ConfigError("kaiming_normal: fan_in must be >= 1");
  const double stddev = kaiming_gain(negative_slope) / std::sqrt(static_cast<double>(fan_in));
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// Fan-in mode Kaiming weights, zero bias, same padding.
template <class T>
ConvParams<T> init_conv(std::size_t out_c, std::size_t in_c, std::size_t k, std::mt19937_64& rng) {
  ConvParams<T> p = ConvParams<T>::zeros(out_c, in_c, k);
  p.weight = kaiming_normal<T>({out_c, in_c, k, k}, in_c * k * k, rng);
  return p;
}

struct ConvSpec {
  std::size_t out_channels = 1;
  std::size_t in_channels = 1;
  std::size_t kernel = 1;
};

// One conv record per spec, all drawn from a single seeded stream.
template <class T>
std::vector<ConvParams<T>> init_params(const std::vector<ConvSpec>& specs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ConvParams<T>> out;
  out.reserve(specs.size());
  for (const auto& s : specs) out.push_back(init_conv<T>(s.out_channels, s.in_channels, s.kernel, rng));
  return out;
}

}  // namespace leafmask
