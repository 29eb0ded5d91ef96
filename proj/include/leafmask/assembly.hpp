#pragma once

// Mask assembly: crop the shared bases with RoIAlign, upscale each
// instance's low-resolution coefficient maps and blend them per pixel.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "leafmask/errors.hpp"
#include "leafmask/ops.hpp"
#include "leafmask/tensor.hpp"

namespace leafmask {

// Box corners in base-map pixel units with pixel edges on integers: the
// whole map is [0, W] x [0, H]. Callers holding image-resolution boxes must
// divide by the bases stride themselves.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
  double score = 1.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  bool operator==(const Box&) const = default;
};

struct AssemblyConfig {
  std::size_t base_resolution = 56;        // R_B
  std::size_t coefficient_resolution = 14; // R_C
  std::size_t num_bases = 4;               // K

  void validate() const {
    if (num_bases < 1) throw ConfigError("assembly: K must be >= 1");
    if (coefficient_resolution < 1) throw ConfigError("assembly: R_C must be >= 1");
    if (coefficient_resolution > base_resolution)
      throw ConfigError("assembly: R_C (" + std::to_string(coefficient_resolution) +
                        ") must not exceed R_B (" + std::to_string(base_resolution) + ")");
  }
};

// RoIAlign samples per bin along each axis.
inline constexpr std::size_t kRoiSamplesPerAxis = 2;

// Clamps the box to the map and rejects it if nothing is left.
inline Box clamp_box(const Box& b, std::size_t h, std::size_t w) {
  if (!std::isfinite(b.x1) || !std::isfinite(b.y1) || !std::isfinite(b.x2) || !std::isfinite(b.y2))
    throw InvalidBoxError("box has non-finite coordinates");
  Box c = b;
  c.x1 = std::clamp(b.x1, 0.0, static_cast<double>(w));
  c.x2 = std::clamp(b.x2, 0.0, static_cast<double>(w));
  c.y1 = std::clamp(b.y1, 0.0, static_cast<double>(h));
  c.y2 = std::clamp(b.y2, 0.0, static_cast<double>(h));
  if (!(c.x2 > c.x1) || !(c.y2 > c.y1))
    throw InvalidBoxError("box (" + std::to_string(b.x1) + "," + std::to_string(b.y1) + "," +
                          std::to_string(b.x2) + "," + std::to_string(b.y2) +
                          ") has zero area after clamping");
  return c;
}

namespace detail {

// Index-space sample coordinate of sub-sample `s` in bin `bin`.
inline double roi_sample(double lo, double bin_size, std::size_t bin, std::size_t s) {
  const double frac = (static_cast<double>(s) + 0.5) / static_cast<double>(kRoiSamplesPerAxis);
  return lo + (static_cast<double>(bin) + frac) * bin_size - 0.5;
}

// Bilinear taps of every sub-sample along one axis, bin-major.
inline std::vector<LinearTap> roi_taps(double lo, double bin_size, std::size_t resolution, std::size_t extent) {
  std::vector<LinearTap> taps;
  taps.reserve(resolution * kRoiSamplesPerAxis);
  for (std::size_t bin = 0; bin < resolution; ++bin)
    for (std::size_t s = 0; s < kRoiSamplesPerAxis; ++s) taps.push_back(point_tap(roi_sample(lo, bin_size, bin, s), extent));
  return taps;
}

inline void require_bases(const Shape& s, const char* op) {
  if (s.size() != 3) throw ShapeError(std::string(op) + ": bases must be (K,H,W), got " + to_string(s));
}

}  // namespace detail

template <class T>
Tensor<T> roi_align(const Tensor<T>& bases, const Box& box, std::size_t resolution) {
  detail::require_bases(bases.shape(), "roi_align");
  if (resolution < 1) throw ConfigError("roi_align: resolution must be >= 1");
  const std::size_t k = bases.dim(0), h = bases.dim(1), w = bases.dim(2);
  const Box b = clamp_box(box, h, w);
  const double bw = b.width() / static_cast<double>(resolution);
  const double bh = b.height() / static_cast<double>(resolution);
  const T inv = T{1} / static_cast<T>(kRoiSamplesPerAxis * kRoiSamplesPerAxis);
  const auto tx = detail::roi_taps(b.x1, bw, resolution, w);
  const auto ty = detail::roi_taps(b.y1, bh, resolution, h);
  constexpr std::size_t S = kRoiSamplesPerAxis;
  Tensor<T> out({k, resolution, resolution});
  for (std::size_t c = 0; c < k; ++c) {
    const T* plane = bases.data().data() + c * h * w;
    for (std::size_t i = 0; i < resolution; ++i)
      for (std::size_t j = 0; j < resolution; ++j) {
        T acc{};
        for (std::size_t sy = 0; sy < S; ++sy)
          for (std::size_t sx = 0; sx < S; ++sx)
            acc += sample_taps(plane, w, tx[j * S + sx], ty[i * S + sy]);
        out(c, i, j) = acc * inv;
      }
  }
  return out;
}

template <class T>
Tensor<T> roi_align_backward(const Shape& bases_shape, const Box& box, const Tensor<T>& grad_out) {
  detail::require_bases(bases_shape, "roi_align_backward");
  const std::size_t k = bases_shape[0], h = bases_shape[1], w = bases_shape[2];
  if (grad_out.rank() != 3 || grad_out.dim(0) != k || grad_out.dim(1) != grad_out.dim(2))
    throw ShapeError("roi_align_backward: upstream gradient shape " + to_string(grad_out.shape()));
  const std::size_t resolution = grad_out.dim(1);
  const Box b = clamp_box(box, h, w);
  const double bw = b.width() / static_cast<double>(resolution);
  const double bh = b.height() / static_cast<double>(resolution);
  const T inv = T{1} / static_cast<T>(kRoiSamplesPerAxis * kRoiSamplesPerAxis);
  const auto tx = detail::roi_taps(b.x1, bw, resolution, w);
  const auto ty = detail::roi_taps(b.y1, bh, resolution, h);
  constexpr std::size_t S = kRoiSamplesPerAxis;
  Tensor<T> g = Tensor<T>::zeros(bases_shape);
  for (std::size_t c = 0; c < k; ++c) {
    T* plane = g.data().data() + c * h * w;
    for (std::size_t i = 0; i < resolution; ++i)
      for (std::size_t j = 0; j < resolution; ++j) {
        const T v = grad_out(c, i, j) * inv;
        for (std::size_t sy = 0; sy < S; ++sy)
          for (std::size_t sx = 0; sx < S; ++sx) sample_taps_backward(plane, w, tx[j * S + sx], ty[i * S + sy], v);
      }
  }
  return g;
}

template <class T>
Tensor<T> upscale_coefficients(const Tensor<T>& coeffs, std::size_t resolution) {
  detail::require_bases(coeffs.shape(), "upscale_coefficients");
  if (resolution < coeffs.dim(1) || resolution < coeffs.dim(2))
    throw ConfigError("upscale_coefficients: R_B must be >= R_C");
  const Tensor<T> up = resize_bilinear(coeffs.reshaped({1, coeffs.dim(0), coeffs.dim(1), coeffs.dim(2)}),
                                       resolution, resolution);
  return up.reshaped({coeffs.dim(0), resolution, resolution});
}

template <class T>
Tensor<T> upscale_coefficients_backward(const Shape& coeff_shape, const Tensor<T>& grad_out) {
  detail::require_bases(coeff_shape, "upscale_coefficients_backward");
  const Tensor<T> g = resize_bilinear_backward(
      Shape{1, coeff_shape[0], coeff_shape[1], coeff_shape[2]},
      grad_out.reshaped({1, grad_out.dim(0), grad_out.dim(1), grad_out.dim(2)}));
  return g.reshaped(coeff_shape);
}

// out[h,w] = sum_k crop[k,h,w] * coeff[k,h,w]; raw logits.
template <class T>
Tensor<T> assemble(const Tensor<T>& crop, const Tensor<T>& coeff_up) {
  detail::require_bases(crop.shape(), "assemble");
  if (crop.shape() != coeff_up.shape())
    throw ShapeError("assemble: crop " + to_string(crop.shape()) + " vs coefficients " +
                     to_string(coeff_up.shape()));
  const std::size_t k = crop.dim(0), plane = crop.dim(1) * crop.dim(2);
  Tensor<T> out({crop.dim(1), crop.dim(2)});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[i] += crop[c * plane + i] * coeff_up[c * plane + i];
  return out;
}

template <class T>
BinaryGrads<T> assemble_backward(const Tensor<T>& crop, const Tensor<T>& coeff_up,
                                 const Tensor<T>& grad_out) {
  if (crop.shape() != coeff_up.shape() || grad_out.rank() != 2 || grad_out.dim(0) != crop.dim(1) ||
      grad_out.dim(1) != crop.dim(2))
    throw ShapeError("assemble_backward: shape mismatch");
  const std::size_t k = crop.dim(0), plane = crop.dim(1) * crop.dim(2);
  BinaryGrads<T> g{Tensor<T>(crop.shape()), Tensor<T>(crop.shape())};
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      g.a[c * plane + i] = grad_out[i] * coeff_up[c * plane + i];
      g.b[c * plane + i] = grad_out[i] * crop[c * plane + i];
    }
  return g;
}

// Single instance: crop, upscale, blend.
template <class T>
Tensor<T> assemble_instance(const Tensor<T>& bases, const Tensor<T>& coeffs, const Box& box,
                            const AssemblyConfig& cfg) {
  cfg.validate();
  detail::require_bases(bases.shape(), "assemble_instance");
  if (bases.dim(0) != cfg.num_bases)
    throw ShapeError("K mismatch: bases have " + std::to_string(bases.dim(0)) + ", config has " +
                     std::to_string(cfg.num_bases));
  if (coeffs.shape() != Shape{cfg.num_bases, cfg.coefficient_resolution, cfg.coefficient_resolution}) {
    if (coeffs.rank() == 3 && coeffs.dim(0) != cfg.num_bases)
      throw ShapeError("K mismatch: coefficients have " + std::to_string(coeffs.dim(0)) +
                       ", config has " + std::to_string(cfg.num_bases));
    throw ShapeError("R_C mismatch: coefficients " + to_string(coeffs.shape()) + ", config R_C " +
                     std::to_string(cfg.coefficient_resolution));
  }
  return assemble(roi_align(bases, box, cfg.base_resolution),
                  upscale_coefficients(coeffs, cfg.base_resolution));
}

template <class T>
struct InstanceGrads {
  Tensor<T> bases;
  Tensor<T> coeffs;
};

template <class T>
InstanceGrads<T> assemble_instance_backward(const Tensor<T>& bases, const Tensor<T>& coeffs,
                                            const Box& box, const AssemblyConfig& cfg,
                                            const Tensor<T>& grad_logits) {
  const Tensor<T> crop = roi_align(bases, box, cfg.base_resolution);
  const Tensor<T> up = upscale_coefficients(coeffs, cfg.base_resolution);
  auto g = assemble_backward(crop, up, grad_logits);
  return {roi_align_backward(bases.shape(), box, g.a), upscale_coefficients_backward(coeffs.shape(), g.b)};
}

struct InstanceError {
  std::size_t index = 0;
  std::string message;
};

template <class T>
struct AssemblyResult {
  std::vector<std::optional<Tensor<T>>> logits;  // one slot per instance, in input order
  std::vector<InstanceError> errors;

  bool ok() const { return errors.empty(); }
};

// Per-instance failures are collected with their index; the other
// instances are still assembled.
template <class T>
AssemblyResult<T> assemble_instances(const Tensor<T>& bases, const std::vector<Tensor<T>>& coeffs,
                                     const std::vector<Box>& boxes, const AssemblyConfig& cfg) {
  cfg.validate();
  detail::require_bases(bases.shape(), "assemble_instances");
  if (bases.dim(0) != cfg.num_bases)
    throw ShapeError("K mismatch: bases have " + std::to_string(bases.dim(0)) + ", config has " +
                     std::to_string(cfg.num_bases));
  if (coeffs.size() != boxes.size())
    throw ShapeError("P mismatch: " + std::to_string(coeffs.size()) + " coefficient sets for " +
                     std::to_string(boxes.size()) + " boxes");
  AssemblyResult<T> result;
  result.logits.resize(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    try {
      result.logits[i] = assemble_instance(bases, coeffs[i], boxes[i], cfg);
    } catch (const std::invalid_argument& e) {
      result.errors.push_back({i, e.what()});
    }
  }
  return result;
}

// Splits a stacked (P,K,R_C,R_C) tensor into per-instance (K,R_C,R_C).
template <class T>
std::vector<Tensor<T>> unstack(const Tensor<T>& stacked) {
  if (stacked.rank() != 4) throw ShapeError("unstack: expected (P,K,R,R), got " + to_string(stacked.shape()));
  const std::size_t per = stacked.size() / stacked.dim(0);
  std::vector<Tensor<T>> out;
  for (std::size_t p = 0; p < stacked.dim(0); ++p)
    out.emplace_back(Shape{stacked.dim(1), stacked.dim(2), stacked.dim(3)},
                     std::vector<T>(stacked.data().begin() + p * per, stacked.data().begin() + (p + 1) * per));
  return out;
}

}  // namespace leafmask
