#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "leafmask/errors.hpp"
#include "leafmask/ops.hpp"
#include "leafmask/refine.hpp"
#include "leafmask/tensor.hpp"

namespace leafmask {

// Weight of the semantic auxiliary term in the total loss.
inline constexpr double kSemanticWeight = 0.3;

// -[t log s(l) + (1-t) log(1-s(l))] = max(l,0) - l*t + log(1 + exp(-|l|))
template <class T>
T bce_with_logits(T logit, T target) {
  return std::max(logit, T{0}) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

namespace detail {

template <class T>
void check_binary(const Tensor<T>& target, const char* op) {
  for (T v : target.data())
    if (v != T{0} && v != T{1}) throw ValidationError(std::string(op) + ": target must be 0/1");
}

template <class T>
T mean_bce(const Tensor<T>& logits, const Tensor<T>& target) {
  T acc{};
  for (std::size_t i = 0; i < logits.size(); ++i) acc += bce_with_logits(logits[i], target[i]);
  return acc / static_cast<T>(logits.size());
}

// d(mean bce)/dl = (sigmoid(l) - t) / n
template <class T>
Tensor<T> mean_bce_grad(const Tensor<T>& logits, const Tensor<T>& target, T upstream) {
  Tensor<T> g(logits.shape());
  const T scale = upstream / static_cast<T>(logits.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (sigmoid(logits[i]) - target[i]) * scale;
  return g;
}

}  // namespace detail

// Mean per-pixel BCE of an instance's (R_B,R_B) logits against a 0/1 target.
template <class T>
T bce_mask_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.shape() != target.shape())
    throw ShapeError("bce_mask_loss: logits " + to_string(logits.shape()) + " vs target " +
                     to_string(target.shape()));
  detail::check_binary(target, "bce_mask_loss");
  return detail::mean_bce(logits, target);
}

template <class T>
Tensor<T> bce_mask_loss_backward(const Tensor<T>& logits, const Tensor<T>& target, T upstream = T{1}) {
  if (logits.shape() != target.shape()) throw ShapeError("bce_mask_loss_backward: shape mismatch");
  return detail::mean_bce_grad(logits, target, upstream);
}

// Nearest-neighbour resize of a (H,W) or (1,H,W) map to (out_h,out_w),
// keeping the input rank.
template <class T>
Tensor<T> resize_nearest(const Tensor<T>& m, std::size_t out_h, std::size_t out_w) {
  if (m.rank() != 2 && !(m.rank() == 3 && m.dim(0) == 1))
    throw ShapeError("resize_nearest: expected (H,W) or (1,H,W), got " + to_string(m.shape()));
  const std::size_t h = m.dim(m.rank() - 2), w = m.dim(m.rank() - 1);
  Tensor<T> out(m.rank() == 2 ? Shape{out_h, out_w} : Shape{1, out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto sy = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * h / out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto sx = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * w / out_w));
      out[y * out_w + x] = m[sy * w + sx];
    }
  }
  return out;
}

namespace detail {

template <class T>
Tensor<T> semantic_target(const Tensor<T>& sem_logits, const Tensor<T>& fg_target) {
  if (sem_logits.rank() != 3 || sem_logits.dim(0) != 1)
    throw ShapeError("semantic_aux_loss: logits must be (1,H,W), got " + to_string(sem_logits.shape()));
  if (fg_target.rank() != 2 && !(fg_target.rank() == 3 && fg_target.dim(0) == 1))
    throw ShapeError("semantic_aux_loss: target must be (H,W) or (1,H,W), got " +
                     to_string(fg_target.shape()));
  check_binary(fg_target, "semantic_aux_loss");
  Tensor<T> t = resize_nearest(fg_target, sem_logits.dim(1), sem_logits.dim(2));
  return t.reshaped(sem_logits.shape());
}

}  // namespace detail

// Unweighted foreground/background BCE; the target is nearest-resized to
// the logit resolution first. The 0.3 weight is applied in total_loss.
template <class T>
T semantic_aux_loss(const Tensor<T>& sem_logits, const Tensor<T>& fg_target) {
  return detail::mean_bce(sem_logits, detail::semantic_target(sem_logits, fg_target));
}

template <class T>
Tensor<T> semantic_aux_loss_backward(const Tensor<T>& sem_logits, const Tensor<T>& fg_target,
                                     T upstream = T{1}) {
  return detail::mean_bce_grad(sem_logits, detail::semantic_target(sem_logits, fg_target), upstream);
}

// Mean BCE over the refined logits of a point set.
template <class T>
T point_loss(const Tensor<T>& point_logits, const Tensor<T>& point_targets) {
  if (point_logits.empty() || point_targets.empty()) throw ConfigError("point_loss: empty point set");
  if (point_logits.size() != point_targets.size())
    throw ShapeError("point_loss: " + std::to_string(point_logits.size()) + " logits for " +
                     std::to_string(point_targets.size()) + " targets");
  detail::check_binary(point_targets, "point_loss");
  return detail::mean_bce(point_logits, point_targets.reshaped(point_logits.shape()));
}

template <class T>
Tensor<T> point_loss_backward(const Tensor<T>& point_logits, const Tensor<T>& point_targets,
                              T upstream = T{1}) {
  if (point_logits.size() != point_targets.size() || point_logits.empty())
    throw ShapeError("point_loss_backward: length mismatch");
  return detail::mean_bce_grad(point_logits, point_targets.reshaped(point_logits.shape()), upstream);
}

// Ground truth (H,W) sampled bilinearly at each point, thresholded at 0.5.
template <class T>
Tensor<T> point_targets(const Tensor<T>& gt, const std::vector<Point>& points) {
  if (gt.rank() != 2) throw ShapeError("point_targets: ground truth must be (H,W)");
  if (points.empty()) throw ConfigError("point_targets: empty point set");
  Tensor<T> t({points.size()});
  for (std::size_t i = 0; i < points.size(); ++i)
    t[i] = sample_plane(gt.data().data(), gt.dim(0), gt.dim(1), points[i]) > T{0.5} ? T{1} : T{0};
  return t;
}

// ---------------------------------------------------------------------------

struct LossInputs {
  double l_cls = 0.0;  // detector terms, supplied externally
  double l_ctr = 0.0;
  double l_loc = 0.0;
  double l_mask = 0.0;
  double l_sem = 0.0;
  double l_points = 0.0;
};

struct LossBreakdown {
  double l_cls = 0.0;
  double l_ctr = 0.0;
  double l_loc = 0.0;
  double l_mask = 0.0;
  double l_sem = 0.0;
  double l_points = 0.0;
  double total = 0.0;
};

// total = cls + ctr + loc + mask + 0.3 * sem + points
inline LossBreakdown total_loss(const LossInputs& in) {
  const std::pair<const char*, double> terms[] = {{"l_cls", in.l_cls},   {"l_ctr", in.l_ctr},
                                                  {"l_loc", in.l_loc},   {"l_mask", in.l_mask},
                                                  {"l_sem", in.l_sem},   {"l_points", in.l_points}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) throw ValidationError(std::string("total_loss: ") + name + " is not finite");
    if (v < 0.0) throw ValidationError(std::string("total_loss: ") + name + " is negative");
  }
  LossBreakdown b{in.l_cls, in.l_ctr, in.l_loc, in.l_mask, in.l_sem, in.l_points, 0.0};
  b.total = in.l_cls + in.l_ctr + in.l_loc + in.l_mask + kSemanticWeight * in.l_sem + in.l_points;
  return b;
}

}  // namespace leafmask
