#pragma once

// Point-based mask refinement: uncertainty-driven point selection, a
// point-wise MLP that re-predicts the selected logits, and iterative 2x
// subdivision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "leafmask/attention.hpp"
#include "leafmask/errors.hpp"
#include "leafmask/init.hpp"
#include "leafmask/ops.hpp"
#include "leafmask/tensor.hpp"

namespace leafmask {

struct RefineConfig {
  double beta = 3.0;   // oversampling rate, > 1
  double alpha = 0.75; // importance rate, (0, 1]
  std::size_t n_points = 784;
  std::size_t steps = 3;
  std::size_t n_layers = 3;
  std::size_t hidden = 256;

  void validate() const {
    if (!(beta > 1.0) || !std::isfinite(beta)) throw ConfigError("refine: beta must be > 1");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("refine: alpha must be in (0, 1]");
    if (n_points < 1) throw ConfigError("refine: n_points must be >= 1");
    if (n_layers < 1) throw ConfigError("refine: n_layers must be >= 1");
    if (hidden < 1) throw ConfigError("refine: hidden must be >= 1");
  }

  std::size_t candidate_count() const {
    return static_cast<std::size_t>(std::ceil(beta * static_cast<double>(n_points)));
  }
  std::size_t uncertain_count() const {
    return static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n_points)));
  }
};

enum class PointKind : std::uint8_t { uncertain, random };

struct PointSet {
  std::vector<Point> points;
  std::vector<PointKind> kinds;

  std::size_t size() const { return points.size(); }
  void push(Point p, PointKind k) {
    points.push_back(p);
    kinds.push_back(k);
  }
  bool operator==(const PointSet&) const = default;
};

// -|sigmoid(l) - 0.5|: 0 where the probability is exactly 0.5, -> -0.5 when
// saturated.
template <class T>
T uncertainty(T logit) {
  return -std::abs(sigmoid(logit) - T{0.5});
}

template <class T>
Tensor<T> uncertainty(const Tensor<T>& logits) {
  Tensor<T> u(logits.shape());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = uncertainty(logits[i]);
  return u;
}

namespace detail {

inline void require_map(const Shape& s, const char* op) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": logits must be (H,W), got " + to_string(s));
}

// Indices ordered by descending key; equal keys keep ascending index.
template <class K>
std::vector<std::size_t> rank_descending(const std::vector<K>& key, std::size_t take) {
  std::vector<std::size_t> idx(key.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto by_key = [&](std::size_t a, std::size_t b) {
    if (key[a] != key[b]) return key[a] > key[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(), by_key);
  idx.resize(take);
  return idx;
}

}  // namespace detail

// Full record of one training-time draw, kept for verification.
struct TrainSample {
  PointSet set;
  std::vector<Point> candidates;          // U_i, in draw order
  std::vector<double> candidate_uncertainty;
  std::vector<std::size_t> uncertain_idx; // indices into candidates
  std::vector<std::size_t> random_idx;
};

// Draws ceil(beta*N) points uniformly over the mask area, keeps the
// floor(alpha*N) most uncertain (uncertainty bilinearly sampled) and fills
// the rest uniformly without replacement from the remaining candidates.
template <class T>
TrainSample sample_points_train_detailed(const Tensor<T>& logits, const RefineConfig& cfg,
                                         std::uint64_t seed) {
  cfg.validate();
  detail::require_map(logits.shape(), "sample_points_train");
  const std::size_t h = logits.dim(0), w = logits.dim(1);
  const std::size_t m = cfg.candidate_count(), n_unc = cfg.uncertain_count();
  std::mt19937_64 rng(seed);
  // Pixel areas span [i - 0.5, i + 0.5] in index space.
  std::uniform_real_distribution<double> ux(-0.5, static_cast<double>(w) - 0.5);
  std::uniform_real_distribution<double> uy(-0.5, static_cast<double>(h) - 0.5);

  TrainSample s;
  std::set<std::pair<double, double>> seen;
  while (s.candidates.size() < m) {
    const Point p{ux(rng), uy(rng)};
    if (seen.emplace(p.x, p.y).second) s.candidates.push_back(p);
  }
  const Tensor<T> u = uncertainty(logits);
  s.candidate_uncertainty.reserve(m);
  for (const auto& p : s.candidates)
    s.candidate_uncertainty.push_back(static_cast<double>(sample_plane(u.data().data(), h, w, p)));

  s.uncertain_idx = detail::rank_descending(s.candidate_uncertainty, n_unc);
  std::vector<char> taken(m, 0);
  for (auto i : s.uncertain_idx) taken[i] = 1;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < m; ++i)
    if (!taken[i]) pool.push_back(i);
  const std::size_t n_rand = cfg.n_points - n_unc;
  for (std::size_t i = 0; i < n_rand; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    s.random_idx.push_back(pool[i]);
  }
  for (auto i : s.uncertain_idx) s.set.push(s.candidates[i], PointKind::uncertain);
  for (auto i : s.random_idx) s.set.push(s.candidates[i], PointKind::random);
  return s;
}

template <class T>
PointSet sample_points_train(const Tensor<T>& logits, const RefineConfig& cfg, std::uint64_t seed) {
  return sample_points_train_detailed(logits, cfg, seed).set;
}

// The N most uncertain grid points; ties go to the lowest row-major index.
template <class T>
PointSet select_points_inference(const Tensor<T>& logits, std::size_t n) {
  detail::require_map(logits.shape(), "select_points_inference");
  if (n < 1 || n > logits.size())
    throw ConfigError("select_points_inference: N = " + std::to_string(n) + " outside [1, " +
                      std::to_string(logits.size()) + "]");
  const Tensor<T> u = uncertainty(logits);
  const std::vector<T> key(u.data().begin(), u.data().end());
  PointSet s;
  const std::size_t w = logits.dim(1);
  for (auto i : detail::rank_descending(key, n))
    s.push({static_cast<double>(i % w), static_cast<double>(i / w)}, PointKind::uncertain);
  return s;
}

// ---------------------------------------------------------------------------
// point predictor

// n 1x1 layers. Every layer sees the coarse logit appended to its input;
// the last layer emits one logit per point.
template <class T>
struct PointPredictorParams {
  std::vector<ConvParams<T>> layers;

  std::size_t feature_channels() const { return layers.front().in_channels() - 1; }

  static PointPredictorParams zeros(std::size_t feature_c, std::size_t hidden, std::size_t n_layers) {
    PointPredictorParams p;
    for (std::size_t i = 0; i < n_layers; ++i)
      p.layers.push_back(ConvParams<T>::zeros(i + 1 == n_layers ? 1 : hidden, (i ? hidden : feature_c) + 1, 1));
    return p;
  }
  static PointPredictorParams init(std::size_t feature_c, std::size_t hidden, std::size_t n_layers,
                                   std::mt19937_64& rng) {
    PointPredictorParams p;
    for (std::size_t i = 0; i < n_layers; ++i)
      p.layers.push_back(init_conv<T>(i + 1 == n_layers ? 1 : hidden, (i ? hidden : feature_c) + 1, 1, rng));
    return p;
  }

  template <class U>
  PointPredictorParams<U> cast() const {
    PointPredictorParams<U> out;
    for (const auto& c : layers) out.layers.push_back(c.template cast<U>());
    return out;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layer" + std::to_string(i), f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layer" + std::to_string(i), f);
  }
};

// Maps an index-space coordinate between two resolutions of the same extent.
inline double rescale_coord(double c, std::size_t from, std::size_t to) {
  return (c + 0.5) * static_cast<double>(to) / static_cast<double>(from) - 0.5;
}

template <class T>
struct PointPredictTrace {
  Shape fine_shape;
  Shape coarse_shape;
  std::vector<Point> fine_points;
  std::vector<Point> coarse_points;
  std::vector<Tensor<T>> layer_inputs;  // (1, in, 1, P)
  std::vector<Tensor<T>> layer_pre;
};

template <class T>
struct PointPredictGrads {
  PointPredictorParams<T> params;
  Tensor<T> fine;
  Tensor<T> coarse;
};

// Points are in the coarse map's index frame. Returns one logit per point.
template <class T>
Tensor<T> point_predict(const Tensor<T>& fine, const Tensor<T>& coarse, const PointSet& points,
                        const PointPredictorParams<T>& p, PointPredictTrace<T>* trace = nullptr) {
  if (fine.rank() != 3) throw ShapeError("point_predict: fine features must be (C,H,W)");
  detail::require_map(coarse.shape(), "point_predict");
  if (p.layers.empty()) throw ConfigError("point_predict: predictor has no layers");
  if (fine.dim(0) != p.feature_channels())
    throw ShapeError("point_predict: fine features have " + std::to_string(fine.dim(0)) +
                     " channels, predictor expects " + std::to_string(p.feature_channels()));
  if (points.size() == 0) throw ConfigError("point_predict: empty point set");
  const std::size_t c = fine.dim(0), n_pts = points.size();
  PointPredictTrace<T> tr;
  tr.fine_shape = fine.shape();
  tr.coarse_shape = coarse.shape();
  tr.coarse_points = points.points;
  for (const auto& pt : points.points)
    tr.fine_points.push_back({rescale_coord(pt.x, coarse.dim(1), fine.dim(2)),
                              rescale_coord(pt.y, coarse.dim(0), fine.dim(1))});

  const Tensor<T> feats = sample_points_bilinear(fine.reshaped({1, c, fine.dim(1), fine.dim(2)}),
                                                 std::span<const Point>(tr.fine_points))
                              .reshaped({1, c, 1, n_pts});
  const Tensor<T> coarse_pts = sample_points_bilinear(coarse.reshaped({1, 1, coarse.dim(0), coarse.dim(1)}),
                                                      std::span<const Point>(tr.coarse_points))
                                   .reshaped({1, 1, 1, n_pts});
  const auto slope = static_cast<T>(kActivationSlope);
  Tensor<T> h = feats;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    Tensor<T> in = concat_channels(h, coarse_pts);
    Tensor<T> pre = conv2d(in, p.layers[i]);
    h = i + 1 == p.layers.size() ? pre : relu(pre, slope);
    tr.layer_inputs.push_back(std::move(in));
    tr.layer_pre.push_back(std::move(pre));
  }
  if (trace) *trace = std::move(tr);
  return h.reshaped({n_pts});
}

template <class T>
PointPredictGrads<T> point_predict_backward(const PointPredictTrace<T>& tr, const PointPredictorParams<T>& p,
                                            const Tensor<T>& grad_logits) {
  if (tr.layer_inputs.size() != p.layers.size())
    throw UsageError("point_predict_backward: missing forward trace");
  const std::size_t n_pts = tr.coarse_points.size();
  if (grad_logits.size() != n_pts) throw ShapeError("point_predict_backward: gradient length");
  const auto slope = static_cast<T>(kActivationSlope);
  PointPredictGrads<T> g;
  g.params.layers.resize(p.layers.size());
  Tensor<T> gh = grad_logits.reshaped({1, 1, 1, n_pts});
  Tensor<T> g_coarse_pts = Tensor<T>::zeros({1, 1, 1, n_pts});
  for (std::size_t i = p.layers.size(); i-- > 0;) {
    const Tensor<T> g_pre = i + 1 == p.layers.size() ? gh : relu_backward(tr.layer_pre[i], slope, gh);
    auto gc = conv2d_backward(tr.layer_inputs[i], p.layers[i], g_pre);
    g.params.layers[i] = std::move(gc.params);
    auto split = concat_channels_backward<T>(tr.layer_inputs[i].dim(1) - 1, gc.input);
    accumulate(g_coarse_pts, split.b);
    gh = std::move(split.a);
  }
  const std::size_t c = tr.fine_shape[0];
  g.fine = sample_points_bilinear_backward<T>({1, c, tr.fine_shape[1], tr.fine_shape[2]},
                                              tr.fine_points, gh.reshaped({1, c, n_pts}))
               .reshaped(tr.fine_shape);
  g.coarse = sample_points_bilinear_backward<T>({1, 1, tr.coarse_shape[0], tr.coarse_shape[1]},
                                                tr.coarse_points, g_coarse_pts.reshaped({1, 1, n_pts}))
                 .reshaped(tr.coarse_shape);
  return g;
}

// ---------------------------------------------------------------------------
// subdivision

template <class T>
struct RefineResult {
  Tensor<T> logits;
  std::vector<PointSet> selections;   // grid points replaced at each step
  std::vector<Tensor<T>> upsampled;   // interpolation result of each step, before replacement
};

// Each step: 2x bilinear upsample, pick the N most uncertain grid points
// (N is capped at the number of pixels) and overwrite exactly those with the
// predictor's output. Everything else is the interpolated value.
template <class T>
RefineResult<T> refine_mask_traced(const Tensor<T>& coarse, const Tensor<T>& fine, const RefineConfig& cfg,
                                   const PointPredictorParams<T>& p) {
  cfg.validate();
  detail::require_map(coarse.shape(), "refine_mask");
  RefineResult<T> r;
  r.logits = coarse;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::size_t h = r.logits.dim(0), w = r.logits.dim(1);
    Tensor<T> up = resize_bilinear(r.logits.reshaped({1, 1, h, w}), 2 * h, 2 * w).reshaped({2 * h, 2 * w});
    PointSet sel = select_points_inference(up, std::min(cfg.n_points, up.size()));
    const Tensor<T> pred = point_predict(fine, up, sel, p);
    r.upsampled.push_back(up);
    for (std::size_t i = 0; i < sel.size(); ++i)
      up(static_cast<std::size_t>(sel.points[i].y), static_cast<std::size_t>(sel.points[i].x)) = pred[i];
    r.selections.push_back(std::move(sel));
    r.logits = std::move(up);
  }
  return r;
}

template <class T>
Tensor<T> refine_mask(const Tensor<T>& coarse, const Tensor<T>& fine, const RefineConfig& cfg,
                      const PointPredictorParams<T>& p) {
  return refine_mask_traced(coarse, fine, cfg, p).logits;
}

// Foreground where sigmoid(l) > 0.5, i.e. l > 0. A logit of exactly 0 is
// background.
template <class T>
Tensor<std::uint8_t> binarize(const Tensor<T>& logits) {
  Tensor<std::uint8_t> m(logits.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = logits[i] > T{0} ? 1 : 0;
  return m;
}

}  // namespace leafmask
