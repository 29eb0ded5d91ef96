#pragma once

// Desk-scale end-to-end training on synthetic rosettes. Ground-truth boxes
// stand in for the detector, so the detector loss terms are zero. Each leaf
// slot owns a free coefficient tensor shared across scenes; the bases
// decoder, its attention module, a 1x1 semantic head and the point
// predictor are trained jointly by full-batch gradient descent.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "leafmask/assembly.hpp"
#include "leafmask/attention.hpp"
#include "leafmask/decoder.hpp"
#include "leafmask/errors.hpp"
#include "leafmask/init.hpp"
#include "leafmask/losses.hpp"
#include "leafmask/metrics.hpp"
#include "leafmask/ops.hpp"
#include "leafmask/refine.hpp"
#include "leafmask/synth.hpp"

namespace leafmask {

struct ToyConfig {
  std::uint64_t seed = 0;
  std::size_t iterations = 600;
  double learning_rate = 0.05;
  std::size_t train_scenes = 8;
  std::size_t eval_scenes = 4;
  RosetteSpec scene;
  AssemblyConfig assembly{56, 1, 4};  // one coefficient vector per leaf slot
  std::size_t decoder_width = 8;
  std::size_t decoder_depth = 2;
  std::size_t reduction_ratio = kDefaultReductionRatio;
  Arrangement arrangement = Arrangement::spatial_then_channel;
  RefineConfig refine{3.0, 0.75, 196, 1, 3, 16};

  void validate() const {
    if (train_scenes < 1) throw ConfigError("traintoy: train_scenes must be >= 1");
    if (eval_scenes < 1) throw ConfigError("traintoy: eval_scenes must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("traintoy: learning_rate must be > 0");
    if (decoder_width < 1) throw ConfigError("traintoy: decoder_width must be >= 1");
    if (reduction_ratio < 1) throw ConfigError("traintoy: reduction_ratio must be >= 1");
    assembly.validate();
    refine.validate();
  }
};

template <class T>
struct ToyModel {
  DecoderParams<T> decoder;
  AttentionParams<T> attention;
  ConvParams<T> sem_head;                // 1x1, K -> 1 on the bases
  std::vector<Tensor<T>> coefficients;   // one (K, R_C, R_C) per leaf slot
  PointPredictorParams<T> predictor;

  static ToyModel init(const ToyConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    const std::size_t feat_c = 1 + cfg.scene.feature_groups, k = cfg.assembly.num_bases;
    const std::size_t rc = cfg.assembly.coefficient_resolution;
    ToyModel m;
    m.decoder = DecoderParams<T>::init(feat_c, cfg.decoder_width, cfg.decoder_depth, k, rng);
    m.attention = AttentionParams<T>::init(cfg.decoder_depth ? cfg.decoder_width : feat_c, cfg.reduction_ratio,
                                           cfg.arrangement, rng);
    m.sem_head = init_conv<T>(1, k, 1, rng);
    std::normal_distribution<double> coeff(0.0, 1.0 / std::sqrt(static_cast<double>(k)));
    for (std::size_t i = 0; i < cfg.scene.n_leaves; ++i) {
      Tensor<T> c({k, rc, rc});
      for (auto& v : c.data()) v = static_cast<T>(coeff(rng));
      m.coefficients.push_back(std::move(c));
    }
    m.predictor = PointPredictorParams<T>::init(feat_c, cfg.refine.hidden, cfg.refine.n_layers, rng);
    return m;
  }

  template <class F>
  void visit(F&& f) {
    decoder.visit("decoder", f);
    attention.visit("attention", f);
    sem_head.visit("sem_head", f);
    for (std::size_t i = 0; i < coefficients.size(); ++i) f("coefficients" + std::to_string(i), coefficients[i]);
    predictor.visit("predictor", f);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<ToyModel*>(this)->visit([&](const std::string& name, Tensor<T>& t) { f(name, std::as_const(t)); });
  }

  // Same structure, every tensor zero.
  ToyModel zeros_like() const {
    ToyModel z = *this;
    z.visit([](const std::string&, Tensor<T>& t) { t.fill(T{}); });
    return z;
  }
};

// Applies f(name, a_tensor, b_tensor) to matching tensors of two models.
template <class T, class F>
void zip_params(ToyModel<T>& a, ToyModel<T>& b, F&& f) {
  std::vector<std::pair<std::string, Tensor<T>*>> pa, pb;
  a.visit([&](const std::string& n, Tensor<T>& t) { pa.emplace_back(n, &t); });
  b.visit([&](const std::string& n, Tensor<T>& t) { pb.emplace_back(n, &t); });
  if (pa.size() != pb.size()) throw UsageError("zip_params: models differ in structure");
  for (std::size_t i = 0; i < pa.size(); ++i) f(pa[i].first, *pa[i].second, *pb[i].second);
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// into += g, tensor by tensor, for two parameter structs of equal layout.
template <class T, class P>
void add_params(P& into, P& g) {
  std::vector<Tensor<T>*> a, b;
  into.visit("", [&](const std::string&, Tensor<T>& t) { a.push_back(&t); });
  g.visit("", [&](const std::string&, Tensor<T>& t) { b.push_back(&t); });
  if (a.size() != b.size()) throw UsageError("add_params: structures differ");
  for (std::size_t i = 0; i < a.size(); ++i) accumulate(*a[i], *b[i]);
}

inline Box halve(const Box& b) { return {b.x1 / 2, b.y1 / 2, b.x2 / 2, b.y2 / 2, b.score}; }

// Instance-frame index coordinate -> image index coordinate.
inline Point frame_to_image(const Point& p, const Box& box, std::size_t resolution) {
  const double r = static_cast<double>(resolution);
  return {box.x1 + (p.x + 0.5) * box.width() / r - 0.5, box.y1 + (p.y + 0.5) * box.height() / r - 0.5};
}

}  // namespace detail

inline std::uint64_t toy_train_seed(std::uint64_t seed, std::size_t scene) {
  return detail::splitmix64(seed * 2 + 0) ^ scene;
}
inline std::uint64_t toy_eval_seed(std::uint64_t seed, std::size_t scene) {
  return detail::splitmix64(seed * 2 + 1) ^ (scene + 0x10000);
}

// One scene with everything that does not depend on the parameters.
template <class T>
struct ToySample {
  SynthScene scene;
  Tensor<T> features;                  // (1, C, size/2, size/2)
  Tensor<T> foreground;                // (size, size)
  std::vector<Tensor<T>> gt;           // per instance, (size, size)
  std::vector<Tensor<T>> mask_targets; // per instance, (R_B, R_B)
  std::vector<Tensor<T>> fine;         // per instance, (C, R_B, R_B)
};

// Fine-grained point features of an instance are the input features cropped
// to its box at the mask resolution.
template <class T>
ToySample<T> prepare_toy_sample(SynthScene scene, const ToyConfig& cfg) {
  const std::size_t rb = cfg.assembly.base_resolution;
  ToySample<T> s;
  const Tensor<T> feats = scene.features.template cast<T>();
  s.features = feats.reshaped({1, feats.dim(0), feats.dim(1), feats.dim(2)});
  s.foreground = scene.template foreground<T>();
  const std::size_t h = scene.labels.height, w = scene.labels.width;
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const Box& box = scene.boxes[i];
    Tensor<T> gt = scene.template instance_mask<T>(i);
    Tensor<T> target = roi_align(gt.reshaped({1, h, w}), box, rb).reshaped({rb, rb});
    for (auto& v : target.data()) v = v > T{0.5} ? T{1} : T{0};
    s.mask_targets.push_back(std::move(target));
    s.fine.push_back(roi_align(feats, detail::halve(box), rb));
    s.gt.push_back(std::move(gt));
  }
  s.scene = std::move(scene);
  return s;
}

// Bases for one scene, (K, size, size).
template <class T>
Tensor<T> toy_bases(const ToySample<T>& s, const ToyModel<T>& m, const ToyConfig& cfg,
                    DecoderTrace<T>* trace = nullptr) {
  const Tensor<T> b = bases_decoder(s.features, m.decoder, m.attention, cfg.assembly.num_bases, trace);
  return b.reshaped({b.dim(1), b.dim(2), b.dim(3)});
}

// Loss and gradient of the whole training batch at the current parameters.
template <class T>
LossBreakdown toy_loss_and_grad(const std::vector<ToySample<T>>& scenes, const ToyModel<T>& m, const ToyConfig& cfg,
                                std::size_t iteration, ToyModel<T>* grad) {
  const std::size_t rb = cfg.assembly.base_resolution, k = cfg.assembly.num_bases;
  std::size_t n_inst = 0;
  for (const auto& s : scenes) n_inst += s.scene.boxes.size();
  const T inst_scale = T{1} / static_cast<T>(n_inst);
  const T sem_scale = static_cast<T>(kSemanticWeight) / static_cast<T>(scenes.size());
  double l_mask = 0.0, l_sem = 0.0, l_points = 0.0;
  if (grad) *grad = m.zeros_like();

  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const ToySample<T>& s = scenes[si];
    const std::vector<Box>& boxes = s.scene.boxes;
    if (boxes.size() > m.coefficients.size())
      throw ConfigError("traintoy: scene has more leaves than coefficient slots");
    DecoderTrace<T> dtr;
    const Tensor<T> bases = toy_bases(s, m, cfg, &dtr);
    const std::size_t h = bases.dim(1), w = bases.dim(2);
    const Tensor<T> bases4 = bases.reshaped({1, k, h, w});
    const Tensor<T> sem = conv2d(bases4, m.sem_head).reshaped({1, h, w});
    const Tensor<T>& fg = s.foreground;
    l_sem += static_cast<double>(semantic_aux_loss(sem, fg));
    Tensor<T> g_bases = Tensor<T>::zeros(bases.shape());
    if (grad) {
      const Tensor<T> g_sem = semantic_aux_loss_backward(sem, fg, sem_scale).reshaped({1, 1, h, w});
      auto gc = conv2d_backward(bases4, m.sem_head, g_sem);
      detail::add_params<T>(grad->sem_head, gc.params);
      g_bases = gc.input.reshaped(bases.shape());
    }

    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const Box& box = boxes[i];
      const Tensor<T>& coeff = m.coefficients[i];
      const Tensor<T> logits = assemble_instance(bases, coeff, box, cfg.assembly);
      const Tensor<T>& gt = s.gt[i];
      const Tensor<T>& target = s.mask_targets[i];
      l_mask += static_cast<double>(bce_mask_loss(logits, target));

      const std::uint64_t pseed = detail::splitmix64(cfg.seed ^ detail::splitmix64(iteration * 4096 + si * 64 + i));
      const PointSet pts = sample_points_train(logits, cfg.refine, pseed);
      PointPredictTrace<T> ptr;
      const Tensor<T> pred = point_predict(s.fine[i], logits, pts, m.predictor, &ptr);
      std::vector<Point> img_pts;
      img_pts.reserve(pts.size());
      for (const auto& p : pts.points) img_pts.push_back(detail::frame_to_image(p, box, rb));
      const Tensor<T> pt_target = point_targets(gt, img_pts);
      l_points += static_cast<double>(point_loss(pred, pt_target));

      if (!grad) continue;
      Tensor<T> g_logits = bce_mask_loss_backward(logits, target, inst_scale);
      auto pg = point_predict_backward(ptr, m.predictor, point_loss_backward(pred, pt_target, inst_scale));
      detail::add_params<T>(grad->predictor, pg.params);
      accumulate(g_logits, pg.coarse);
      auto ig = assemble_instance_backward(bases, coeff, box, cfg.assembly, g_logits);
      accumulate(g_bases, ig.bases);
      accumulate(grad->coefficients[i], ig.coeffs);
    }

    if (grad) {
      auto dg = bases_decoder_backward(dtr, m.decoder, m.attention, g_bases.reshaped({1, k, h, w}));
      detail::add_params<T>(grad->decoder, dg.decoder);
      detail::add_params<T>(grad->attention, dg.attention);
    }
  }
  LossInputs in;
  in.l_mask = l_mask / static_cast<double>(n_inst);
  in.l_sem = l_sem / static_cast<double>(scenes.size());
  in.l_points = l_points / static_cast<double>(n_inst);
  for (double v : {in.l_mask, in.l_sem, in.l_points})
    if (!std::isfinite(v)) throw DivergenceError("traintoy: non-finite loss at iteration " + std::to_string(iteration));
  return total_loss(in);
}

// ---------------------------------------------------------------------------
// evaluation

// Pastes instance-frame logit maps back into the image. A pixel takes the id
// (index + 1) of the instance with the largest positive logit at its centre;
// ties keep the lower index.
template <class T>
LabelImage paste_instances(const std::vector<Tensor<T>>& maps, const std::vector<Box>& boxes, std::size_t width,
                           std::size_t height) {
  if (maps.size() != boxes.size()) throw ShapeError("paste_instances: one map per box required");
  LabelImage out(width, height);
  std::vector<T> best(width * height, T{0});
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const Tensor<T>& m = maps[i];
    if (m.rank() != 2) throw ShapeError("paste_instances: maps must be (H,W)");
    const Box b = clamp_box(boxes[i], height, width);
    const double sx = static_cast<double>(m.dim(1)) / b.width(), sy = static_cast<double>(m.dim(0)) / b.height();
    const auto x0 = static_cast<std::size_t>(std::floor(b.x1)), y0 = static_cast<std::size_t>(std::floor(b.y1));
    const auto x1 = std::min(width, static_cast<std::size_t>(std::ceil(b.x2)));
    const auto y1 = std::min(height, static_cast<std::size_t>(std::ceil(b.y2)));
    for (std::size_t y = y0; y < y1; ++y) {
      const double cy = static_cast<double>(y) + 0.5;
      if (cy < b.y1 || cy >= b.y2) continue;
      for (std::size_t x = x0; x < x1; ++x) {
        const double cx = static_cast<double>(x) + 0.5;
        if (cx < b.x1 || cx >= b.x2) continue;
        const T v = sample_plane(m.data().data(), m.dim(0), m.dim(1), {(cx - b.x1) * sx - 0.5, (cy - b.y1) * sy - 0.5});
        if (v > best[y * width + x]) {
          best[y * width + x] = v;
          out.at(x, y) = static_cast<std::uint32_t>(i + 1);
        }
      }
    }
  }
  return out;
}

// Predicted label image for one scene: assembled, refined and pasted masks.
template <class T>
LabelImage toy_predict(const ToySample<T>& s, const ToyModel<T>& m, const ToyConfig& cfg) {
  const Tensor<T> bases = toy_bases(s, m, cfg);
  const std::vector<Box>& boxes = s.scene.boxes;
  std::vector<Tensor<T>> maps;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Tensor<T> logits = assemble_instance(bases, m.coefficients.at(i), boxes[i], cfg.assembly);
    maps.push_back(refine_mask(logits, s.fine[i], cfg.refine, m.predictor));
  }
  return paste_instances(maps, boxes, s.scene.labels.width, s.scene.labels.height);
}

struct ToyIteration {
  std::size_t iteration = 0;
  LossBreakdown loss;
};

template <class T>
struct ToyResult {
  ToyModel<T> model;
  std::vector<ToyIteration> history;  // loss before each update, plus the final loss
  std::vector<double> eval_scores;    // BestDice per held-out scene
  double best_dice = 0.0;             // mean over held-out scenes
};

template <class T>
std::vector<ToySample<T>> toy_scenes(const ToyConfig& cfg, bool eval) {
  std::vector<ToySample<T>> out;
  const std::size_t n = eval ? cfg.eval_scenes : cfg.train_scenes;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(prepare_toy_sample<T>(
        synth_rosette(eval ? toy_eval_seed(cfg.seed, i) : toy_train_seed(cfg.seed, i), cfg.scene), cfg));
  return out;
}

template <class T>
double toy_evaluate(const ToyModel<T>& m, const ToyConfig& cfg, std::vector<double>* per_scene = nullptr) {
  double acc = 0.0;
  const auto scenes = toy_scenes<T>(cfg, true);
  for (const auto& s : scenes) {
    const double score = best_dice(toy_predict(s, m, cfg), s.scene.labels);
    if (per_scene) per_scene->push_back(score);
    acc += score;
  }
  return acc / static_cast<double>(scenes.size());
}

// Full-batch gradient descent with a fixed step. `on_iteration` sees every
// logged loss as soon as it is computed.
template <class T>
ToyResult<T> train_toy(const ToyConfig& cfg, const std::function<void(const ToyIteration&)>& on_iteration = {}) {
  cfg.validate();
  const auto scenes = toy_scenes<T>(cfg, false);
  ToyResult<T> r;
  r.model = ToyModel<T>::init(cfg);
  const T lr = static_cast<T>(cfg.learning_rate);
  ToyModel<T> grad;
  for (std::size_t it = 0; it <= cfg.iterations; ++it) {
    const bool last = it == cfg.iterations;
    ToyIteration rec{it, toy_loss_and_grad(scenes, r.model, cfg, it, last ? nullptr : &grad)};
    if (!std::isfinite(rec.loss.total))
      throw DivergenceError("traintoy: non-finite loss at iteration " + std::to_string(it));
    r.history.push_back(rec);
    if (on_iteration) on_iteration(rec);
    if (last) break;
    zip_params(r.model, grad, [&](const std::string&, Tensor<T>& p, Tensor<T>& g) { accumulate(p, g, -lr); });
  }
  r.best_dice = toy_evaluate(r.model, cfg, &r.eval_scores);
  return r;
}

}  // namespace leafmask
