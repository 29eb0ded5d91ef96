#pragma once

// Central finite-difference verification of every analytic backward pass.
// Each check builds a random problem in double precision, reduces the output
// to a scalar with fixed random weights and compares the analytic gradient
// of that scalar with (f(x+h) - f(x-h)) / 2h per element. The difference
// quotient is evaluated in extended precision (long double) so that the
// small step keeps both round-off and rectifier kinks out of the estimate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "leafmask/assembly.hpp"
#include "leafmask/attention.hpp"
#include "leafmask/decoder.hpp"
#include "leafmask/losses.hpp"
#include "leafmask/ops.hpp"
#include "leafmask/refine.hpp"

namespace leafmask {

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<tensor>[<index>]"

  bool passed(double tol) const { return checked > 0 && max_rel_error < tol; }
};

using FdReal = long double;

inline constexpr double kGradCheckStep = 1e-6;
inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckFloor = 1e-8;

using GradVar = std::pair<std::string, Tensor<FdReal>*>;

// Perturbs up to `max_per_tensor` evenly spaced elements of each variable.
inline GradCheckReport finite_difference_check(const std::string& name, const std::vector<GradVar>& vars,
                                               const std::vector<Tensor<double>>& analytic,
                                               const std::function<FdReal()>& loss,
                                               double step = kGradCheckStep, std::size_t max_per_tensor = 48) {
  if (vars.size() != analytic.size()) throw UsageError("finite_difference_check: gradient count mismatch");
  GradCheckReport r{name, 0.0, 0, {}};
  const FdReal h = step;
  for (std::size_t v = 0; v < vars.size(); ++v) {
    Tensor<FdReal>& x = *vars[v].second;
    if (analytic[v].shape() != x.shape())
      throw UsageError("finite_difference_check: gradient shape mismatch for " + vars[v].first);
    const std::size_t stride = std::max<std::size_t>(1, x.size() / max_per_tensor);
    for (std::size_t i = 0; i < x.size(); i += stride) {
      const FdReal orig = x[i];
      x[i] = orig + h;
      const FdReal up = loss();
      x[i] = orig - h;
      const FdReal down = loss();
      x[i] = orig;
      const auto numeric = static_cast<double>((up - down) / (2 * h));
      const double a = analytic[v][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      ++r.checked;
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = vars[v].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

template <class T>
T weighted_sum(const Tensor<T>& t, const Tensor<T>& w) {
  T acc = 0;
  for (std::size_t i = 0; i < t.size(); ++i) acc += t[i] * w[i];
  return acc;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Random conv params with non-trivial biases.
inline ConvParams<double> random_conv(std::size_t out_c, std::size_t in_c, std::size_t k, std::mt19937_64& rng) {
  ConvParams<double> p = init_conv<double>(out_c, in_c, k, rng);
  p.bias = random_tensor({out_c}, rng, 0.5);
  return p;
}

template <class P>
void randomize_biases(P& params, std::mt19937_64& rng) {
  params.visit("", [&](const std::string& name, Tensor<double>& t) {
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) t = random_tensor(t.shape(), rng, 0.5);
  });
}

template <class P, class G>
void collect(P& params, G& grads, const std::string& prefix, std::vector<GradVar>& vars,
             std::vector<Tensor<double>>& analytic) {
  params.visit(prefix, [&](const std::string& name, Tensor<FdReal>& t) { vars.emplace_back(name, &t); });
  grads.visit(prefix, [&](const std::string&, Tensor<double>& t) { analytic.push_back(t); });
}

inline Tensor<FdReal> ext(const Tensor<double>& t) { return t.cast<FdReal>(); }

}  // namespace detail

// --- individual checks ------------------------------------------------------

inline GradCheckReport check_conv2d(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = detail::pick(rng, 1, 2), ic = detail::pick(rng, 1, 4), oc = detail::pick(rng, 1, 4);
  const std::size_t k = detail::pick(rng, 0, 1) ? 3 : 1, h = detail::pick(rng, 2, 6), w = detail::pick(rng, 2, 6);
  const Tensor<double> x = detail::random_tensor({n, ic, h, w}, rng);
  const ConvParams<double> p = detail::random_conv(oc, ic, k, rng);
  const Tensor<double> wts = detail::random_tensor({n, oc, h, w}, rng);
  auto g = conv2d_backward(x, p, wts);
  auto xl = detail::ext(x);
  auto pl = p.cast<FdReal>();
  const auto wl = detail::ext(wts);
  return finite_difference_check("conv2d", {{"input", &xl}, {"weight", &pl.weight}, {"bias", &pl.bias}},
                                 {g.input, g.params.weight, g.params.bias},
                                 [&] { return detail::weighted_sum(conv2d(xl, pl), wl); });
}

inline GradCheckReport check_pool(std::uint64_t seed, PoolAxis axis, PoolKind kind) {
  std::mt19937_64 rng(seed);
  const std::size_t n = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 5);
  const Tensor<double> x = detail::random_tensor({n, c, detail::pick(rng, 1, 5), detail::pick(rng, 1, 5)}, rng);
  PoolContext ctx;
  const Tensor<double> out = pool(x, axis, kind, &ctx);
  const Tensor<double> wts = detail::random_tensor(out.shape(), rng);
  const std::string name = std::string("pool_") + (axis == PoolAxis::channel ? "channel_" : "spatial_") +
                           (kind == PoolKind::avg ? "avg" : "max");
  auto xl = detail::ext(x);
  const auto wl = detail::ext(wts);
  return finite_difference_check(name, {{"input", &xl}}, {pool_backward(ctx, wts)},
                                 [&] { return detail::weighted_sum(pool(xl, axis, kind), wl); });
}

inline GradCheckReport check_elementwise(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 4), h = detail::pick(rng, 1, 4),
                    w = detail::pick(rng, 1, 4);
  const Tensor<double> a = detail::random_tensor({n, c, h, w}, rng, 2.0);
  const Tensor<double> b = detail::random_tensor({n, 1, h, w}, rng);
  const Tensor<double> cvec = detail::random_tensor({n, c, 1, 1}, rng);
  const double slope = 0.1;
  const Tensor<double> wts = detail::random_tensor({n, c, h, w}, rng);
  const Tensor<double> s = sigmoid(a);
  auto gadd = broadcast_add_backward(a.shape(), cvec.shape(), wts);
  auto gmul = broadcast_mul_backward(s, b, gadd.a);
  Tensor<double> ga = sigmoid_backward(s, gmul.a);
  accumulate(ga, relu_backward(a, slope, gadd.a));
  auto al = detail::ext(a), bl = detail::ext(b), cl = detail::ext(cvec);
  const auto wl = detail::ext(wts);
  // f = sum w * (sigmoid(a) * b + relu(a) + c)
  return finite_difference_check("elementwise", {{"a", &al}, {"b", &bl}, {"c", &cl}}, {ga, gmul.b, gadd.b}, [&] {
    const auto sl = static_cast<FdReal>(slope);
    return detail::weighted_sum(broadcast_add(add(broadcast_mul(sigmoid(al), bl), relu(al, sl)), cl), wl);
  });
}

inline GradCheckReport check_resize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 3);
  const Tensor<double> x = detail::random_tensor({n, c, detail::pick(rng, 1, 6), detail::pick(rng, 1, 6)}, rng);
  const std::size_t oh = detail::pick(rng, 1, 12), ow = detail::pick(rng, 1, 12);
  const Tensor<double> wts = detail::random_tensor({n, c, oh, ow}, rng);
  auto xl = detail::ext(x);
  const auto wl = detail::ext(wts);
  return finite_difference_check("resize_bilinear", {{"input", &xl}}, {resize_bilinear_backward(x.shape(), wts)},
                                 [&] { return detail::weighted_sum(resize_bilinear(xl, oh, ow), wl); });
}

inline GradCheckReport check_sample_points(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 3), h = detail::pick(rng, 1, 6),
                    w = detail::pick(rng, 1, 6);
  const Tensor<double> x = detail::random_tensor({n, c, h, w}, rng);
  std::uniform_real_distribution<double> ux(-1.0, static_cast<double>(w)), uy(-1.0, static_cast<double>(h));
  std::vector<Point> pts(detail::pick(rng, 1, 10));
  for (auto& p : pts) p = {ux(rng), uy(rng)};
  const Tensor<double> wts = detail::random_tensor({n, c, pts.size()}, rng);
  auto xl = detail::ext(x);
  const auto wl = detail::ext(wts);
  return finite_difference_check(
      "sample_points_bilinear", {{"input", &xl}}, {sample_points_bilinear_backward<double>(x.shape(), pts, wts)},
      [&] { return detail::weighted_sum(sample_points_bilinear<FdReal>(xl, pts), wl); });
}

inline GradCheckReport check_spatial_attention(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 6), r = std::size_t{1} << detail::pick(rng, 0, 3);
  const Tensor<double> x = detail::random_tensor({n, c, detail::pick(rng, 2, 5), detail::pick(rng, 2, 5)}, rng);
  auto p = SpatialAttentionParams<double>::init(c, r, rng);
  detail::randomize_biases(p, rng);
  SpatialAttentionTrace<double> tr;
  const Tensor<double> out = spatial_attention_map(x, p, &tr);
  const Tensor<double> wts = detail::random_tensor(out.shape(), rng);
  auto g = spatial_attention_backward(tr, p, wts);
  auto xl = detail::ext(x);
  auto pl = p.cast<FdReal>();
  const auto wl = detail::ext(wts);
  std::vector<GradVar> vars{{"input", &xl}};
  std::vector<Tensor<double>> analytic{g.input};
  detail::collect(pl, g.params, "spatial", vars, analytic);
  return finite_difference_check("spatial_attention", vars, analytic,
                                 [&] { return detail::weighted_sum(spatial_attention_map(xl, pl), wl); });
}

inline GradCheckReport check_channel_attention(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 6), r = std::size_t{1} << detail::pick(rng, 0, 3);
  const Tensor<double> x = detail::random_tensor({n, c, detail::pick(rng, 2, 5), detail::pick(rng, 2, 5)}, rng);
  auto p = ChannelAttentionParams<double>::init(c, r, rng);
  detail::randomize_biases(p, rng);
  ChannelAttentionTrace<double> tr;
  const Tensor<double> out = channel_attention_map(x, p, &tr);
  const Tensor<double> wts = detail::random_tensor(out.shape(), rng);
  auto g = channel_attention_backward(tr, p, wts);
  auto xl = detail::ext(x);
  auto pl = p.cast<FdReal>();
  const auto wl = detail::ext(wts);
  std::vector<GradVar> vars{{"input", &xl}};
  std::vector<Tensor<double>> analytic{g.input};
  detail::collect(pl, g.params, "channel", vars, analytic);
  return finite_difference_check("channel_attention", vars, analytic,
                                 [&] { return detail::weighted_sum(channel_attention_map(xl, pl), wl); });
}

inline GradCheckReport check_dual_attention(std::uint64_t seed, Arrangement mode) {
  std::mt19937_64 rng(seed);
  const std::size_t n = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 6), r = std::size_t{1} << detail::pick(rng, 0, 3);
  const Tensor<double> x = detail::random_tensor({n, c, detail::pick(rng, 2, 5), detail::pick(rng, 2, 5)}, rng);
  auto p = AttentionParams<double>::init(c, r, mode, rng);
  detail::randomize_biases(p, rng);
  DualAttentionTrace<double> tr;
  const Tensor<double> out = apply_dual_attention(x, p, &tr);
  const Tensor<double> wts = detail::random_tensor(out.shape(), rng);
  auto g = apply_dual_attention_backward(tr, p, wts);
  auto xl = detail::ext(x);
  auto pl = p.cast<FdReal>();
  const auto wl = detail::ext(wts);
  std::vector<GradVar> vars{{"input", &xl}};
  std::vector<Tensor<double>> analytic{g.input};
  detail::collect(pl, g.params, "attention", vars, analytic);
  return finite_difference_check("attention_" + std::string(to_string(mode)), vars, analytic,
                                 [&] { return detail::weighted_sum(apply_dual_attention(xl, pl), wl); });
}

inline GradCheckReport check_bases_decoder(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t c = detail::pick(rng, 1, 4), width = detail::pick(rng, 2, 6), depth = detail::pick(rng, 0, 2);
  const std::size_t k = std::size_t{1} << detail::pick(rng, 0, 3);
  const auto mode = static_cast<Arrangement>(detail::pick(rng, 0, 3));
  const Tensor<double> x = detail::random_tensor({1, c, detail::pick(rng, 2, 5), detail::pick(rng, 2, 5)}, rng);
  auto dp = DecoderParams<double>::init(c, width, depth, k, rng);
  auto ap = AttentionParams<double>::init(depth ? width : c, 2, mode, rng);
  detail::randomize_biases(dp, rng);
  detail::randomize_biases(ap, rng);
  DecoderTrace<double> tr;
  const Tensor<double> out = bases_decoder(x, dp, ap, k, &tr);
  const Tensor<double> wts = detail::random_tensor(out.shape(), rng);
  auto g = bases_decoder_backward(tr, dp, ap, wts);
  auto xl = detail::ext(x);
  auto dl = dp.cast<FdReal>();
  auto al = ap.cast<FdReal>();
  const auto wl = detail::ext(wts);
  std::vector<GradVar> vars{{"features", &xl}};
  std::vector<Tensor<double>> analytic{g.features};
  detail::collect(dl, g.decoder, "decoder", vars, analytic);
  detail::collect(al, g.attention, "attention", vars, analytic);
  return finite_difference_check("bases_decoder", vars, analytic,
                                 [&] { return detail::weighted_sum(bases_decoder(xl, dl, al, k), wl); });
}

inline GradCheckReport check_assembly(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t k = detail::pick(rng, 1, 4), h = detail::pick(rng, 3, 10), w = detail::pick(rng, 3, 10);
  const std::size_t rc = detail::pick(rng, 1, 4), rb = rc + detail::pick(rng, 0, 5);
  const AssemblyConfig cfg{rb, rc, k};
  const Tensor<double> bases = detail::random_tensor({k, h, w}, rng);
  const Tensor<double> coeffs = detail::random_tensor({k, rc, rc}, rng);
  std::uniform_real_distribution<double> fx(0.0, 0.5);
  const Box box{fx(rng) * w, fx(rng) * h, (0.5 + fx(rng)) * w + 0.1, (0.5 + fx(rng)) * h + 0.1, 1.0};
  const Tensor<double> wts = detail::random_tensor({rb, rb}, rng);
  auto g = assemble_instance_backward(bases, coeffs, box, cfg, wts);
  auto bl = detail::ext(bases), cl = detail::ext(coeffs);
  const auto wl = detail::ext(wts);
  return finite_difference_check("assembly", {{"bases", &bl}, {"coefficients", &cl}}, {g.bases, g.coeffs},
                                 [&] { return detail::weighted_sum(assemble_instance(bl, cl, box, cfg), wl); });
}

inline GradCheckReport check_point_predictor(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t c = detail::pick(rng, 1, 4), layers = detail::pick(rng, 1, 3), hidden = detail::pick(rng, 1, 6);
  const std::size_t h = detail::pick(rng, 2, 6), w = detail::pick(rng, 2, 6);
  const Tensor<double> fine = detail::random_tensor({c, detail::pick(rng, 2, 8), detail::pick(rng, 2, 8)}, rng);
  const Tensor<double> coarse = detail::random_tensor({h, w}, rng, 2.0);
  auto p = PointPredictorParams<double>::init(c, hidden, layers, rng);
  detail::randomize_biases(p, rng);
  RefineConfig cfg;
  cfg.n_points = detail::pick(rng, 1, 8);
  const PointSet pts = sample_points_train(coarse, cfg, seed);
  PointPredictTrace<double> tr;
  const Tensor<double> out = point_predict(fine, coarse, pts, p, &tr);
  const Tensor<double> wts = detail::random_tensor(out.shape(), rng);
  auto g = point_predict_backward(tr, p, wts);
  auto fl = detail::ext(fine), cl = detail::ext(coarse);
  auto pl = p.cast<FdReal>();
  const auto wl = detail::ext(wts);
  std::vector<GradVar> vars{{"fine", &fl}, {"coarse", &cl}};
  std::vector<Tensor<double>> analytic{g.fine, g.coarse};
  detail::collect(pl, g.params, "predictor", vars, analytic);
  return finite_difference_check("point_predictor", vars, analytic,
                                 [&] { return detail::weighted_sum(point_predict(fl, cl, pts, pl), wl); });
}

inline GradCheckReport check_losses(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t h = detail::pick(rng, 1, 6), w = detail::pick(rng, 1, 6), p = detail::pick(rng, 1, 10);
  const Tensor<double> mask_logits = detail::random_tensor({h, w}, rng, 3.0);
  const Tensor<double> sem_logits = detail::random_tensor({1, h, w}, rng, 3.0);
  const Tensor<double> pt_logits = detail::random_tensor({p}, rng, 3.0);
  std::bernoulli_distribution coin(0.5);
  Tensor<double> mask_t({h, w}), sem_t({2 * h, 2 * w}), pt_t({p});
  for (auto* t : {&mask_t, &sem_t, &pt_t})
    for (auto& v : t->data()) v = coin(rng) ? 1.0 : 0.0;
  const double wm = 0.7, ws = 1.3, wp = 0.9;
  auto ml = detail::ext(mask_logits), sl = detail::ext(sem_logits), pl = detail::ext(pt_logits);
  const auto mt = detail::ext(mask_t), st = detail::ext(sem_t), pt = detail::ext(pt_t);
  return finite_difference_check(
      "losses", {{"mask_logits", &ml}, {"sem_logits", &sl}, {"point_logits", &pl}},
      {bce_mask_loss_backward(mask_logits, mask_t, wm), semantic_aux_loss_backward(sem_logits, sem_t, ws),
       point_loss_backward(pt_logits, pt_t, wp)},
      [&] {
        return FdReal(wm) * bce_mask_loss(ml, mt) + FdReal(ws) * semantic_aux_loss(sl, st) +
               FdReal(wp) * point_loss(pl, pt);
      });
}

// Every check once per seed.
inline std::vector<GradCheckReport> gradcheck_suite(std::uint64_t seed) {
  std::vector<GradCheckReport> out;
  out.push_back(check_conv2d(seed));
  for (auto axis : {PoolAxis::channel, PoolAxis::spatial})
    for (auto kind : {PoolKind::avg, PoolKind::max}) out.push_back(check_pool(seed, axis, kind));
  out.push_back(check_elementwise(seed));
  out.push_back(check_resize(seed));
  out.push_back(check_sample_points(seed));
  out.push_back(check_spatial_attention(seed));
  out.push_back(check_channel_attention(seed));
  for (auto mode : {Arrangement::spatial_then_channel, Arrangement::channel_then_spatial, Arrangement::parallel,
                    Arrangement::parallel_shared})
    out.push_back(check_dual_attention(seed, mode));
  out.push_back(check_bases_decoder(seed));
  out.push_back(check_assembly(seed));
  out.push_back(check_point_predictor(seed));
  out.push_back(check_losses(seed));
  return out;
}

}  // namespace leafmask
