#pragma once

// Dense primitives with explicit backward passes. All image tensors are
// NCHW. Every op is a pure function; the *_backward functions take whatever
// forward values they need and return exact analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "leafmask/errors.hpp"
#include "leafmask/tensor.hpp"

namespace leafmask {

// Continuous coordinate in pixel-index space: integer values are pixel
// centres, so (2, 3) is exactly pixel w=2, h=3.
struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

template <class T>
struct ConvParams {
  Tensor<T> weight;  // (outC, inC, kH, kW)
  Tensor<T> bias;    // (outC)
  int stride = 1;
  int padding = 0;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel_h() const { return weight.dim(2); }
  std::size_t kernel_w() const { return weight.dim(3); }

  // Zero weights and bias with same-padding for an odd kernel.
  static ConvParams zeros(std::size_t out_c, std::size_t in_c, std::size_t k) {
    ConvParams p;
    p.weight = Tensor<T>::zeros({out_c, in_c, k, k});
    p.bias = Tensor<T>::zeros({out_c});
    p.padding = static_cast<int>(k / 2);
    return p;
  }

  template <class U>
  ConvParams<U> cast() const {
    return {weight.template cast<U>(), bias.template cast<U>(), stride, padding};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(s));
}

template <class T>
void validate_conv(const Tensor<T>& input, const ConvParams<T>& p) {
  require_rank(input.shape(), 4, "conv2d");
  if (p.weight.rank() != 4) throw ShapeError("conv2d: weight must be (outC,inC,kH,kW)");
  if (p.stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (p.stride != 1) throw ConfigError("conv2d: only stride 1 is supported");
  if (p.padding < 0) throw ConfigError("conv2d: padding must be >= 0");
  if (p.kernel_h() % 2 == 0 || p.kernel_w() % 2 == 0)
    throw ShapeError("conv2d: kernel extents must be odd");
  if (p.bias.rank() != 1 || p.bias.dim(0) != p.out_channels())
    throw ShapeError("conv2d: bias length must equal output channels");
  if (input.dim(1) != p.in_channels())
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) +
                     " channels, weights expect " + std::to_string(p.in_channels()));
  const auto pad2 = 2 * static_cast<std::size_t>(p.padding);
  if (input.dim(2) + pad2 < p.kernel_h() || input.dim(3) + pad2 < p.kernel_w())
    throw ShapeError("conv2d: kernel larger than padded input");
}

// Source taps of a half-pixel-centre linear resize along one axis.
struct LinearTap {
  std::size_t i0 = 0;
  std::size_t i1 = 0;
  double w1 = 0.0;  // weight of i1; i0 gets 1 - w1
};

// Source coordinate for `dst` is (dst + 0.5) * in/out - 0.5, clamped to
// [0, in - 1].
inline std::vector<LinearTap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    taps[d].i0 = i0;
    taps[d].i1 = std::min(i0 + 1, in - 1);
    taps[d].w1 = src - static_cast<double>(i0);
  }
  return taps;
}

// Taps for a single continuous index-space coordinate, clamped into range.
inline LinearTap point_tap(double coord, std::size_t extent) {
  const double c = std::clamp(coord, 0.0, static_cast<double>(extent - 1));
  const auto i0 = static_cast<std::size_t>(std::floor(c));
  return {i0, std::min(i0 + 1, extent - 1), c - static_cast<double>(i0)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& p) {
  detail::validate_conv(input, p);
  const std::size_t n_batch = input.dim(0), in_c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t out_c = p.out_channels(), kh = p.kernel_h(), kw = p.kernel_w();
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  const std::size_t oh = h + 2 * p.padding - kh + 1, ow = w + 2 * p.padding - kw + 1;

  Tensor<T> out({n_batch, out_c, oh, ow});
  const T* in = input.data().data();
  const T* wt = p.weight.data().data();
  T* o = out.data().data();
  // Per output the sum runs bias, then (ic, ky, kx) in order; the x loop is
  // innermost over the valid range only.
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t oc = 0; oc < out_c; ++oc) {
      T* oplane = o + (n * out_c + oc) * oh * ow;
      std::fill(oplane, oplane + oh * ow, p.bias[oc]);
      for (std::size_t ic = 0; ic < in_c; ++ic) {
        const T* plane = in + (n * in_c + ic) * h * w;
        const T* kern = wt + (oc * in_c + ic) * kh * kw;
        for (std::size_t y = 0; y < oh; ++y) {
          T* orow = oplane + y * ow;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const T* row = plane + static_cast<std::size_t>(iy) * w;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const T wv = kern[ky * kw + kx];
              const auto off = static_cast<std::ptrdiff_t>(kx) - pad;  // ix = x + off
              const std::size_t x0 = off < 0 ? static_cast<std::size_t>(-off) : 0;
              const std::size_t x1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow),
                                                              static_cast<std::ptrdiff_t>(w) - off);
              for (std::size_t x = x0; x < x1; ++x) orow[x] += wv * row[static_cast<std::ptrdiff_t>(x) + off];
            }
          }
        }
      }
    }
  return out;
}

template <class T>
struct ConvGrads {
  Tensor<T> input;
  ConvParams<T> params;  // weight/bias hold the gradients
};

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvParams<T>& p,
                             const Tensor<T>& grad_out) {
  detail::validate_conv(input, p);
  const std::size_t n_batch = input.dim(0), in_c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t out_c = p.out_channels(), kh = p.kernel_h(), kw = p.kernel_w();
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  const std::size_t oh = h + 2 * p.padding - kh + 1, ow = w + 2 * p.padding - kw + 1;
  if (grad_out.shape() != Shape{n_batch, out_c, oh, ow})
    throw ShapeError("conv2d_backward: upstream gradient shape " + to_string(grad_out.shape()));

  ConvGrads<T> g;
  g.input = Tensor<T>::zeros(input.shape());
  g.params.weight = Tensor<T>::zeros(p.weight.shape());
  g.params.bias = Tensor<T>::zeros(p.bias.shape());
  g.params.stride = p.stride;
  g.params.padding = p.padding;
  const T* in = input.data().data();
  const T* wt = p.weight.data().data();
  const T* go_data = grad_out.data().data();
  T* gi = g.input.data().data();
  T* gw = g.params.weight.data().data();
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t oc = 0; oc < out_c; ++oc) {
      const T* gplane = go_data + (n * out_c + oc) * oh * ow;
      for (std::size_t i = 0; i < oh * ow; ++i) g.params.bias[oc] += gplane[i];
      for (std::size_t ic = 0; ic < in_c; ++ic) {
        const T* plane = in + (n * in_c + ic) * h * w;
        T* giplane = gi + (n * in_c + ic) * h * w;
        const std::size_t kern = (oc * in_c + ic) * kh * kw;
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T wv = wt[kern + ky * kw + kx];
            const auto off = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t x0 = off < 0 ? static_cast<std::size_t>(-off) : 0;
            const std::size_t x1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow),
                                                            static_cast<std::ptrdiff_t>(w) - off);
            T acc{};
            for (std::size_t y = 0; y < oh; ++y) {
              const auto iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              const T* grow = gplane + y * ow;
              const T* row = plane + static_cast<std::size_t>(iy) * w;
              T* girow = giplane + static_cast<std::size_t>(iy) * w;
              for (std::size_t x = x0; x < x1; ++x) {
                const auto ix = static_cast<std::ptrdiff_t>(x) + off;
                acc += grow[x] * row[ix];
                girow[ix] += grow[x] * wv;
              }
            }
            gw[kern + ky * kw + kx] += acc;
          }
      }
    }
  return g;
}

// ---------------------------------------------------------------------------
// pooling

enum class PoolAxis { channel, spatial };
enum class PoolKind { avg, max };

// What pool_backward needs. argmax holds flat input indices for max pooling.
struct PoolContext {
  Shape input_shape;
  PoolAxis axis = PoolAxis::channel;
  PoolKind kind = PoolKind::avg;
  std::vector<std::size_t> argmax;
};

// axis=channel reduces C to (N,1,H,W); axis=spatial reduces H*W to (N,C,1,1).
// Max ties go to the lowest flat index.
template <class T>
Tensor<T> pool(const Tensor<T>& input, PoolAxis axis, PoolKind kind, PoolContext* ctx = nullptr) {
  detail::require_rank(input.shape(), 4, "pool");
  const std::size_t n_batch = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const bool over_channels = axis == PoolAxis::channel;
  const std::size_t groups_per_n = over_channels ? hw : c;
  const std::size_t reduce = over_channels ? c : hw;
  const std::size_t stride = over_channels ? hw : 1;
  Tensor<T> out(over_channels ? Shape{n_batch, 1, input.dim(2), input.dim(3)}
                              : Shape{n_batch, c, 1, 1});
  std::vector<std::size_t> argmax;
  if (kind == PoolKind::max) argmax.resize(out.size());
  std::vector<T> vals(reduce);

  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t g = 0; g < groups_per_n; ++g) {
      const std::size_t base = n * c * hw + (over_channels ? g : g * hw);
      const std::size_t o = n * groups_per_n + g;
      if (kind == PoolKind::avg) {
        // Sums in ascending order.
        for (std::size_t r = 0; r < reduce; ++r) vals[r] = input[base + r * stride];
        std::sort(vals.begin(), vals.end());
        T acc{};
        for (T v : vals) acc += v;
        out[o] = acc / static_cast<T>(reduce);
      } else {
        std::size_t best = base;
        for (std::size_t r = 1; r < reduce; ++r)
          if (input[base + r * stride] > input[best]) best = base + r * stride;
        out[o] = input[best];
        argmax[o] = best;
      }
    }
  if (ctx) *ctx = PoolContext{input.shape(), axis, kind, std::move(argmax)};
  return out;
}

template <class T>
Tensor<T> pool_backward(const PoolContext& ctx, const Tensor<T>& grad_out) {
  if (ctx.input_shape.size() != 4) throw UsageError("pool_backward: missing forward context");
  const Shape& s = ctx.input_shape;
  const std::size_t n_batch = s[0], c = s[1], hw = s[2] * s[3];
  const bool over_channels = ctx.axis == PoolAxis::channel;
  const std::size_t groups_per_n = over_channels ? hw : c;
  const std::size_t reduce = over_channels ? c : hw;
  const std::size_t stride = over_channels ? hw : 1;
  if (grad_out.size() != n_batch * groups_per_n)
    throw ShapeError("pool_backward: upstream gradient shape " + to_string(grad_out.shape()));
  if (ctx.kind == PoolKind::max && ctx.argmax.size() != grad_out.size())
    throw UsageError("pool_backward: max pooling context lacks argmax indices");

  Tensor<T> g = Tensor<T>::zeros(s);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t k = 0; k < groups_per_n; ++k) {
      const std::size_t o = n * groups_per_n + k;
      if (ctx.kind == PoolKind::max) {
        g[ctx.argmax[o]] += grad_out[o];
      } else {
        const std::size_t base = n * c * hw + (over_channels ? k : k * hw);
        const T share = grad_out[o] / static_cast<T>(reduce);
        for (std::size_t r = 0; r < reduce; ++r) g[base + r * stride] += share;
      }
    }
  return g;
}

// ---------------------------------------------------------------------------
// elementwise

template <class T>
T sigmoid(T x) {
  // Branches keep exp() from overflowing; the result stays inside (0,1) for
  // moderate |x| and saturates to the nearest representable bound otherwise.
  if (x >= T{0}) {
    const T z = std::exp(-x);
    return T{1} / (T{1} + z);
  }
  const T z = std::exp(x);
  return z / (T{1} + z);
}

template <class T>
Tensor<T> sigmoid(Tensor<T> x) {
  for (auto& v : x.data()) v = sigmoid(v);
  return x;
}

// Takes the forward *output*.
template <class T>
Tensor<T> sigmoid_backward(const Tensor<T>& out, const Tensor<T>& grad_out) {
  if (out.shape() != grad_out.shape()) throw ShapeError("sigmoid_backward: shape mismatch");
  Tensor<T> g(out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * out[i] * (T{1} - out[i]);
  return g;
}

// x if x >= 0 else slope * x
template <class T>
Tensor<T> relu(Tensor<T> x, T negative_slope = T{0}) {
  for (auto& v : x.data())
    if (v < T{0}) v *= negative_slope;
  return x;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& input, T negative_slope, const Tensor<T>& grad_out) {
  if (input.shape() != grad_out.shape()) throw ShapeError("relu_backward: shape mismatch");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (input[i] < T{0}) g[i] *= negative_slope;
  return g;
}

namespace detail {

// Checks that b broadcasts onto a (same rank, each extent equal or 1) and
// returns, for every flat index of a, the flat index into b.
inline std::vector<std::size_t> broadcast_index(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size())
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " + to_string(a));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (b[i] != a[i] && b[i] != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " +
                       to_string(a));
  const std::size_t total = element_count(a);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(a.size(), 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < a.size(); ++d) off = off * b[d] + (b[d] == 1 ? 0 : idx[d]);
    map[flat] = off;
    for (std::size_t d = a.size(); d-- > 0;) {
      if (++idx[d] < a[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

template <class T>
Tensor<T> broadcast_add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto map = detail::broadcast_index(a.shape(), b.shape(), "broadcast_add");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[map[i]];
  return out;
}

template <class T>
Tensor<T> broadcast_mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto map = detail::broadcast_index(a.shape(), b.shape(), "broadcast_mul");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[map[i]];
  return out;
}

// Sums `grad` (shaped like the broadcast result) down to `target` extents.
template <class T>
Tensor<T> reduce_to_shape(const Tensor<T>& grad, const Shape& target) {
  const auto map = detail::broadcast_index(grad.shape(), target, "reduce_to_shape");
  Tensor<T> out = Tensor<T>::zeros(target);
  for (std::size_t i = 0; i < grad.size(); ++i) out[map[i]] += grad[i];
  return out;
}

template <class T>
struct BinaryGrads {
  Tensor<T> a;
  Tensor<T> b;
};

template <class T>
BinaryGrads<T> broadcast_add_backward(const Shape& a_shape, const Shape& b_shape,
                                      const Tensor<T>& grad_out) {
  if (grad_out.shape() != a_shape) throw ShapeError("broadcast_add_backward: shape mismatch");
  return {grad_out, reduce_to_shape(grad_out, b_shape)};
}

template <class T>
BinaryGrads<T> broadcast_mul_backward(const Tensor<T>& a, const Tensor<T>& b,
                                      const Tensor<T>& grad_out) {
  if (grad_out.shape() != a.shape()) throw ShapeError("broadcast_mul_backward: shape mismatch");
  const auto map = detail::broadcast_index(a.shape(), b.shape(), "broadcast_mul_backward");
  BinaryGrads<T> g{Tensor<T>(a.shape()), Tensor<T>::zeros(b.shape())};
  for (std::size_t i = 0; i < a.size(); ++i) {
    g.a[i] = grad_out[i] * b[map[i]];
    g.b[map[i]] += grad_out[i] * a[i];
  }
  return g;
}

// Concatenates two NCHW tensors along C.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 4, "concat_channels");
  detail::require_rank(b.shape(), 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const std::size_t n_batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out({n_batch, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::copy_n(a.data().begin() + n * ca * hw, ca * hw, out.data().begin() + n * (ca + cb) * hw);
    std::copy_n(b.data().begin() + n * cb * hw, cb * hw,
                out.data().begin() + (n * (ca + cb) + ca) * hw);
  }
  return out;
}

template <class T>
BinaryGrads<T> concat_channels_backward(std::size_t channels_a, const Tensor<T>& grad_out) {
  detail::require_rank(grad_out.shape(), 4, "concat_channels_backward");
  const std::size_t n_batch = grad_out.dim(0), c = grad_out.dim(1), hw = grad_out.dim(2) * grad_out.dim(3);
  if (channels_a == 0 || channels_a >= c) throw ShapeError("concat_channels_backward: bad split");
  const std::size_t cb = c - channels_a;
  BinaryGrads<T> g{Tensor<T>({n_batch, channels_a, grad_out.dim(2), grad_out.dim(3)}),
                   Tensor<T>({n_batch, cb, grad_out.dim(2), grad_out.dim(3)})};
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::copy_n(grad_out.data().begin() + n * c * hw, channels_a * hw,
                g.a.data().begin() + n * channels_a * hw);
    std::copy_n(grad_out.data().begin() + (n * c + channels_a) * hw, cb * hw,
                g.b.data().begin() + n * cb * hw);
  }
  return g;
}

// ---------------------------------------------------------------------------
// bilinear resize and point sampling

template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(input.shape(), 4, "resize_bilinear");
  if (out_h < 1 || out_w < 1) throw ConfigError("resize_bilinear: output extents must be >= 1");
  const std::size_t planes = input.dim(0) * input.dim(1), in_h = input.dim(2), in_w = input.dim(3);
  const auto ty = detail::resize_taps(in_h, out_h);
  const auto tx = detail::resize_taps(in_w, out_w);
  Tensor<T> out({input.dim(0), input.dim(1), out_h, out_w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = input.data().data() + p * in_h * in_w;
    T* dst = out.data().data() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto wy1 = static_cast<T>(ty[y].w1), wy0 = T{1} - wy1;
      const T* r0 = src + ty[y].i0 * in_w;
      const T* r1 = src + ty[y].i1 * in_w;
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto wx1 = static_cast<T>(tx[x].w1), wx0 = T{1} - wx1;
        dst[y * out_w + x] = wy0 * (wx0 * r0[tx[x].i0] + wx1 * r0[tx[x].i1]) +
                             wy1 * (wx0 * r1[tx[x].i0] + wx1 * r1[tx[x].i1]);
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> resize_bilinear_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  detail::require_rank(input_shape, 4, "resize_bilinear_backward");
  detail::require_rank(grad_out.shape(), 4, "resize_bilinear_backward");
  const std::size_t planes = input_shape[0] * input_shape[1], in_h = input_shape[2], in_w = input_shape[3];
  const std::size_t out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  if (grad_out.dim(0) * grad_out.dim(1) != planes)
    throw ShapeError("resize_bilinear_backward: plane count mismatch");
  const auto ty = detail::resize_taps(in_h, out_h);
  const auto tx = detail::resize_taps(in_w, out_w);
  Tensor<T> g = Tensor<T>::zeros(input_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* go = grad_out.data().data() + p * out_h * out_w;
    T* gi = g.data().data() + p * in_h * in_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto wy1 = static_cast<T>(ty[y].w1), wy0 = T{1} - wy1;
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto wx1 = static_cast<T>(tx[x].w1), wx0 = T{1} - wx1;
        const T v = go[y * out_w + x];
        gi[ty[y].i0 * in_w + tx[x].i0] += wy0 * wx0 * v;
        gi[ty[y].i0 * in_w + tx[x].i1] += wy0 * wx1 * v;
        gi[ty[y].i1 * in_w + tx[x].i0] += wy1 * wx0 * v;
        gi[ty[y].i1 * in_w + tx[x].i1] += wy1 * wx1 * v;
      }
    }
  }
  return g;
}

// Bilinear value of one plane of width w from precomputed taps.
template <class T>
T sample_taps(const T* plane, std::size_t w, const detail::LinearTap& tx, const detail::LinearTap& ty) {
  const auto wx1 = static_cast<T>(tx.w1), wx0 = T{1} - wx1;
  const auto wy1 = static_cast<T>(ty.w1), wy0 = T{1} - wy1;
  return wy0 * (wx0 * plane[ty.i0 * w + tx.i0] + wx1 * plane[ty.i0 * w + tx.i1]) +
         wy1 * (wx0 * plane[ty.i1 * w + tx.i0] + wx1 * plane[ty.i1 * w + tx.i1]);
}

template <class T>
void sample_taps_backward(T* grad_plane, std::size_t w, const detail::LinearTap& tx, const detail::LinearTap& ty,
                          T grad) {
  const auto wx1 = static_cast<T>(tx.w1), wx0 = T{1} - wx1;
  const auto wy1 = static_cast<T>(ty.w1), wy0 = T{1} - wy1;
  grad_plane[ty.i0 * w + tx.i0] += wy0 * wx0 * grad;
  grad_plane[ty.i0 * w + tx.i1] += wy0 * wx1 * grad;
  grad_plane[ty.i1 * w + tx.i0] += wy1 * wx0 * grad;
  grad_plane[ty.i1 * w + tx.i1] += wy1 * wx1 * grad;
}

// Bilinear value of one H*W plane at an index-space point (clamped).
template <class T>
T sample_plane(const T* plane, std::size_t h, std::size_t w, Point pt) {
  return sample_taps(plane, w, detail::point_tap(pt.x, w), detail::point_tap(pt.y, h));
}

template <class T>
void sample_plane_backward(T* grad_plane, std::size_t h, std::size_t w, Point pt, T grad) {
  sample_taps_backward(grad_plane, w, detail::point_tap(pt.x, w), detail::point_tap(pt.y, h), grad);
}

// (N,C,H,W) sampled at P points -> (N,C,P). Points are clamped to the image.
template <class T>
Tensor<T> sample_points_bilinear(const Tensor<T>& input, std::span<const Point> points) {
  detail::require_rank(input.shape(), 4, "sample_points_bilinear");
  for (const auto& p : points)
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw ValidationError("sample_points_bilinear: non-finite point coordinate");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (points.empty()) throw ConfigError("sample_points_bilinear: empty point list");
  Tensor<T> out({input.dim(0), input.dim(1), points.size()});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < points.size(); ++i)
      out[p * points.size() + i] = sample_plane(input.data().data() + p * h * w, h, w, points[i]);
  return out;
}

template <class T>
Tensor<T> sample_points_bilinear_backward(const Shape& input_shape, std::span<const Point> points,
                                          const Tensor<T>& grad_out) {
  detail::require_rank(input_shape, 4, "sample_points_bilinear_backward");
  const std::size_t planes = input_shape[0] * input_shape[1], h = input_shape[2], w = input_shape[3];
  if (grad_out.shape() != Shape{input_shape[0], input_shape[1], points.size()})
    throw ShapeError("sample_points_bilinear_backward: upstream gradient shape");
  Tensor<T> g = Tensor<T>::zeros(input_shape);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < points.size(); ++i)
      sample_plane_backward(g.data().data() + p * h * w, h, w, points[i],
                            grad_out[p * points.size() + i]);
  return g;
}

// ---------------------------------------------------------------------------
// Generic backward dispatch over recorded forward contexts.

enum class OpId { conv2d, pool, sigmoid, relu, add, mul, broadcast_add, broadcast_mul, resize_bilinear,
                  sample_points_bilinear };

template <class T>
struct OpRecord {
  OpId op = OpId::conv2d;
  std::vector<Tensor<T>> saved;      // inputs (or output for sigmoid)
  std::optional<ConvParams<T>> conv;
  std::optional<PoolContext> pool;
  std::vector<Point> points;
  Shape input_shape;
  T negative_slope{};
};

template <class T>
struct OpGrads {
  std::vector<Tensor<T>> inputs;
  std::optional<ConvParams<T>> params;
};

template <class T>
OpGrads<T> backward(const OpRecord<T>& rec, const Tensor<T>& grad_out) {
  auto need = [&](std::size_t n) {
    if (rec.saved.size() < n) throw UsageError("backward: missing saved forward values");
  };
  switch (rec.op) {
    case OpId::conv2d: {
      need(1);
      if (!rec.conv) throw UsageError("backward: conv2d record lacks parameters");
      auto g = conv2d_backward(rec.saved[0], *rec.conv, grad_out);
      return {{std::move(g.input)}, std::move(g.params)};
    }
    case OpId::pool:
      if (!rec.pool) throw UsageError("backward: pool record lacks context");
      return {{pool_backward(*rec.pool, grad_out)}, std::nullopt};
    case OpId::sigmoid:
      need(1);
      return {{sigmoid_backward(rec.saved[0], grad_out)}, std::nullopt};
    case OpId::relu:
      need(1);
      return {{relu_backward(rec.saved[0], rec.negative_slope, grad_out)}, std::nullopt};
    case OpId::add:
    case OpId::broadcast_add: {
      need(2);
      auto g = broadcast_add_backward(rec.saved[0].shape(), rec.saved[1].shape(), grad_out);
      return {{std::move(g.a), std::move(g.b)}, std::nullopt};
    }
    case OpId::mul:
    case OpId::broadcast_mul: {
      need(2);
      auto g = broadcast_mul_backward(rec.saved[0], rec.saved[1], grad_out);
      return {{std::move(g.a), std::move(g.b)}, std::nullopt};
    }
    case OpId::resize_bilinear:
      if (rec.input_shape.empty()) throw UsageError("backward: resize record lacks input shape");
      return {{resize_bilinear_backward(rec.input_shape, grad_out)}, std::nullopt};
    case OpId::sample_points_bilinear:
      if (rec.input_shape.empty()) throw UsageError("backward: sample record lacks input shape");
      return {{sample_points_bilinear_backward<T>(rec.input_shape, rec.points, grad_out)},
              std::nullopt};
  }
  throw UsageError("backward: unknown op");
}

}  // namespace leafmask
