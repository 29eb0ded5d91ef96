#pragma once

// Dual attention: a spatial gate (N,1,H,W) and a channel gate (N,C,H,W),
// each the sigmoid of a global branch plus a local point-wise branch,
// composed in one of four arrangements.

#include <random>
#include <string>
#include <string_view>

#include "leafmask/errors.hpp"
#include "leafmask/init.hpp"
#include "leafmask/ops.hpp"
#include "leafmask/tensor.hpp"

namespace leafmask {

// Negative slope of the rectifier between stacked convs at runtime.
inline constexpr double kActivationSlope = 0.0;

inline constexpr std::size_t kDefaultReductionRatio = 16;

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

template <class T>
void accumulate(ConvParams<T>& into, const ConvParams<T>& g) {
  accumulate(into.weight, g.weight);
  accumulate(into.bias, g.bias);
}

// conv -> rectifier -> conv, the building block of every branch.
template <class T>
struct ConvPairTrace {
  Tensor<T> input;
  Tensor<T> hidden_pre;
};

template <class T>
struct ConvPairGrads {
  Tensor<T> input;
  ConvParams<T> first;
  ConvParams<T> second;
};

template <class T>
Tensor<T> conv_pair(const Tensor<T>& x, const ConvParams<T>& first, const ConvParams<T>& second,
                    ConvPairTrace<T>* trace = nullptr) {
  Tensor<T> pre = conv2d(x, first);
  Tensor<T> out = conv2d(relu(pre, static_cast<T>(kActivationSlope)), second);
  if (trace) *trace = {x, std::move(pre)};
  return out;
}

template <class T>
ConvPairGrads<T> conv_pair_backward(const ConvPairTrace<T>& tr, const ConvParams<T>& first,
                                    const ConvParams<T>& second, const Tensor<T>& grad_out) {
  if (tr.input.empty()) throw UsageError("conv_pair_backward: missing forward trace");
  const auto slope = static_cast<T>(kActivationSlope);
  auto g2 = conv2d_backward(relu(tr.hidden_pre, slope), second, grad_out);
  auto g_pre = relu_backward(tr.hidden_pre, slope, g2.input);
  auto g1 = conv2d_backward(tr.input, first, g_pre);
  return {std::move(g1.input), std::move(g1.params), std::move(g2.params)};
}

// ---------------------------------------------------------------------------

template <class T>
struct SpatialAttentionParams {
  ConvParams<T> global_conv1;  // 2 -> ceil(4C/r), 3x3
  ConvParams<T> global_conv2;  // ceil(4C/r) -> 1, 3x3
  ConvParams<T> local_conv1;   // C -> ceil(C/r), 1x1
  ConvParams<T> local_conv2;   // ceil(C/r) -> 1, 1x1
  std::size_t reduction_ratio = kDefaultReductionRatio;

  std::size_t channels() const { return local_conv1.in_channels(); }

  static SpatialAttentionParams zeros(std::size_t c, std::size_t r = kDefaultReductionRatio) {
    if (c == 0 || r == 0) throw ConfigError("spatial attention: channels and r must be >= 1");
    const std::size_t global_hidden = ceil_div(4 * c, r), local_hidden = ceil_div(c, r);
    return {ConvParams<T>::zeros(global_hidden, 2, 3), ConvParams<T>::zeros(1, global_hidden, 3),
            ConvParams<T>::zeros(local_hidden, c, 1), ConvParams<T>::zeros(1, local_hidden, 1), r};
  }

  static SpatialAttentionParams init(std::size_t c, std::size_t r, std::mt19937_64& rng) {
    if (c == 0 || r == 0) throw ConfigError("spatial attention: channels and r must be >= 1");
    const std::size_t global_hidden = ceil_div(4 * c, r), local_hidden = ceil_div(c, r);
    SpatialAttentionParams p;
    p.global_conv1 = init_conv<T>(global_hidden, 2, 3, rng);
    p.global_conv2 = init_conv<T>(1, global_hidden, 3, rng);
    p.local_conv1 = init_conv<T>(local_hidden, c, 1, rng);
    p.local_conv2 = init_conv<T>(1, local_hidden, 1, rng);
    p.reduction_ratio = r;
    return p;
  }

  template <class U>
  SpatialAttentionParams<U> cast() const {
    return {global_conv1.template cast<U>(), global_conv2.template cast<U>(), local_conv1.template cast<U>(),
            local_conv2.template cast<U>(), reduction_ratio};
  }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    self.global_conv1.visit(prefix + ".global_conv1", f);
    self.global_conv2.visit(prefix + ".global_conv2", f);
    self.local_conv1.visit(prefix + ".local_conv1", f);
    self.local_conv2.visit(prefix + ".local_conv2", f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) { visit_impl(*this, prefix, f); }
  template <class F>
  void visit(const std::string& prefix, F&& f) const { visit_impl(*this, prefix, f); }
};

template <class T>
struct ChannelAttentionParams {
  ConvParams<T> shared_conv1;  // C -> ceil(C/r), 1x1, applied to both descriptors
  ConvParams<T> shared_conv2;  // ceil(C/r) -> C, 1x1
  ConvParams<T> local_conv1;   // C -> ceil(C/r), 1x1
  ConvParams<T> local_conv2;   // ceil(C/r) -> C, 1x1
  std::size_t reduction_ratio = kDefaultReductionRatio;

  std::size_t channels() const { return local_conv1.in_channels(); }

  static ChannelAttentionParams zeros(std::size_t c, std::size_t r = kDefaultReductionRatio) {
    if (c == 0 || r == 0) throw ConfigError("channel attention: channels and r must be >= 1");
    const std::size_t hidden = ceil_div(c, r);
    return {ConvParams<T>::zeros(hidden, c, 1), ConvParams<T>::zeros(c, hidden, 1),
            ConvParams<T>::zeros(hidden, c, 1), ConvParams<T>::zeros(c, hidden, 1), r};
  }

  static ChannelAttentionParams init(std::size_t c, std::size_t r, std::mt19937_64& rng) {
    if (c == 0 || r == 0) throw ConfigError("channel attention: channels and r must be >= 1");
    const std::size_t hidden = ceil_div(c, r);
    ChannelAttentionParams p;
    p.shared_conv1 = init_conv<T>(hidden, c, 1, rng);
    p.shared_conv2 = init_conv<T>(c, hidden, 1, rng);
    p.local_conv1 = init_conv<T>(hidden, c, 1, rng);
    p.local_conv2 = init_conv<T>(c, hidden, 1, rng);
    p.reduction_ratio = r;
    return p;
  }

  template <class U>
  ChannelAttentionParams<U> cast() const {
    return {shared_conv1.template cast<U>(), shared_conv2.template cast<U>(), local_conv1.template cast<U>(),
            local_conv2.template cast<U>(), reduction_ratio};
  }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    self.shared_conv1.visit(prefix + ".shared_conv1", f);
    self.shared_conv2.visit(prefix + ".shared_conv2", f);
    self.local_conv1.visit(prefix + ".local_conv1", f);
    self.local_conv2.visit(prefix + ".local_conv2", f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) { visit_impl(*this, prefix, f); }
  template <class F>
  void visit(const std::string& prefix, F&& f) const { visit_impl(*this, prefix, f); }
};

enum class Arrangement { spatial_then_channel, channel_then_spatial, parallel, parallel_shared };

inline std::string_view to_string(Arrangement a) {
  switch (a) {
    case Arrangement::spatial_then_channel: return "spatial_then_channel";
    case Arrangement::channel_then_spatial: return "channel_then_spatial";
    case Arrangement::parallel: return "parallel";
    case Arrangement::parallel_shared: return "parallel_shared";
  }
  throw ConfigError("unknown arrangement");
}

inline Arrangement parse_arrangement(std::string_view s) {
  for (auto a : {Arrangement::spatial_then_channel, Arrangement::channel_then_spatial,
                 Arrangement::parallel, Arrangement::parallel_shared})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown arrangement '" + std::string(s) + "'");
}

template <class T>
struct AttentionParams {
  SpatialAttentionParams<T> spatial;
  ChannelAttentionParams<T> channel;
  Arrangement mode = Arrangement::spatial_then_channel;

  static AttentionParams zeros(std::size_t c, std::size_t r = kDefaultReductionRatio,
                               Arrangement mode = Arrangement::spatial_then_channel) {
    return {SpatialAttentionParams<T>::zeros(c, r), ChannelAttentionParams<T>::zeros(c, r), mode};
  }
  static AttentionParams init(std::size_t c, std::size_t r, Arrangement mode, std::mt19937_64& rng) {
    auto sp = SpatialAttentionParams<T>::init(c, r, rng);
    auto ch = ChannelAttentionParams<T>::init(c, r, rng);
    return {std::move(sp), std::move(ch), mode};
  }

  template <class U>
  AttentionParams<U> cast() const {
    return {spatial.template cast<U>(), channel.template cast<U>(), mode};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    spatial.visit(prefix + ".spatial", f);
    channel.visit(prefix + ".channel", f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    spatial.visit(prefix + ".spatial", f);
    channel.visit(prefix + ".channel", f);
  }
};

// ---------------------------------------------------------------------------
// spatial attention map

template <class T>
struct SpatialAttentionTrace {
  PoolContext avg_ctx;
  PoolContext max_ctx;
  ConvPairTrace<T> global;
  ConvPairTrace<T> local;
  Tensor<T> map;
};

template <class T>
struct SpatialAttentionGrads {
  Tensor<T> input;
  SpatialAttentionParams<T> params;
};

template <class T>
Tensor<T> spatial_attention_map(const Tensor<T>& x, const SpatialAttentionParams<T>& p,
                                SpatialAttentionTrace<T>* trace = nullptr) {
  if (x.rank() != 4) throw ShapeError("spatial_attention_map: input must be NCHW");
  if (x.dim(1) != p.channels())
    throw ShapeError("spatial_attention_map: input has " + std::to_string(x.dim(1)) +
                     " channels, params expect " + std::to_string(p.channels()));
  SpatialAttentionTrace<T> tr;
  const Tensor<T> pooled = concat_channels(pool(x, PoolAxis::channel, PoolKind::avg, &tr.avg_ctx),
                                           pool(x, PoolAxis::channel, PoolKind::max, &tr.max_ctx));
  const Tensor<T> global = conv_pair(pooled, p.global_conv1, p.global_conv2, &tr.global);
  const Tensor<T> local = conv_pair(x, p.local_conv1, p.local_conv2, &tr.local);
  Tensor<T> map = sigmoid(broadcast_add(local, global));
  if (trace) {
    tr.map = map;
    *trace = std::move(tr);
  }
  return map;
}

template <class T>
SpatialAttentionGrads<T> spatial_attention_backward(const SpatialAttentionTrace<T>& tr,
                                                    const SpatialAttentionParams<T>& p,
                                                    const Tensor<T>& grad_map) {
  if (tr.map.empty()) throw UsageError("spatial_attention_backward: missing forward trace");
  const Tensor<T> g_pre = sigmoid_backward(tr.map, grad_map);
  auto gg = conv_pair_backward(tr.global, p.global_conv1, p.global_conv2, g_pre);
  auto gl = conv_pair_backward(tr.local, p.local_conv1, p.local_conv2, g_pre);
  auto split = concat_channels_backward<T>(1, gg.input);
  Tensor<T> gx = std::move(gl.input);
  accumulate(gx, pool_backward(tr.avg_ctx, split.a));
  accumulate(gx, pool_backward(tr.max_ctx, split.b));
  SpatialAttentionGrads<T> g;
  g.input = std::move(gx);
  g.params = {std::move(gg.first), std::move(gg.second), std::move(gl.first), std::move(gl.second),
              p.reduction_ratio};
  return g;
}

// ---------------------------------------------------------------------------
// channel attention map

template <class T>
struct ChannelAttentionTrace {
  PoolContext avg_ctx;
  PoolContext max_ctx;
  ConvPairTrace<T> shared_avg;
  ConvPairTrace<T> shared_max;
  ConvPairTrace<T> local;
  Tensor<T> map;
};

template <class T>
struct ChannelAttentionGrads {
  Tensor<T> input;
  ChannelAttentionParams<T> params;
};

// `local_first` substitutes the first local conv (used when it is shared
// with the spatial branch); nullptr means p.local_conv1.
template <class T>
Tensor<T> channel_attention_map(const Tensor<T>& x, const ChannelAttentionParams<T>& p,
                                ChannelAttentionTrace<T>* trace = nullptr,
                                const ConvParams<T>* local_first = nullptr) {
  if (x.rank() != 4) throw ShapeError("channel_attention_map: input must be NCHW");
  if (x.dim(1) != p.channels())
    throw ShapeError("channel_attention_map: input has " + std::to_string(x.dim(1)) +
                     " channels, params expect " + std::to_string(p.channels()));
  const ConvParams<T>& l1 = local_first ? *local_first : p.local_conv1;
  ChannelAttentionTrace<T> tr;
  const Tensor<T> avg = pool(x, PoolAxis::spatial, PoolKind::avg, &tr.avg_ctx);
  const Tensor<T> mx = pool(x, PoolAxis::spatial, PoolKind::max, &tr.max_ctx);
  const Tensor<T> global = add(conv_pair(avg, p.shared_conv1, p.shared_conv2, &tr.shared_avg),
                               conv_pair(mx, p.shared_conv1, p.shared_conv2, &tr.shared_max));
  const Tensor<T> local = conv_pair(x, l1, p.local_conv2, &tr.local);
  Tensor<T> map = sigmoid(broadcast_add(local, global));
  if (trace) {
    tr.map = map;
    *trace = std::move(tr);
  }
  return map;
}

template <class T>
ChannelAttentionGrads<T> channel_attention_backward(const ChannelAttentionTrace<T>& tr,
                                                    const ChannelAttentionParams<T>& p,
                                                    const Tensor<T>& grad_map,
                                                    const ConvParams<T>* local_first = nullptr) {
  if (tr.map.empty()) throw UsageError("channel_attention_backward: missing forward trace");
  const ConvParams<T>& l1 = local_first ? *local_first : p.local_conv1;
  const Tensor<T> g_pre = sigmoid_backward(tr.map, grad_map);
  const Tensor<T> g_global = reduce_to_shape(g_pre, Shape{g_pre.dim(0), g_pre.dim(1), 1, 1});
  auto ga = conv_pair_backward(tr.shared_avg, p.shared_conv1, p.shared_conv2, g_global);
  auto gm = conv_pair_backward(tr.shared_max, p.shared_conv1, p.shared_conv2, g_global);
  auto gl = conv_pair_backward(tr.local, l1, p.local_conv2, g_pre);

  Tensor<T> gx = std::move(gl.input);
  accumulate(gx, pool_backward(tr.avg_ctx, ga.input));
  accumulate(gx, pool_backward(tr.max_ctx, gm.input));
  ChannelAttentionGrads<T> g;
  g.input = std::move(gx);
  g.params.shared_conv1 = std::move(ga.first);
  accumulate(g.params.shared_conv1, gm.first);
  g.params.shared_conv2 = std::move(ga.second);
  accumulate(g.params.shared_conv2, gm.second);
  g.params.local_conv1 = std::move(gl.first);
  g.params.local_conv2 = std::move(gl.second);
  g.params.reduction_ratio = p.reduction_ratio;
  return g;
}

// ---------------------------------------------------------------------------
// arrangements

template <class T>
struct DualAttentionTrace {
  Arrangement mode = Arrangement::spatial_then_channel;
  Tensor<T> input;
  Tensor<T> mid;  // x gated by the first map (sequential) or by S (parallel)
  SpatialAttentionTrace<T> spatial;
  ChannelAttentionTrace<T> channel;
};

template <class T>
struct AttentionGrads {
  Tensor<T> input;
  AttentionParams<T> params;
};

// spatial_then_channel: y = x*S(x), z = y*C(y)
// channel_then_spatial: y = x*C(x), z = y*S(y)
// parallel:             z = x*S(x)*C(x)
// parallel_shared:      parallel, with C's first local conv taken from S's
template <class T>
Tensor<T> apply_dual_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                               DualAttentionTrace<T>* trace = nullptr) {
  DualAttentionTrace<T> tr;
  tr.mode = p.mode;
  tr.input = x;
  Tensor<T> z;
  switch (p.mode) {
    case Arrangement::spatial_then_channel: {
      tr.mid = broadcast_mul(x, spatial_attention_map(x, p.spatial, &tr.spatial));
      z = mul(tr.mid, channel_attention_map(tr.mid, p.channel, &tr.channel));
      break;
    }
    case Arrangement::channel_then_spatial: {
      tr.mid = mul(x, channel_attention_map(x, p.channel, &tr.channel));
      z = broadcast_mul(tr.mid, spatial_attention_map(tr.mid, p.spatial, &tr.spatial));
      break;
    }
    case Arrangement::parallel:
    case Arrangement::parallel_shared: {
      const ConvParams<T>* shared =
          p.mode == Arrangement::parallel_shared ? &p.spatial.local_conv1 : nullptr;
      tr.mid = broadcast_mul(x, spatial_attention_map(x, p.spatial, &tr.spatial));
      z = mul(tr.mid, channel_attention_map(x, p.channel, &tr.channel, shared));
      break;
    }
    default:
      throw ConfigError("apply_dual_attention: unknown arrangement");
  }
  if (trace) *trace = std::move(tr);
  return z;
}

template <class T>
AttentionGrads<T> apply_dual_attention_backward(const DualAttentionTrace<T>& tr,
                                                const AttentionParams<T>& p,
                                                const Tensor<T>& grad_out) {
  if (tr.input.empty()) throw UsageError("apply_dual_attention_backward: missing forward trace");
  if (tr.mode != p.mode) throw UsageError("apply_dual_attention_backward: arrangement changed");
  AttentionGrads<T> g;
  g.params.mode = p.mode;
  switch (p.mode) {
    case Arrangement::spatial_then_channel: {
      auto gz = broadcast_mul_backward(tr.mid, tr.channel.map, grad_out);
      auto gc = channel_attention_backward(tr.channel, p.channel, gz.b);
      accumulate(gz.a, gc.input);
      auto gy = broadcast_mul_backward(tr.input, tr.spatial.map, gz.a);
      auto gs = spatial_attention_backward(tr.spatial, p.spatial, gy.b);
      accumulate(gy.a, gs.input);
      g.input = std::move(gy.a);
      g.params.spatial = std::move(gs.params);
      g.params.channel = std::move(gc.params);
      break;
    }
    case Arrangement::channel_then_spatial: {
      auto gz = broadcast_mul_backward(tr.mid, tr.spatial.map, grad_out);
      auto gs = spatial_attention_backward(tr.spatial, p.spatial, gz.b);
      accumulate(gz.a, gs.input);
      auto gy = broadcast_mul_backward(tr.input, tr.channel.map, gz.a);
      auto gc = channel_attention_backward(tr.channel, p.channel, gy.b);
      accumulate(gy.a, gc.input);
      g.input = std::move(gy.a);
      g.params.spatial = std::move(gs.params);
      g.params.channel = std::move(gc.params);
      break;
    }
    case Arrangement::parallel:
    case Arrangement::parallel_shared: {
      const bool shared = p.mode == Arrangement::parallel_shared;
      auto gz = broadcast_mul_backward(tr.mid, tr.channel.map, grad_out);
      auto gc = channel_attention_backward(tr.channel, p.channel, gz.b,
                                           shared ? &p.spatial.local_conv1 : nullptr);
      auto gy = broadcast_mul_backward(tr.input, tr.spatial.map, gz.a);
      auto gs = spatial_attention_backward(tr.spatial, p.spatial, gy.b);
      g.input = std::move(gy.a);
      accumulate(g.input, gs.input);
      accumulate(g.input, gc.input);
      if (shared) {
        // The shared conv lives in the spatial params; the channel copy is unused.
        accumulate(gs.params.local_conv1, gc.params.local_conv1);
        gc.params.local_conv1.weight.fill(T{});
        gc.params.local_conv1.bias.fill(T{});
      }
      g.params.spatial = std::move(gs.params);
      g.params.channel = std::move(gc.params);
      break;
    }
  }
  return g;
}

}  // namespace leafmask
