#pragma once

#include <random>
#include <string>
#include <vector>

#include "leafmask/attention.hpp"
#include "leafmask/init.hpp"
#include "leafmask/ops.hpp"

namespace leafmask {

// Small stand-in for the bases decoder: a stack of 3x3 convs with
// rectifiers, the dual attention module, a 1x1 projection to K bases and a
// 2x bilinear upsample.
template <class T>
struct DecoderParams {
  std::vector<ConvParams<T>> stack;
  ConvParams<T> to_bases;

  std::size_t in_channels() const {
    return stack.empty() ? to_bases.in_channels() : stack.front().in_channels();
  }
  std::size_t width() const { return to_bases.in_channels(); }
  std::size_t num_bases() const { return to_bases.out_channels(); }

  static DecoderParams init(std::size_t in_c, std::size_t width, std::size_t depth, std::size_t k,
                            std::mt19937_64& rng) {
    if (k == 0) throw ConfigError("bases decoder: K must be >= 1");
    DecoderParams p;
    for (std::size_t i = 0; i < depth; ++i) p.stack.push_back(init_conv<T>(width, i ? width : in_c, 3, rng));
    p.to_bases = init_conv<T>(k, depth ? width : in_c, 1, rng);
    return p;
  }

  template <class U>
  DecoderParams<U> cast() const {
    DecoderParams<U> out;
    for (const auto& c : stack) out.stack.push_back(c.template cast<U>());
    out.to_bases = to_bases.template cast<U>();
    return out;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < stack.size(); ++i) stack[i].visit(prefix + ".stack" + std::to_string(i), f);
    to_bases.visit(prefix + ".to_bases", f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    for (std::size_t i = 0; i < stack.size(); ++i) stack[i].visit(prefix + ".stack" + std::to_string(i), f);
    to_bases.visit(prefix + ".to_bases", f);
  }
};

template <class T>
struct DecoderTrace {
  std::vector<Tensor<T>> stack_inputs;
  std::vector<Tensor<T>> stack_pre;
  DualAttentionTrace<T> attention;
  Tensor<T> attended;
  Shape projected_shape;
};

template <class T>
struct DecoderGrads {
  Tensor<T> features;
  DecoderParams<T> decoder;
  AttentionParams<T> attention;
};

// (N,C,H,W) features -> (N,K,2H,2W) bases.
template <class T>
Tensor<T> bases_decoder(const Tensor<T>& features, const DecoderParams<T>& dp,
                        const AttentionParams<T>& ap, std::size_t k,
                        DecoderTrace<T>* trace = nullptr) {
  if (k < 1) throw ConfigError("bases_decoder: K must be >= 1");
  if (dp.num_bases() != k)
    throw ShapeError("bases_decoder: projection yields " + std::to_string(dp.num_bases()) +
                     " bases, K = " + std::to_string(k));
  if (features.rank() != 4) throw ShapeError("bases_decoder: features must be NCHW");
  DecoderTrace<T> tr;
  Tensor<T> h = features;
  const auto slope = static_cast<T>(kActivationSlope);
  for (const auto& conv : dp.stack) {
    tr.stack_inputs.push_back(h);
    Tensor<T> pre = conv2d(h, conv);
    h = relu(pre, slope);
    tr.stack_pre.push_back(std::move(pre));
  }
  tr.attended = apply_dual_attention(h, ap, &tr.attention);
  const Tensor<T> projected = conv2d(tr.attended, dp.to_bases);
  tr.projected_shape = projected.shape();
  Tensor<T> bases = resize_bilinear(projected, 2 * projected.dim(2), 2 * projected.dim(3));
  if (trace) *trace = std::move(tr);
  return bases;
}

template <class T>
DecoderGrads<T> bases_decoder_backward(const DecoderTrace<T>& tr, const DecoderParams<T>& dp,
                                       const AttentionParams<T>& ap, const Tensor<T>& grad_bases) {
  if (tr.attended.empty()) throw UsageError("bases_decoder_backward: missing forward trace");
  DecoderGrads<T> g;
  const Tensor<T> g_proj = resize_bilinear_backward(tr.projected_shape, grad_bases);
  auto gb = conv2d_backward(tr.attended, dp.to_bases, g_proj);
  g.decoder.to_bases = std::move(gb.params);
  auto ga = apply_dual_attention_backward(tr.attention, ap, gb.input);
  g.attention = std::move(ga.params);
  Tensor<T> gh = std::move(ga.input);
  const auto slope = static_cast<T>(kActivationSlope);
  g.decoder.stack.resize(dp.stack.size());
  for (std::size_t i = dp.stack.size(); i-- > 0;) {
    auto gc = conv2d_backward(tr.stack_inputs[i], dp.stack[i], relu_backward(tr.stack_pre[i], slope, gh));
    g.decoder.stack[i] = std::move(gc.params);
    gh = std::move(gc.input);
  }
  g.features = std::move(gh);
  return g;
}

}  // namespace leafmask
