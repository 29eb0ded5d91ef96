#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "leafmask/attention.hpp"
#include "leafmask/decoder.hpp"
#include "support.hpp"

using namespace leafmask;

namespace {

constexpr Arrangement kModes[] = {Arrangement::spatial_then_channel, Arrangement::channel_then_spatial,
                                  Arrangement::parallel, Arrangement::parallel_shared};

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }
double rect(double v) { return v > 0 ? v : 0.0; }

// Sets a conv to hand-picked values; 3x3 kernels only get their centre tap.
void set_conv(ConvParams<double>& c, std::vector<double> w, std::vector<double> b) {
  const std::size_t oc = c.out_channels(), ic = c.in_channels(), k = c.kernel_h();
  c.weight.fill(0.0);
  for (std::size_t o = 0; o < oc; ++o)
    for (std::size_t i = 0; i < ic; ++i) c.weight(o, i, k / 2, k / 2) = w[o * ic + i];
  c.bias = Tensor<double>({oc}, std::move(b));
}

template <class T>
Tensor<T> permute_spatial(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  Tensor<T> out(x.shape());
  const std::size_t hw = x.dim(2) * x.dim(3), planes = x.dim(0) * x.dim(1);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + perm[i]] = x[p * hw + i];
  return out;
}

}  // namespace

TEST(SpatialAttention, ZeroParamsGiveHalf) {
  auto p = SpatialAttentionParams<float>::zeros(5);
  auto m = spatial_attention_map(lmtest::random_tensor<float>({2, 5, 3, 4}, 1), p);
  EXPECT_EQ(m.shape(), (Shape{2, 1, 3, 4}));
  for (float v : m.data()) EXPECT_EQ(v, 0.5f);
}

TEST(SpatialAttention, HiddenWidths) {
  auto p = SpatialAttentionParams<float>::zeros(32, 16);
  EXPECT_EQ(p.global_conv1.weight.shape(), (Shape{8, 2, 3, 3}));
  EXPECT_EQ(p.global_conv2.weight.shape(), (Shape{1, 8, 3, 3}));
  EXPECT_EQ(p.local_conv1.weight.shape(), (Shape{2, 32, 1, 1}));
  EXPECT_EQ(p.local_conv2.weight.shape(), (Shape{1, 2, 1, 1}));
  auto q = SpatialAttentionParams<float>::zeros(3, 16);
  EXPECT_EQ(q.global_conv1.out_channels(), 1u);
  EXPECT_EQ(q.local_conv1.out_channels(), 1u);
}

TEST(SpatialAttention, HandSetWeightsMatchComposition) {
  Tensor<double> x({1, 2, 2, 2}, {0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 0.0, 1.0});
  auto p = SpatialAttentionParams<double>::zeros(2);
  set_conv(p.global_conv1, {0.7, -0.4}, {0.1});
  set_conv(p.global_conv2, {1.3}, {-0.2});
  set_conv(p.local_conv1, {0.6, 0.9}, {0.05});
  set_conv(p.local_conv2, {-1.1}, {0.3});
  auto m = spatial_attention_map(x, p);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t xx = 0; xx < 2; ++xx) {
      const double a = x(0, 0, y, xx), b = x(0, 1, y, xx);
      const double g = 1.3 * rect(0.7 * (a + b) / 2 - 0.4 * std::max(a, b) + 0.1) - 0.2;
      const double l = -1.1 * rect(0.6 * a + 0.9 * b + 0.05) + 0.3;
      EXPECT_NEAR(m(0, 0, y, xx), sig(g + l), 1e-14);
    }
}

TEST(SpatialAttention, ChannelMismatch) {
  EXPECT_THROW(spatial_attention_map(Tensor<float>({1, 3, 2, 2}), SpatialAttentionParams<float>::zeros(4)),
               ShapeError);
}

TEST(ChannelAttention, ZeroParamsGiveHalf) {
  auto m = channel_attention_map(lmtest::random_tensor<float>({1, 4, 3, 3}, 2),
                                 ChannelAttentionParams<float>::zeros(4));
  EXPECT_EQ(m.shape(), (Shape{1, 4, 3, 3}));
  for (float v : m.data()) EXPECT_EQ(v, 0.5f);
}

TEST(ChannelAttention, SpatiallyConstantInputGivesConstantMap) {
  std::mt19937_64 rng(3);
  auto p = ChannelAttentionParams<double>::init(6, 4, rng);
  Tensor<double> x({1, 6, 4, 5});
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t i = 0; i < 20; ++i) x[c * 20 + i] = 0.3 * static_cast<double>(c) - 0.7;
  auto m = channel_attention_map(x, p);
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t i = 1; i < 20; ++i) EXPECT_EQ(m[c * 20 + i], m[c * 20]);
}

TEST(ChannelAttention, HandSetWeightsMatchComposition) {
  Tensor<double> x({1, 2, 2, 2}, {0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 0.0, 1.0});
  auto p = ChannelAttentionParams<double>::zeros(2);
  set_conv(p.shared_conv1, {0.8, -0.3}, {0.2});
  set_conv(p.shared_conv2, {1.2, -0.6}, {0.1, -0.1});
  set_conv(p.local_conv1, {-0.5, 0.4}, {0.3});
  set_conv(p.local_conv2, {0.9, 1.4}, {-0.2, 0.05});
  auto m = channel_attention_map(x, p);
  double avg[2], mx[2];
  for (std::size_t c = 0; c < 2; ++c) {
    avg[c] = (x[c * 4] + x[c * 4 + 1] + x[c * 4 + 2] + x[c * 4 + 3]) / 4;
    mx[c] = std::max({x[c * 4], x[c * 4 + 1], x[c * 4 + 2], x[c * 4 + 3]});
  }
  const double ha = rect(0.8 * avg[0] - 0.3 * avg[1] + 0.2), hm = rect(0.8 * mx[0] - 0.3 * mx[1] + 0.2);
  const double w2[2] = {1.2, -0.6}, b2[2] = {0.1, -0.1}, lw2[2] = {0.9, 1.4}, lb2[2] = {-0.2, 0.05};
  for (std::size_t c = 0; c < 2; ++c) {
    const double global = (w2[c] * ha + b2[c]) + (w2[c] * hm + b2[c]);
    for (std::size_t i = 0; i < 4; ++i) {
      const double hl = rect(-0.5 * x[i] + 0.4 * x[4 + i] + 0.3);
      EXPECT_NEAR(m[c * 4 + i], sig(lw2[c] * hl + lb2[c] + global), 1e-14);
    }
  }
}

TEST(ChannelAttention, SpatialPermutationEquivariance) {
  std::mt19937_64 rng(4);
  auto p = ChannelAttentionParams<float>::init(8, kDefaultReductionRatio, rng);
  auto x = lmtest::random_tensor<float>({1, 8, 5, 6}, 5);
  const auto base = channel_attention_map(x, p);
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    EXPECT_EQ(channel_attention_map(permute_spatial(x, perm), p), permute_spatial(base, perm));
  }
}

TEST(DualAttention, ZeroParamsQuarterEveryMode) {
  auto x = lmtest::random_tensor<float>({2, 3, 4, 4}, 6);
  for (auto mode : kModes) {
    auto z = apply_dual_attention(x, AttentionParams<float>::zeros(3, kDefaultReductionRatio, mode));
    ASSERT_EQ(z.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(z[i], 0.25f * x[i]) << to_string(mode);
  }
}

TEST(DualAttention, NeverIncreasesMagnitude) {
  std::mt19937_64 rng(7);
  for (auto mode : kModes) {
    auto p = AttentionParams<double>::init(5, 2, mode, rng);
    auto x = lmtest::random_tensor<double>({1, 5, 6, 6}, 8, -3.0, 3.0);
    auto z = apply_dual_attention(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(z[i]), std::abs(x[i]));
    auto s = spatial_attention_map(x, p.spatial);
    auto c = channel_attention_map(x, p.channel);
    for (double v : s.data()) EXPECT_TRUE(v > 0.0 && v < 1.0);
    for (double v : c.data()) EXPECT_TRUE(v > 0.0 && v < 1.0);
  }
}

TEST(DualAttention, SharedMatchesParallelWithCopiedWeights) {
  std::mt19937_64 rng(9);
  auto p = AttentionParams<double>::init(4, 2, Arrangement::parallel, rng);
  p.channel.local_conv1 = p.spatial.local_conv1;
  auto q = p;
  q.mode = Arrangement::parallel_shared;
  auto x = lmtest::random_tensor<double>({1, 4, 3, 5}, 10);
  EXPECT_EQ(apply_dual_attention(x, p), apply_dual_attention(x, q));
}

TEST(DualAttention, SequentialOrderMatters) {
  std::mt19937_64 rng(10);
  auto p = AttentionParams<double>::init(4, 2, Arrangement::spatial_then_channel, rng);
  auto q = p;
  q.mode = Arrangement::channel_then_spatial;
  auto x = lmtest::random_tensor<double>({1, 4, 3, 3}, 11);
  auto y = broadcast_mul(x, spatial_attention_map(x, p.spatial));
  EXPECT_EQ(apply_dual_attention(x, p), mul(y, channel_attention_map(y, p.channel)));
  auto y2 = mul(x, channel_attention_map(x, q.channel));
  EXPECT_EQ(apply_dual_attention(x, q), broadcast_mul(y2, spatial_attention_map(y2, q.spatial)));
}

TEST(DualAttention, ArrangementNames) {
  for (auto mode : kModes) EXPECT_EQ(parse_arrangement(to_string(mode)), mode);
  EXPECT_THROW(parse_arrangement("serial"), ConfigError);
  auto p = AttentionParams<float>::zeros(2);
  p.mode = static_cast<Arrangement>(42);
  EXPECT_THROW(apply_dual_attention(Tensor<float>({1, 2, 2, 2}), p), ConfigError);
}

TEST(BasesDecoder, ChannelCountEqualsK) {
  std::mt19937_64 rng(12);
  auto x = lmtest::random_tensor<float>({1, 3, 6, 5}, 13);
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    auto dp = DecoderParams<float>::init(3, 8, 2, k, rng);
    auto ap = AttentionParams<float>::init(8, kDefaultReductionRatio, Arrangement::spatial_then_channel, rng);
    EXPECT_EQ(bases_decoder(x, dp, ap, k).shape(), (Shape{1, k, 12, 10}));
  }
}

TEST(BasesDecoder, ZeroFinalConvGivesZeroBases) {
  std::mt19937_64 rng(14);
  auto dp = DecoderParams<float>::init(3, 4, 1, 4, rng);
  dp.to_bases = ConvParams<float>::zeros(4, 4, 1);
  auto ap = AttentionParams<float>::init(4, 2, Arrangement::parallel, rng);
  for (const auto out = bases_decoder(lmtest::random_tensor<float>({1, 3, 4, 4}, 15), dp, ap, 4); float v : out.values())
    EXPECT_EQ(v, 0.0f);
}

TEST(BasesDecoder, Errors) {
  std::mt19937_64 rng(16);
  auto dp = DecoderParams<float>::init(3, 4, 1, 2, rng);
  auto ap = AttentionParams<float>::zeros(4);
  EXPECT_THROW(bases_decoder(Tensor<float>({1, 3, 4, 4}), dp, ap, 0), ConfigError);
  EXPECT_THROW(bases_decoder(Tensor<float>({1, 3, 4, 4}), dp, ap, 3), ShapeError);
  EXPECT_THROW(DecoderParams<float>::init(3, 4, 1, 0, rng), ConfigError);
}
