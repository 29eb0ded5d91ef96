#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "leafmask/metrics.hpp"

using namespace leafmask;

namespace {

LabelImage random_labels(std::mt19937_64& rng, std::size_t w, std::size_t h, std::uint32_t max_id) {
  std::uniform_int_distribution<std::uint32_t> d(0, max_id);
  LabelImage img(w, h);
  for (auto& v : img.ids) v = d(rng);
  return img;
}

// All-pairs Dice from explicit masks.
double best_dice_oracle(const LabelImage& pred, const LabelImage& gt) {
  std::set<std::uint32_t> gi(gt.ids.begin(), gt.ids.end()), pi(pred.ids.begin(), pred.ids.end());
  gi.erase(0);
  pi.erase(0);
  double acc = 0;
  for (auto g : gi) {
    double best = 0;
    for (auto p : pi) {
      std::vector<std::uint8_t> a(gt.ids.size()), b(gt.ids.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = gt.ids[i] == g;
        b[i] = pred.ids[i] == p;
      }
      best = std::max(best, dice(a, b));
    }
    acc += best;
  }
  return 100.0 * acc / static_cast<double>(gi.size());
}

LabelImage relabel(const LabelImage& img, const std::vector<std::uint32_t>& map) {
  LabelImage out = img;
  for (auto& v : out.ids) v = map[v];
  return out;
}

}  // namespace

TEST(Dice, Examples) {
  std::vector<std::uint8_t> a{1, 1, 1, 1, 0, 0, 0, 0}, b{0, 0, 1, 1, 1, 1, 0, 0}, c{0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_EQ(dice(a, a), 1.0);
  EXPECT_EQ(dice(a, c), 0.0);
  EXPECT_EQ(dice(a, b), 0.5);
  EXPECT_EQ(dice(b, a), 0.5);
  EXPECT_EQ(dice(std::vector<std::uint8_t>(4), std::vector<std::uint8_t>(4)), 1.0);
  EXPECT_THROW(dice(a, std::vector<std::uint8_t>(3)), ShapeError);
}

TEST(BestDice, IdenticalBlankAndEmpty) {
  LabelImage gt(4, 4, {0, 1, 1, 0, 0, 1, 1, 0, 2, 2, 0, 0, 2, 2, 0, 7});
  EXPECT_EQ(best_dice(gt, gt), 100.0);
  EXPECT_EQ(symmetric_best_dice(gt, gt), 100.0);
  EXPECT_EQ(best_dice(LabelImage(4, 4), gt), 0.0);
  EXPECT_THROW(best_dice(gt, LabelImage(4, 4)), UndefinedMetricError);
  EXPECT_THROW(best_dice(LabelImage(3, 4), gt), ShapeError);
}

TEST(BestDice, DirectionAveragesOverGroundTruth) {
  LabelImage gt(4, 1, {1, 1, 2, 2});
  LabelImage pred(4, 1, {3, 3, 3, 3});
  // gt 1 vs pred 3: 2*2/(2+4); same for gt 2.
  EXPECT_NEAR(best_dice(pred, gt), 100.0 * 4.0 / 6.0, 1e-12);
  EXPECT_NEAR(best_dice(gt, pred), 100.0 * 4.0 / 6.0, 1e-12);
  LabelImage pred2(4, 1, {1, 1, 0, 0});
  EXPECT_EQ(best_dice(pred2, gt), 50.0);
  EXPECT_EQ(best_dice(gt, pred2), 100.0);
  EXPECT_EQ(symmetric_best_dice(pred2, gt), 50.0);
  auto report = best_dice_report(pred2, gt);
  ASSERT_EQ(report.matches.size(), 2u);
  EXPECT_EQ(report.matches[0].best_pred_id, 1u);
  EXPECT_EQ(report.matches[1].best_pred_id, 0u);
}

TEST(BestDice, MatchesBruteForceOracle) {
  std::mt19937_64 rng(1);
  int checked = 0;
  while (checked < 300) {
    auto gt = random_labels(rng, 8, 8, 3), pred = random_labels(rng, 8, 8, 3);
    if (gt.instances().empty()) continue;
    EXPECT_EQ(best_dice(pred, gt), best_dice_oracle(pred, gt));
    if (!pred.instances().empty()) {
      const double s = symmetric_best_dice(pred, gt);
      EXPECT_LE(s, best_dice(pred, gt));
      EXPECT_LE(s, best_dice(gt, pred));
      EXPECT_EQ(s, std::min(best_dice_oracle(pred, gt), best_dice_oracle(gt, pred)));
    }
    ++checked;
  }
}

TEST(BestDice, RelabelInvariance) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    auto gt = random_labels(rng, 8, 8, 4), pred = random_labels(rng, 8, 8, 4);
    if (gt.instances().empty()) continue;
    std::vector<std::uint32_t> map{0, 11, 12, 13, 14};
    std::shuffle(map.begin() + 1, map.end(), rng);
    const double base = best_dice(pred, gt);
    EXPECT_DOUBLE_EQ(best_dice(relabel(pred, map), gt), base);
    EXPECT_DOUBLE_EQ(best_dice(pred, relabel(gt, map)), base);
    EXPECT_EQ(best_dice(relabel(gt, map), gt), 100.0);
  }
}

TEST(LabelImage, InstancesSortedDistinct) {
  LabelImage img(3, 2, {5, 0, 2, 2, 9, 5});
  EXPECT_EQ(img.instances(), (std::vector<std::uint32_t>{2, 5, 9}));
  EXPECT_THROW(LabelImage(2, 2, {1, 2, 3}), ShapeError);
}
