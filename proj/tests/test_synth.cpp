#include <gtest/gtest.h>

#include "leafmask/synth.hpp"

using namespace leafmask;

TEST(Synth, DeterministicPerSeed) {
  RosetteSpec spec;
  auto a = synth_rosette(3, spec), b = synth_rosette(3, spec), c = synth_rosette(4, spec);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.boxes, b.boxes);
  EXPECT_EQ(a.features, b.features);
  EXPECT_NE(a.labels, c.labels);
}

TEST(Synth, FiveLeavesFiveIdsFiveBoxes) {
  RosetteSpec spec;
  spec.n_leaves = 5;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = synth_rosette(seed, spec);
    EXPECT_EQ(s.labels.instances(), (std::vector<std::uint32_t>{1, 2, 3, 4, 5}));
    EXPECT_EQ(s.boxes.size(), 5u);
  }
}

TEST(Synth, ZeroOverlapGivesDisjointLeaves) {
  RosetteSpec spec;
  spec.overlap = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = synth_rosette(seed, spec);
    for (std::size_t i = 0; i < s.leaves.size(); ++i)
      for (std::size_t j = i + 1; j < s.leaves.size(); ++j)
        for (std::size_t p = 0; p < s.leaves[i].size(); ++p) ASSERT_FALSE(s.leaves[i][p] && s.leaves[j][p]);
  }
}

TEST(Synth, BoxesAreTightOverVisiblePixels) {
  auto s = synth_rosette(7, RosetteSpec{});
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    const Box& b = s.boxes[i];
    bool touches[4] = {false, false, false, false};
    for (std::size_t y = 0; y < s.labels.height; ++y)
      for (std::size_t x = 0; x < s.labels.width; ++x) {
        if (s.labels.at(x, y) != i + 1) continue;
        const double px = static_cast<double>(x), py = static_cast<double>(y);
        ASSERT_TRUE(px >= b.x1 && px + 1 <= b.x2 && py >= b.y1 && py + 1 <= b.y2);
        touches[0] |= px == b.x1;
        touches[1] |= py == b.y1;
        touches[2] |= px + 1 == b.x2;
        touches[3] |= py + 1 == b.y2;
      }
    EXPECT_TRUE(touches[0] && touches[1] && touches[2] && touches[3]);
  }
}

TEST(Synth, FeatureShapeAndErrors) {
  RosetteSpec spec;
  spec.size = 32;
  spec.feature_groups = 3;
  auto s = synth_rosette(1, spec);
  EXPECT_EQ(s.features.shape(), (Shape{4, 16, 16}));
  EXPECT_TRUE(all_finite(s.features));
  EXPECT_THROW(synth_rosette(1, RosetteSpec{0}), ConfigError);
  RosetteSpec odd;
  odd.size = 33;
  EXPECT_THROW(synth_rosette(1, odd), ConfigError);
}
