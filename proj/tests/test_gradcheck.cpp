#include <gtest/gtest.h>

#include "leafmask/gradcheck.hpp"

using namespace leafmask;

TEST(GradCheck, SuitePassesOnSeveralSeeds) {
  for (std::uint64_t seed = 100; seed < 105; ++seed)
    for (const auto& r : gradcheck_suite(seed)) {
      EXPECT_TRUE(r.passed(kGradCheckTolerance)) << r.name << " seed " << seed << " rel " << r.max_rel_error
                                                 << " at " << r.worst;
      EXPECT_GT(r.checked, 0u) << r.name;
    }
}

TEST(GradCheck, SuiteCoversEveryComponent) {
  std::vector<std::string> names;
  for (const auto& r : gradcheck_suite(0)) names.push_back(r.name);
  for (const char* want : {"conv2d", "resize_bilinear", "sample_points_bilinear", "spatial_attention",
                           "channel_attention", "bases_decoder", "assembly", "point_predictor", "losses"}) {
    bool found = false;
    for (const auto& n : names) found |= n.find(want) != std::string::npos;
    EXPECT_TRUE(found) << want;
  }
  EXPECT_GE(names.size(), 18u);
}

TEST(GradCheck, DetectsWrongGradient) {
  Tensor<FdReal> x({3}, std::vector<FdReal>{0.5L, -1.0L, 2.0L});
  auto loss = [&] { return x[0] * x[0] + 3 * x[1] + x[2] * x[2] * x[2]; };
  Tensor<double> right({3}, {1.0, 3.0, 12.0}), wrong({3}, {1.0, 3.0, 12.1});
  auto ok = finite_difference_check("cubic", {{"x", &x}}, {right}, loss);
  EXPECT_TRUE(ok.passed(kGradCheckTolerance)) << ok.max_rel_error;
  auto bad = finite_difference_check("cubic", {{"x", &x}}, {wrong}, loss);
  EXPECT_FALSE(bad.passed(kGradCheckTolerance));
  EXPECT_EQ(bad.worst, "x[2]");
  EXPECT_THROW(finite_difference_check("n", {{"x", &x}}, {}, loss), UsageError);
}
