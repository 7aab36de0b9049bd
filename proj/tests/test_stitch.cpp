#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "nvcam/stitch.hpp"

using namespace nvcam;

namespace {

ParameterMap tile(double x_um, double y_um, std::string set, double detuning, double omega_of_col_offset = 0.0,
                  int rows = 4, int cols = 6) {
  ParameterMap m(rows, cols);
  m.mode = "rabi";
  m.geometry.magnification = 50;
  m.geometry.pitch_um = 3.0;
  m.geometry.pose = {x_um, y_um, std::move(set), detuning};
  m.provenance_hash = static_cast<std::uint64_t>(x_um * 7 + y_um * 13 + 1);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      auto& p = m.at(r, c);
      p.converged = true;
      const double s = 5.0 + omega_of_col_offset * (x_um / 3.0 + c);
      p.value = {1.0, 0.05, std::hypot(s, detuning), 0.1, 1.3};
      p.sigma = {1e-3, 1e-3, 0.02, 0.01, 0.1};
      p.residual_norm = 1.0;
    }
  return m;
}

}  // namespace

TEST(Stitch, SingleTileIsIdentity) {
  const auto t = tile(0, 0, "A", 0);
  StitchReport rep;
  const auto out = stitch({t}, {}, &rep);
  ASSERT_EQ(out.rows, t.rows);
  ASSERT_EQ(out.cols, t.cols);
  for (std::size_t i = 0; i < t.pixels.size(); ++i) {
    for (std::size_t k = 0; k < kNumFitParams; ++k) {
      EXPECT_NEAR(out.pixels[i].value[k], t.pixels[i].value[k], 1e-12);
      EXPECT_NEAR(out.pixels[i].sigma[k], t.pixels[i].sigma[k], 1e-12);
    }
  }
  EXPECT_EQ(rep.gap_pixels, 0u);
  EXPECT_EQ(rep.overlap_pixels, 0u);
  EXPECT_EQ(out.provenance_hash, t.provenance_hash);
}

TEST(Stitch, OnePitchOffsetAddsOneColumn) {
  const auto a = tile(0, 0, "A", 0);
  const auto b = tile(3, 0, "B", 0);
  StitchReport rep;
  const auto out = stitch({a, b}, {}, &rep);
  EXPECT_EQ(out.cols, a.cols + 1);
  EXPECT_EQ(out.rows, a.rows);
  EXPECT_EQ(rep.overlap_pixels, static_cast<std::size_t>(a.rows * (a.cols - 1)));
  for (int r = 0; r < out.rows; ++r)
    for (int c = 1; c < a.cols; ++c) {
      EXPECT_NEAR(out.at(r, c).value[kOmega], a.at(r, c).value[kOmega], 1e-12);
      EXPECT_EQ(out.at(r, c).sources, 3u);
    }
  EXPECT_NEAR(out.at(0, 1).sigma[kOmega], 0.02 / std::sqrt(2.0), 1e-12);
}

TEST(Stitch, OrderDoesNotMatter) {
  std::vector<ParameterMap> tiles{tile(0, 0, "A", 0, 0.01), tile(12, 0, "B", 0, 0.01), tile(6, 9, "C", 0, 0.01)};
  tiles[1].at(0, 0).value[kOmega] += 0.05;
  const auto ref = stitch(tiles);
  std::sort(tiles.begin(), tiles.end(),
            [](const auto& x, const auto& y) { return x.geometry.pose.set_id < y.geometry.pose.set_id; });
  do {
    const auto out = stitch(tiles);
    ASSERT_EQ(out.pixels.size(), ref.pixels.size());
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
      EXPECT_EQ(out.pixels[i].flags, ref.pixels[i].flags);
      if (ref.pixels[i].converged) EXPECT_EQ(out.pixels[i].value, ref.pixels[i].value);
    }
    EXPECT_EQ(out.provenance_hash, ref.provenance_hash);
  } while (std::next_permutation(tiles.begin(), tiles.end(), [](const auto& x, const auto& y) {
    return x.geometry.pose.set_id < y.geometry.pose.set_id;
  }));
}

TEST(Stitch, GapsAreFlagged) {
  StitchReport rep;
  const auto out = stitch({tile(0, 0, "A", 0), tile(30, 0, "B", 0)}, {}, &rep);
  EXPECT_EQ(out.cols, 16);
  EXPECT_EQ(rep.gap_pixels, 4u * 4u);
  EXPECT_TRUE(out.at(0, 7).flags & flags::kGap);
  EXPECT_FALSE(out.at(0, 7).converged);
}

TEST(Stitch, ThreeTileRampIsContinuous) {
  const double slope = 0.01;
  const auto out = stitch({tile(0, 0, "A", 0, slope), tile(15, 0, "B", 0, slope), tile(30, 0, "C", 0, slope)});
  ASSERT_EQ(out.cols, 16);
  for (int c = 1; c < out.cols; ++c)
    EXPECT_NEAR(out.at(2, c).value[kOmega] - out.at(2, c - 1).value[kOmega], slope, 1e-9);
}

TEST(Stitch, DetuningSeamRemoved) {
  const auto a = tile(0, 0, "A", 0.0);
  const auto b = tile(18, 0, "B", 2.0);
  StitchOptions raw;
  raw.correct_detuning = false;
  const auto before = stitch({a, b}, raw);
  EXPECT_NEAR(before.at(1, 6).value[kOmega] - before.at(1, 5).value[kOmega], std::sqrt(29.0) - 5.0, 1e-9);
  EXPECT_NEAR(std::sqrt(29.0) - 5.0, 0.385, 1e-3);
  const auto after = stitch({a, b});
  EXPECT_NEAR(after.at(1, 6).value[kOmega] - after.at(1, 5).value[kOmega], 0.0, 1e-9);
  EXPECT_GT(after.at(1, 6).sigma[kOmega], 0.02);
}

TEST(Stitch, NonPhysicalPixelsInvalid) {
  auto t = tile(0, 0, "A", 2.0);
  t.at(0, 0).value[kOmega] = 1.5;
  StitchReport rep;
  const auto out = stitch({t}, {}, &rep);
  EXPECT_FALSE(out.at(0, 0).converged);
  EXPECT_TRUE(out.at(0, 0).flags & flags::kNonPhysical);
  EXPECT_EQ(rep.invalid_pixels, 1u);
}

TEST(Stitch, CorrectionOnlyForRabi) {
  auto t = tile(0, 0, "A", 2.0);
  t.mode = "sq-ramsey";
  const auto out = stitch({t});
  EXPECT_DOUBLE_EQ(out.at(0, 0).value[kOmega], t.at(0, 0).value[kOmega]);
}

TEST(Stitch, FirstPolicyKeepsEarliestTile) {
  auto a = tile(0, 0, "A", 0);
  auto b = tile(3, 0, "B", 0);
  for (auto& p : b.pixels) p.value[kOmega] += 1.0;
  StitchOptions opt;
  opt.overlap = OverlapPolicy::First;
  const auto out = stitch({b, a}, opt);
  EXPECT_DOUBLE_EQ(out.at(0, 2).value[kOmega], a.at(0, 2).value[kOmega]);
}

TEST(Stitch, Rejections) {
  auto a = tile(0, 0, "A", 0);
  auto b = tile(3, 0, "B", 0);
  b.geometry.magnification = 10;
  EXPECT_THROW((void)stitch({a, b}), std::invalid_argument);
  b = tile(3, 0, "B", 0);
  b.geometry.bin = 2;
  EXPECT_THROW((void)stitch({a, b}), std::invalid_argument);
  b = tile(3, 0, "B", 0);
  b.mode = "dq-echo";
  EXPECT_THROW((void)stitch({a, b}), std::invalid_argument);
  b = tile(1.3, 0, "B", 0);
  EXPECT_THROW((void)stitch({a, b}), std::invalid_argument);
  EXPECT_THROW((void)stitch({}), std::invalid_argument);
}

TEST(CorrectRabiDetuning, Pythagoras) {
  PixelFit p;
  p.converged = true;
  p.value = {1, 0.05, 5.0, 0, 1};
  p.sigma = {0, 0, 0.01, 0, 0};
  EXPECT_TRUE(correct_rabi_detuning(p, 3.0));
  EXPECT_NEAR(p.value[kOmega], 4.0, 1e-12);
  EXPECT_NEAR(p.sigma[kOmega], 0.0125, 1e-12);
}
