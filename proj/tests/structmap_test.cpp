#include <gtest/gtest.h>

#include "oracles.hpp"
#include "sspf/structmap.hpp"

using namespace sspf;

namespace {

std::vector<std::uint8_t> bytes(const BinaryMap& m) { return {m.values().begin(), m.values().end()}; }

}  // namespace

TEST(Sobel, ConstantImageHasNoGradient) {
  const auto g = sobel_magnitude(Tensor<double>::plane(9, 7, 0.3));
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Sobel, VerticalStepGivesBandOfFour) {
  Tensor<double> img = Tensor<double>::plane(6, 8);
  for (int y = 0; y < 6; ++y)
    for (int x = 4; x < 8; ++x) img.at(y, x) = 1.0;
  const auto g = sobel_magnitude(img);
  const auto ref = oracle::sobel_magnitude(img);
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 8; ++x) {
      EXPECT_NEAR(g.at(y, x), ref.at(y, x), 1e-12);
      EXPECT_NEAR(g.at(y, x), (x == 3 || x == 4) ? 4.0 : 0.0, 1e-12);
    }
  }
}

TEST(Sobel, RandomPlaneMatchesOracle) {
  const auto img = oracle::random_tensor<double>(1, 5, 5, 3);
  EXPECT_LE(max_abs_diff(sobel_magnitude(img), oracle::sobel_magnitude(img)), 1e-12);
}

TEST(Sobel, EmptyImageThrows) { EXPECT_THROW(sobel_magnitude(Tensor<double>()), ShapeError); }

TEST(Binarize, TwoPixelPlane) {
  Tensor<double> g = Tensor<double>::plane(1, 2);
  g.at(0, 1) = 2.0;
  EXPECT_EQ(bytes(binarize_by_global_mean(g, Polarity::kFlatPositive)), (std::vector<std::uint8_t>{1, 0}));
  EXPECT_EQ(bytes(binarize_by_global_mean(g, Polarity::kEdgePositive)), (std::vector<std::uint8_t>{0, 1}));
}

TEST(Binarize, ConstantPlaneIsAllOnesUnderBothPolarities) {
  const Tensor<double> g = Tensor<double>::plane(4, 4, 0.1);
  for (auto p : {Polarity::kFlatPositive, Polarity::kEdgePositive}) {
    const BinaryMap m = binarize_by_global_mean(g, p);
    for (auto v : m.values()) EXPECT_EQ(v, 1);
  }
}

TEST(Binarize, RandomPlanesMatchBruteForce) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto img = oracle::random_tensor<double>(1, 16, 16, 100 + s);
    for (bool edge : {true, false}) {
      const auto got = binarize_by_global_mean(sobel_magnitude(img), edge ? Polarity::kEdgePositive : Polarity::kFlatPositive);
      EXPECT_EQ(bytes(got), oracle::structure_map(img, edge)) << "seed " << s;
    }
  }
}

TEST(Binarize, PolaritiesAreComplementsAwayFromTheMean) {
  const auto img = oracle::random_tensor<double>(1, 16, 16, 5);
  const auto a = binarize_by_global_mean(sobel_magnitude(img), Polarity::kEdgePositive);
  const auto b = binarize_by_global_mean(sobel_magnitude(img), Polarity::kFlatPositive);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i] + b[i], 1);
}

TEST(Binarize, InvariantToPositiveScaling) {
  const auto img = oracle::random_tensor<double>(1, 16, 16, 8);
  for (double k : {0.5, 3.0, 0.37}) {
    Tensor<double> scaled = img;
    scaled *= k;
    for (auto p : {Polarity::kEdgePositive, Polarity::kFlatPositive}) {
      EXPECT_EQ(binarize_by_global_mean(sobel_magnitude(scaled), p), binarize_by_global_mean(sobel_magnitude(img), p));
    }
  }
}

TEST(Pyramid, ConstantImageFlatPolarityIsAllOnes) {
  const auto pyr = structure_pyramid_gt(Tensor<double>::plane(64, 64, 0.4), 3, Polarity::kFlatPositive);
  ASSERT_EQ(pyr.n_levels(), 3);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(pyr.levels[k].height(), 64 >> k);
    EXPECT_EQ(pyr.levels[k].width(), 64 >> k);
    for (auto v : pyr.levels[k].values()) EXPECT_EQ(v, 1);
  }
}

TEST(Pyramid, SingleLevelIsPlainBinarization) {
  const auto img = oracle::random_tensor<double>(1, 12, 10, 2);
  EXPECT_EQ(structure_pyramid_gt(img, 1).levels[0], binarize_by_global_mean(sobel_magnitude(img)));
}

TEST(Pyramid, CheckerboardMatchesComposedOracle) {
  Tensor<double> img = Tensor<double>::plane(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) img.at(y, x) = ((y / 3 + x / 5) % 2) ? 0.9 : 0.1;
  for (bool edge : {true, false}) {
    const auto pyr = structure_pyramid_gt(img, 3, edge ? Polarity::kEdgePositive : Polarity::kFlatPositive);
    Tensor<double> cur = img;
    for (int k = 0; k < 3; ++k) {
      if (k > 0) cur = oracle::pool2(cur);
      EXPECT_EQ(bytes(pyr.levels[k]), oracle::structure_map(cur, edge)) << "level " << k;
    }
  }
}

TEST(Pyramid, OddSizesHalveByFloor) {
  const auto pyr = structure_pyramid_gt(oracle::random_tensor<double>(1, 13, 9, 1), 3);
  EXPECT_EQ(pyr.levels[1].height(), 6);
  EXPECT_EQ(pyr.levels[1].width(), 4);
  EXPECT_EQ(pyr.levels[2].height(), 3);
  EXPECT_EQ(pyr.levels[2].width(), 2);
}

TEST(Pyramid, TooSmallThrows) {
  EXPECT_THROW(structure_pyramid_gt(Tensor<double>::plane(3, 8), 3), ShapeError);
}

TEST(Pyramid, Deterministic) {
  const auto img = oracle::random_tensor<double>(1, 16, 16, 4);
  EXPECT_EQ(structure_pyramid_gt(img, 3).levels, structure_pyramid_gt(img, 3).levels);
}

TEST(DisplayMap, ConstantImageIsAllZero) {
  const BinaryMap m = edge_map_for_display(Tensor<double>::plane(8, 8, 0.2));
  for (auto v : m.values()) EXPECT_EQ(v, 0);
}

TEST(DisplayMap, SingleBrightPixelMarksItsSobelSupport) {
  Tensor<double> img = Tensor<double>::plane(9, 9);
  img.at(4, 4) = 1.0;
  const auto m = edge_map_for_display(img);
  EXPECT_EQ(bytes(m), oracle::structure_map(img, true));
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x) {
      const bool near = std::abs(y - 4) <= 1 && std::abs(x - 4) <= 1 && !(y == 4 && x == 4);
      EXPECT_EQ(m.at(y, x), near ? 1 : 0) << y << "," << x;
    }
}

TEST(Polarity, ParseAndPrint) {
  EXPECT_EQ(parse_polarity("flat"), Polarity::kFlatPositive);
  EXPECT_EQ(parse_polarity(to_string(Polarity::kEdgePositive)), Polarity::kEdgePositive);
  EXPECT_THROW(parse_polarity("sideways"), ConfigError);
}
