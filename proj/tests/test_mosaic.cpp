#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "msi/mosaic.hpp"

using namespace msi;

namespace {

RawMosaicFrame random_frame(std::size_t w, std::size_t h, unsigned depth, std::mt19937_64& rng) {
  RawMosaicFrame f(w, h, depth);
  std::uniform_int_distribution<int> dist(0, (1 << depth) - 1);
  for (auto& p : f.pixels) p = static_cast<std::uint16_t>(dist(rng));
  return f;
}

MosaicLayout shuffled_layout(std::mt19937_64& rng) {
  std::array<int, 16> bands;
  std::iota(bands.begin(), bands.end(), 0);
  std::shuffle(bands.begin(), bands.end(), rng);
  MosaicLayout::Grid g{};
  for (int i = 0; i < 16; ++i) g[i / 4][i % 4] = bands[i];
  return MosaicLayout(g);
}

}  // namespace

TEST(MosaicLayout, DefaultIsRowMajor) {
  MosaicLayout layout;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(layout.band_at_cell(r, c), static_cast<int>(4 * r + c));
}

TEST(MosaicLayout, RejectsNonBijection) {
  MosaicLayout::Grid g{};
  for (int i = 0; i < 16; ++i) g[i / 4][i % 4] = i;
  g[3][3] = 0;
  EXPECT_THROW(MosaicLayout{g}, ConfigError);
  g[3][3] = 16;
  EXPECT_THROW(MosaicLayout{g}, ConfigError);
}

TEST(BandIndex, DefinitionAndPeriodicity) {
  std::mt19937_64 rng(7);
  const MosaicLayout layout = shuffled_layout(rng);
  RawMosaicFrame f(16, 8);
  EXPECT_EQ(band_index(layout, f, 0, 0), layout.band_at_cell(0, 0));
  EXPECT_EQ(band_index(layout, f, 4, 0), band_index(layout, f, 0, 0));
  EXPECT_EQ(band_index(layout, f, 7, 6), band_index(layout, f, 3, 2));
}

TEST(BandIndex, SurjectiveOverAlignedTiles) {
  std::mt19937_64 rng(11);
  const MosaicLayout layout = shuffled_layout(rng);
  RawMosaicFrame f(32, 16);
  for (std::size_t ty = 0; ty < 16; ty += 4) {
    for (std::size_t tx = 0; tx < 32; tx += 4) {
      std::array<bool, 16> seen{};
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) seen[static_cast<std::size_t>(band_index(layout, f, ty + r, tx + c))] = true;
      for (bool s : seen) EXPECT_TRUE(s);
    }
  }
}

TEST(BandIndex, OutOfBoundsThrows) {
  MosaicLayout layout;
  RawMosaicFrame f(8, 8);
  EXPECT_THROW(band_index(layout, f, 8, 0), BoundsError);
  EXPECT_THROW(band_index(layout, f, 0, 8), BoundsError);
}

TEST(Demosaic, ConstantFrame) {
  RawMosaicFrame f(64, 32, 10, 417);
  const RawCube cube = demosaic(f, MosaicLayout{});
  for (auto v : cube.values()) EXPECT_EQ(v, 417);
}

TEST(Demosaic, FullResolutionShape) {
  RawMosaicFrame f(2048, 1088);
  const RawCube cube = demosaic(f, MosaicLayout{});
  EXPECT_EQ(cube.rows(), 272u);
  EXPECT_EQ(cube.cols(), 512u);
  EXPECT_EQ(cube.bands(), 16u);
}

TEST(Demosaic, BandIndexFixture) {
  std::mt19937_64 rng(3);
  const MosaicLayout layout = shuffled_layout(rng);
  RawMosaicFrame f(40, 24);
  for (std::size_t r = 0; r < f.height; ++r)
    for (std::size_t c = 0; c < f.width; ++c) f.at(r, c) = static_cast<std::uint16_t>(band_index(layout, f, r, c));
  const RawCube cube = demosaic(f, layout);
  for (std::size_t i = 0; i < cube.rows(); ++i)
    for (std::size_t j = 0; j < cube.cols(); ++j)
      for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(cube(i, j, k), k);
}

TEST(Demosaic, NonDivisibleDimensionsRejected) {
  RawMosaicFrame f(30, 16);
  EXPECT_THROW(demosaic(f, MosaicLayout{}), ConfigError);
}

TEST(Demosaic, RoundTripAndEnergyProperty) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const MosaicLayout layout = shuffled_layout(rng);
    const std::size_t w = 4 * (1 + rng() % 24), h = 4 * (1 + rng() % 24);
    const unsigned depth = 8 + static_cast<unsigned>(rng() % 9);
    const RawMosaicFrame f = random_frame(w, h, depth, rng);
    const RawCube cube = demosaic(f, layout);

    const RawMosaicFrame back = remosaic(cube, layout, depth);
    EXPECT_EQ(back.pixels, f.pixels);
    EXPECT_EQ(demosaic(back, layout), cube);

    const auto raw_sum = std::accumulate(f.pixels.begin(), f.pixels.end(), std::uint64_t{0});
    const auto cube_sum = std::accumulate(cube.values().begin(), cube.values().end(), std::uint64_t{0});
    EXPECT_EQ(raw_sum, cube_sum);
  }
}

TEST(Remosaic, ConstantCube) {
  RawCube cube(5, 7, 123);
  const RawMosaicFrame f = remosaic(cube, MosaicLayout{});
  EXPECT_EQ(f.width, 28u);
  EXPECT_EQ(f.height, 20u);
  for (auto v : f.pixels) EXPECT_EQ(v, 123);
}

TEST(Remosaic, OutOfRangeValueRejected) {
  BandCube<double> cube(2, 2, 5000.0);
  EXPECT_THROW(remosaic(cube, MosaicLayout{}, 10), DataError);
}

TEST(RawFrame, ValidateCatchesRangeViolations) {
  RawMosaicFrame f(8, 8, 10, 0);
  EXPECT_NO_THROW(f.validate());
  f.at(3, 3) = 1024;
  EXPECT_THROW(f.validate(), DataError);
}

TEST(CheckExposure, MidRangePasses) {
  RawCube cube(8, 8, 512);
  const auto report = check_exposure(cube, Rect{1, 1, 5, 5}, ExposureThresholds::for_bit_depth(10));
  EXPECT_TRUE(report.pass);
}

TEST(CheckExposure, SingleOverexposedPixel) {
  RawCube cube(8, 8, 512);
  cube(3, 4, 9) = 1023;
  const auto report = check_exposure(cube, Rect{0, 0, 8, 8}, 1.0, 1022.0);
  EXPECT_FALSE(report.pass);
  EXPECT_EQ(report.over[9], 1u);
  EXPECT_EQ(report.total_over(), 1u);
  EXPECT_EQ(report.total_under(), 0u);
}

TEST(CheckExposure, SingleUnderexposedPixel) {
  RawCube cube(8, 8, 512);
  cube(0, 0, 2) = 0;
  const auto report = check_exposure(cube, Rect{0, 0, 2, 2}, 1.0, 1022.0);
  EXPECT_FALSE(report.pass);
  EXPECT_EQ(report.under[2], 1u);
}

TEST(CheckExposure, PixelOutsideRoiIgnored) {
  RawCube cube(8, 8, 512);
  cube(7, 7, 0) = 1023;
  EXPECT_TRUE(check_exposure(cube, Rect{0, 0, 4, 4}, 1.0, 1022.0).pass);
}

TEST(CheckExposure, ArgumentErrors) {
  RawCube cube(8, 8, 512);
  EXPECT_THROW(check_exposure(cube, Rect{0, 0, 0, 4}, 1.0, 2.0), ArgumentError);
  EXPECT_THROW(check_exposure(cube, Rect{0, 0, 4, 4}, 5.0, 2.0), ArgumentError);
  EXPECT_THROW(check_exposure(cube, Rect{6, 6, 4, 4}, 1.0, 2.0), BoundsError);
}

TEST(CheckExposure, WideningThresholdsIsMonotone) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> value(150, 850), edge(0, 150);
  int passes = 0;
  for (int trial = 0; trial < 200; ++trial) {
    RawCube cube(6, 6);
    for (auto& v : cube.values()) v = static_cast<std::uint16_t>(value(rng));
    const double low = 100 + edge(rng), high = 750 + edge(rng);
    const bool narrow = check_exposure(cube, Rect{0, 0, 6, 6}, low, high).pass;
    const bool wide = check_exposure(cube, Rect{0, 0, 6, 6}, low - 50, high + 50).pass;
    if (narrow) {
      EXPECT_TRUE(wide);
    }
    passes += narrow;
  }
  EXPECT_GT(passes, 0);
}
