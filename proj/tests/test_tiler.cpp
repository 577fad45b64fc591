#include <gtest/gtest.h>

#include <random>

#include "milbench/tiler.hpp"
#include "milbench/toy_encoders.hpp"
#include "oracles.hpp"

using namespace milbench;

namespace {

Mask random_mask(std::mt19937_64& gen, std::size_t w, std::size_t h, double p_on) {
  Mask m(w, h);
  std::bernoulli_distribution on(p_on);
  for (auto& c : m.cells) c = on(gen) ? 1 : 0;
  return m;
}

// Blobby mask: a few filled rectangles, so fractions span the whole range.
Mask blob_mask(std::mt19937_64& gen, std::size_t w, std::size_t h) {
  Mask m(w, h);
  for (int k = 0; k < 4; ++k) {
    const std::size_t x0 = gen() % w, y0 = gen() % h;
    const std::size_t x1 = std::min(w, x0 + 1 + gen() % w), y1 = std::min(h, y0 + 1 + gen() % h);
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) m.at(x, y) = 1;
  }
  return m;
}

}  // namespace

TEST(Tiling, AllTissueSquareGivesFourTiles) {
  TilingConfig cfg;
  const Mask full(ceil_div(448, 8), ceil_div(448, 8), 1);
  const auto tiles = enumerate_tiles(448, 448, full, cfg);
  ASSERT_EQ(tiles.size(), 4u);
  EXPECT_EQ(tiles[0], (TileRecord{0, 0, 1.0}));
  EXPECT_EQ(tiles[1], (TileRecord{224, 0, 1.0}));
  EXPECT_EQ(tiles[2], (TileRecord{0, 224, 1.0}));
  EXPECT_EQ(tiles[3], (TileRecord{224, 224, 1.0}));
}

TEST(Tiling, EdgeRemaindersAreDropped) {
  TilingConfig cfg;
  const Mask full(ceil_div(447, 8), ceil_div(700, 8), 1);
  EXPECT_EQ(enumerate_tiles(447, 700, full, cfg).size(), 3u);
  const Mask tiny(1, 1, 1);
  EXPECT_TRUE(enumerate_tiles(5, 5, tiny, cfg).empty());
}

TEST(Tiling, ThresholdIsInclusive) {
  TilingConfig cfg;
  cfg.tile_px = 10;
  cfg.mask_downsample = 1;
  cfg.min_tissue = 0.6;
  Mask m(10, 10, 0);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 10; ++x) m.at(x, y) = 1;
  ASSERT_EQ(enumerate_tiles(10, 10, m, cfg).size(), 1u);
  m.at(0, 0) = 0;
  EXPECT_TRUE(enumerate_tiles(10, 10, m, cfg).empty());
}

TEST(Tiling, MatchesPerPixelOracle) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 60; ++trial) {
    TilingConfig cfg;
    cfg.tile_px = 16 + gen() % 64;
    cfg.mask_downsample = 1 + gen() % 12;
    cfg.min_tissue = (gen() % 11) / 10.0;
    const std::size_t w = 1 + gen() % 600, h = 1 + gen() % 600;
    const auto mask = trial % 2 ? random_mask(gen, ceil_div(w, cfg.mask_downsample), ceil_div(h, cfg.mask_downsample),
                                              0.3 + 0.4 * (trial % 3) / 2.0)
                                : blob_mask(gen, ceil_div(w, cfg.mask_downsample), ceil_div(h, cfg.mask_downsample));
    EXPECT_EQ(enumerate_tiles(w, h, mask, cfg), oracle::tiles(w, h, mask, cfg)) << "trial " << trial;
  }
}

TEST(Tiling, RejectsMismatchedMask) {
  TilingConfig cfg;
  EXPECT_THROW(enumerate_tiles(448, 448, Mask(55, 56), cfg), ValidationError);
  cfg.tile_px = 0;
  EXPECT_THROW(enumerate_tiles(448, 448, Mask(56, 56), cfg), ValidationError);
}

TEST(Otsu, SplitsBimodalHistogram) {
  std::array<std::uint64_t, 256> hist{};
  hist[10] = 500;
  hist[12] = 300;
  hist[200] = 400;
  hist[210] = 100;
  const int t = otsu_threshold(hist);
  EXPECT_GE(t, 12);
  EXPECT_LT(t, 200);
  std::array<std::uint64_t, 256> flat{};
  flat[77] = 9;
  EXPECT_EQ(otsu_threshold(flat), -1);
}

TEST(Otsu, MaskFindsDarkRegionOnWhite) {
  Raster img(160, 96, 3, 245);
  for (std::size_t y = 16; y < 80; ++y)
    for (std::size_t x = 40; x < 120; ++x) {
      img.at(x, y, 0) = 150;
      img.at(x, y, 1) = 60;
      img.at(x, y, 2) = 170;
    }
  const auto m = tissue_mask_otsu(img, 8);
  ASSERT_EQ(m.width, 20u);
  ASSERT_EQ(m.height, 12u);
  for (std::size_t y = 0; y < 12; ++y)
    for (std::size_t x = 0; x < 20; ++x) EXPECT_EQ(m.at(x, y), (x >= 5 && x < 15 && y >= 2 && y < 10) ? 1 : 0);
  EXPECT_EQ(tissue_mask_otsu(Raster(30, 30, 3, 255), 8).count(), 0u);
}

TEST(Resample, IntegerFactorIsBlockMean) {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t f = 1 + gen() % 4, ch = trial % 2 ? 3 : 1;
    Raster img(5 + gen() % 60, 5 + gen() % 60, ch);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(gen());
    const auto out = resample_to_mpp(img, 0.25, 0.25 * static_cast<double>(f));
    EXPECT_EQ(out, oracle::block_mean(img, f)) << "factor " << f;
  }
}

TEST(Resample, FractionalFactorPreservesConstantImages) {
  Raster img(101, 77, 3, 123);
  const auto out = resample_to_mpp(img, 0.25, 0.5 * 1.5);
  EXPECT_EQ(out.width, 33u);
  EXPECT_EQ(out.height, 25u);
  for (auto p : out.pixels) EXPECT_EQ(p, 123);
  EXPECT_THROW(resample_to_mpp(img, 0.5, 0.25), ValidationError);
}

TEST(Resample, TwentyXToTwentyXIsIdentity) {
  Raster img(9, 4, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 7);
  EXPECT_EQ(resample_to_mpp(img, 0.5, 0.5), img);
}

TEST(MaskDownsample, HalfOrMoreIsTissue) {
  Mask full(4, 2, 0);
  full.at(0, 0) = full.at(1, 0) = 1;  // half of the left 2x2 block
  full.at(2, 0) = 1;                  // a quarter of the right block
  const auto m = downsample_mask(full, 2);
  ASSERT_EQ(m.width, 2u);
  ASSERT_EQ(m.height, 1u);
  EXPECT_EQ(m.at(0, 0), 1);
  EXPECT_EQ(m.at(1, 0), 0);
}

TEST(Crop, CopiesTheWindow) {
  Raster img(4, 3, 1);
  for (std::size_t i = 0; i < 12; ++i) img.pixels[i] = static_cast<std::uint8_t>(i);
  const auto c = crop(img, 1, 1, 2, 2);
  EXPECT_EQ(c.pixels, (std::vector<std::uint8_t>{5, 6, 9, 10}));
  EXPECT_THROW(crop(img, 3, 0, 2, 1), ValidationError);
}

TEST(ToyEncoders, ChannelMeansAndProjection) {
  Raster tile(16, 16, 3);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      tile.at(x, y, 0) = 255;
      tile.at(x, y, 1) = x < 8 ? 0 : 255;
      tile.at(x, y, 2) = 0;
    }
  const auto means = encode_channel_means(tile);
  EXPECT_FLOAT_EQ(means[0], 1.0f);
  EXPECT_FLOAT_EQ(means[1], 0.5f);
  EXPECT_FLOAT_EQ(means[2], 0.0f);

  const RandomProjectionEncoder a(12, 5), b(12, 5), c(12, 6);
  EXPECT_EQ(a(tile).size(), 12u);
  EXPECT_EQ(a(tile), b(tile));
  EXPECT_NE(a(tile), c(tile));
  EXPECT_THROW(a(Raster(4, 4, 3)), ValidationError);
}
