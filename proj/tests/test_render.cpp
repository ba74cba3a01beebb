#include <gtest/gtest.h>

#include <fstream>

#include "deqnca/render.hpp"
#include "support.hpp"

using namespace deqnca;
using data::ChannelMap;
using data::FrameSpec;
using data::Normalization;

namespace {

Tensor constant_state(std::size_t channels, std::size_t h, std::size_t w, std::vector<double> levels) {
  Tensor z({1, channels, h, w});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) z.at(0, c, y, x) = levels[c];
  return z;
}

}  // namespace

TEST(Render, FixedScaleMapsUnitVectorToKnownColour) {
  const auto img = data::render_frame(constant_state(4, 3, 2, {1.0, 0.0, 0.0, 0.5}), {});
  ASSERT_EQ(img.width, 2u);
  ASSERT_EQ(img.height, 3u);
  for (std::size_t p = 0; p < 6; ++p) {
    EXPECT_EQ(img.pixels[3 * p], 255);
    EXPECT_EQ(img.pixels[3 * p + 1], 127);
    EXPECT_EQ(img.pixels[3 * p + 2], 127);
  }
}

TEST(Render, FixedScaleClampsAndIsMonotone) {
  const auto img = data::render_frame(constant_state(3, 1, 1, {-5.0, -1.0, 7.0}), {});
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 0, 255}));
}

TEST(Render, ConstantFrameIsUniformInEveryMode) {
  const Tensor z = constant_state(5, 4, 6, {0.2, -0.4, 0.9, 0.1, -0.3});
  for (auto map : {ChannelMap::kFirst3, ChannelMap::kPca3, ChannelMap::kSingle}) {
    for (auto norm : {Normalization::kMinMax, Normalization::kFixedTanh}) {
      const auto img = data::render_frame(z, {map, 2, norm});
      for (std::size_t p = 1; p < 24; ++p)
        for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(img.pixels[3 * p + k], img.pixels[k]);
    }
  }
}

TEST(Render, MinMaxStretchesEachChannel) {
  Tensor z({1, 3, 1, 2});
  z.at(0, 0, 0, 0) = -3.0;
  z.at(0, 0, 0, 1) = 5.0;
  z.at(0, 1, 0, 0) = 0.25;
  z.at(0, 1, 0, 1) = 0.5;
  const auto img = data::render_frame(z, {ChannelMap::kFirst3, 0, Normalization::kMinMax});
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 0, 0, 255, 255, 0}));
}

TEST(Render, SingleChannelIsGrey) {
  const Tensor z = deqnca::testing::random_tensor({1, 4, 5, 5}, 3);
  const auto img = data::render_frame(z, {ChannelMap::kSingle, 3, Normalization::kFixedTanh});
  for (std::size_t p = 0; p < 25; ++p) {
    EXPECT_EQ(img.pixels[3 * p], img.pixels[3 * p + 1]);
    EXPECT_EQ(img.pixels[3 * p], img.pixels[3 * p + 2]);
    const double v = z.at(0, 3, p / 5, p % 5);
    EXPECT_EQ(img.pixels[3 * p], static_cast<std::uint8_t>((v + 1.0) / 2.0 * 255.0));
  }
  EXPECT_ANY_THROW(data::render_frame(z, {ChannelMap::kSingle, 4, Normalization::kFixedTanh}));
}

TEST(Render, Pca3RecoversDominantDirection) {
  // Pixel vectors vary along one direction only; the first PCA colour follows it.
  Tensor z({1, 4, 1, 8});
  const double dir[4] = {0.5, -0.5, 0.5, 0.5};
  for (std::size_t x = 0; x < 8; ++x)
    for (std::size_t c = 0; c < 4; ++c) z.at(0, c, 0, x) = dir[c] * static_cast<double>(x);
  const auto img = data::render_frame(z, {ChannelMap::kPca3, 0, Normalization::kMinMax});
  for (std::size_t x = 1; x < 8; ++x) EXPECT_GT(img.pixels[3 * x], img.pixels[3 * (x - 1)]);
  EXPECT_EQ(img.pixels[0], 0);
  EXPECT_EQ(img.pixels[3 * 7], 255);
}

TEST(Render, TooFewChannelsForFirst3) {
  EXPECT_ANY_THROW(data::render_frame(Tensor({1, 2, 3, 3}), {}));
  EXPECT_ANY_THROW(data::render_frame(Tensor({2, 3, 3, 3}), {}));
}

TEST(Render, Deterministic) {
  const Tensor z = deqnca::testing::random_tensor({1, 6, 7, 9}, 4);
  for (auto map : {ChannelMap::kFirst3, ChannelMap::kPca3}) {
    const FrameSpec spec{map, 0, Normalization::kMinMax};
    EXPECT_EQ(data::render_frame(z, spec), data::render_frame(z, spec));
  }
}

TEST(Render, ParseNames) {
  EXPECT_EQ(data::parse_channel_map("pca3"), ChannelMap::kPca3);
  EXPECT_EQ(data::parse_normalization("minmax"), Normalization::kMinMax);
  EXPECT_ANY_THROW(data::parse_channel_map("rgb"));
}

TEST(Ppm, RoundTripAndHeader) {
  const auto dir = deqnca::testing::scratch_dir("ppm");
  const auto img = data::render_frame(deqnca::testing::random_tensor({1, 3, 4, 5}, 5), {});
  data::write_ppm(dir / "f.ppm", img);
  EXPECT_EQ(data::read_ppm(dir / "f.ppm"), img);
  std::ifstream in(dir / "f.ppm", std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, max = 0;
  in >> magic >> w >> h >> max;
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, 5u);
  EXPECT_EQ(h, 4u);
  EXPECT_EQ(max, 255u);
}

TEST(Ppm, FrameNames) {
  EXPECT_EQ(data::frame_filename(0), "frame_0000.ppm");
  EXPECT_EQ(data::frame_filename(60), "frame_0060.ppm");
}

TEST(Csv, ResidualRowsAreOneBased) {
  const auto dir = deqnca::testing::scratch_dir("csv");
  data::write_csv_residuals(dir / "r.csv", {0.5, 0.25});
  std::ifstream in(dir / "r.csv");
  std::string header, row1, row2, extra;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  EXPECT_EQ(header, "iter,residual");
  EXPECT_EQ(row1.substr(0, 2), "1,");
  EXPECT_EQ(std::stod(row1.substr(2)), 0.5);
  EXPECT_EQ(row2.substr(0, 2), "2,");
  EXPECT_FALSE(std::getline(in, extra) && !extra.empty());
}
