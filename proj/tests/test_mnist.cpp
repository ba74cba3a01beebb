#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "deqnca/mnist.hpp"
#include "support.hpp"

using namespace deqnca;
using data::DataError;

namespace {

std::vector<std::uint8_t> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_all(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                           static_cast<std::streamsize>(bytes.size()));
}

// Dataset of n 4x4 images whose pixels encode their index.
data::MnistDataset indexed_dataset(std::size_t n) {
  data::MnistDataset ds{Tensor({n, 1, 4, 4}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 16; ++k) ds.images[i * 16 + k] = static_cast<double>(i);
    ds.labels[i] = static_cast<int>(i % 10);
  }
  return ds;
}

}  // namespace

TEST(Idx, HeaderBytesAreBigEndian) {
  const auto dir = deqnca::testing::scratch_dir("idx_header");
  data::write_idx_images(dir / "img", std::vector<std::uint8_t>(2 * 3 * 4, 7), 2, 3, 4);
  data::write_idx_labels(dir / "lbl", {1, 2});
  const auto img = read_all(dir / "img");
  const std::vector<std::uint8_t> img_header{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4};
  EXPECT_TRUE(std::equal(img_header.begin(), img_header.end(), img.begin()));
  EXPECT_EQ(img.size(), 16u + 24u);
  const auto lbl = read_all(dir / "lbl");
  EXPECT_EQ(lbl, (std::vector<std::uint8_t>{0, 0, 8, 1, 0, 0, 0, 2, 1, 2}));
}

TEST(Idx, TwoImageRoundTripScalesPixels) {
  const auto dir = deqnca::testing::scratch_dir("idx_roundtrip");
  std::vector<std::uint8_t> px(2 * 28 * 28);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i % 256);
  data::write_idx_images(dir / "img", px, 2, 28, 28);
  data::write_idx_labels(dir / "lbl", {3, 9});
  const auto ds = data::load_mnist(dir / "img", dir / "lbl");
  ASSERT_EQ(ds.images.shape(), (Shape{2, 1, 28, 28}));
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 9}));
  for (std::size_t i = 0; i < px.size(); ++i) EXPECT_EQ(ds.images[i], px[i] / 255.0);
}

TEST(Idx, WrongMagicRejected) {
  const auto dir = deqnca::testing::scratch_dir("idx_magic");
  data::write_idx_images(dir / "img", std::vector<std::uint8_t>(16, 0), 1, 4, 4);
  data::write_idx_labels(dir / "lbl", {1});
  EXPECT_THROW(data::load_idx_images(dir / "lbl"), DataError);
  EXPECT_THROW(data::load_idx_labels(dir / "img"), DataError);
  for (std::size_t byte = 0; byte < 4; ++byte) {
    auto bytes = read_all(dir / "img");
    bytes[byte] ^= 0x10;
    write_all(dir / "bad", bytes);
    EXPECT_THROW(data::load_idx_images(dir / "bad"), DataError) << byte;
  }
}

TEST(Idx, TruncatedFilesRejected) {
  const auto dir = deqnca::testing::scratch_dir("idx_trunc");
  data::write_idx_images(dir / "img", std::vector<std::uint8_t>(3 * 16, 1), 3, 4, 4);
  data::write_idx_labels(dir / "lbl", {1, 2, 3});
  auto img = read_all(dir / "img");
  img.pop_back();
  write_all(dir / "img_short", img);
  EXPECT_THROW(data::load_idx_images(dir / "img_short"), DataError);
  write_all(dir / "img_header", {0, 0, 8, 3, 0, 0});
  EXPECT_THROW(data::load_idx_images(dir / "img_header"), DataError);
  auto lbl = read_all(dir / "lbl");
  lbl.pop_back();
  write_all(dir / "lbl_short", lbl);
  EXPECT_THROW(data::load_idx_labels(dir / "lbl_short"), DataError);
  EXPECT_THROW(data::load_idx_images(dir / "missing"), DataError);
}

TEST(Idx, CountMismatchAndBadLabelRejected) {
  const auto dir = deqnca::testing::scratch_dir("idx_mismatch");
  data::write_idx_images(dir / "img", std::vector<std::uint8_t>(2 * 16, 1), 2, 4, 4);
  data::write_idx_labels(dir / "lbl3", {1, 2, 3});
  data::write_idx_labels(dir / "lbl_bad", {1, 10});
  EXPECT_THROW(data::load_mnist(dir / "img", dir / "lbl3"), DataError);
  EXPECT_THROW(data::load_mnist(dir / "img", dir / "lbl_bad"), DataError);
}

TEST(Batches, SizesCoverTheDatasetOnce) {
  const auto ds = indexed_dataset(10);
  data::BatchIterator it(ds, 4, 5);
  std::vector<std::size_t> sizes;
  std::multiset<int> seen;
  while (it.has_next()) {
    const auto b = it.next();
    sizes.push_back(b.labels.size());
    ASSERT_EQ(b.images.dim(0), b.labels.size());
    for (std::size_t i = 0; i < b.labels.size(); ++i) seen.insert(static_cast<int>(b.images[i * 16]));
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  EXPECT_EQ(it.batch_count(), 3u);
  std::multiset<int> all;
  for (int i = 0; i < 10; ++i) all.insert(i);
  EXPECT_EQ(seen, all);
}

TEST(Batches, SeedDeterminesOrder) {
  const auto ds = indexed_dataset(50);
  EXPECT_EQ(data::BatchIterator(ds, 8, 1).order(), data::BatchIterator(ds, 8, 1).order());
  EXPECT_NE(data::BatchIterator(ds, 8, 1).order(), data::BatchIterator(ds, 8, 2).order());
}

TEST(Batches, ShuffleIsAPermutation) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto order = data::shuffled_indices(37 + seed, seed);
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> iota(37 + seed);
    std::iota(iota.begin(), iota.end(), 0);
    EXPECT_EQ(order, iota);
  }
}

TEST(Batches, LabelsFollowImages) {
  const auto ds = indexed_dataset(13);
  data::BatchIterator it(ds, 5, 9);
  while (it.has_next()) {
    const auto b = it.next();
    for (std::size_t i = 0; i < b.labels.size(); ++i) EXPECT_EQ(b.labels[i], static_cast<int>(b.images[i * 16]) % 10);
  }
}

TEST(Dataset, HeadAndGather) {
  const auto ds = indexed_dataset(6);
  EXPECT_EQ(ds.head(4).size(), 4u);
  EXPECT_EQ(ds.head(100).size(), 6u);
  const auto g = ds.gather({5, 0});
  EXPECT_EQ(g.labels, (std::vector<int>{5, 0}));
  EXPECT_EQ(g.images[16], 0.0);
  EXPECT_EQ(g.images[0], 5.0);
}

TEST(Crop, FullWindowIsIdentity) {
  const Tensor x = deqnca::testing::random_tensor({2, 1, 28, 28}, 1);
  EXPECT_EQ(data::crop(x, 0, 0, 28, 28), x);
}

TEST(Crop, MatchesManualSlice) {
  const Tensor x = deqnca::testing::random_tensor({2, 1, 28, 28}, 2);
  for (auto [top, left] : {std::pair<std::size_t, std::size_t>{0, 0}, {14, 14}, {3, 11}}) {
    const Tensor c = data::crop(x, top, left, 14, 14);
    ASSERT_EQ(c.shape(), (Shape{2, 1, 14, 14}));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t h = 0; h < 14; ++h)
        for (std::size_t w = 0; w < 14; ++w) EXPECT_EQ(c.at(b, 0, h, w), x.at(b, 0, top + h, left + w));
  }
}

TEST(Crop, OutOfBoundsRejected) {
  const Tensor x({1, 1, 28, 28});
  EXPECT_ANY_THROW(data::crop(x, 15, 0, 14, 14));
  EXPECT_ANY_THROW(data::crop(x, 0, 20, 3, 9));
  EXPECT_ANY_THROW(data::crop(x, 0, 0, 0, 5));
}

TEST(RealData, ShapesWhenPresent) {
  const std::filesystem::path dir = DEQNCA_MNIST_DIR;
  if (!std::filesystem::exists(dir / "t10k-images-idx3-ubyte")) GTEST_SKIP() << "MNIST not found in " << dir;
  const auto test = data::load_mnist_split(dir, false);
  EXPECT_EQ(test.images.shape(), (Shape{10000, 1, 28, 28}));
  const auto [lo, hi] = std::minmax_element(test.images.values().begin(), test.images.values().end());
  EXPECT_EQ(*lo, 0.0);
  EXPECT_EQ(*hi, 1.0);
  std::array<int, 10> counts{};
  for (int l : test.labels) ++counts[static_cast<std::size_t>(l)];
  EXPECT_EQ(counts[0], 980);
  EXPECT_EQ(counts[1], 1135);
}
