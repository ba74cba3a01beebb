#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "deqnca/tensor.hpp"

namespace deqnca::data {

/// Malformed, missing or inconsistent dataset files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

struct MnistDataset {
  Tensor images;  // [N,1,H,W], pixels / 255
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  /// First `count` examples (all of them if count >= size()).
  MnistDataset head(std::size_t count) const;
  /// Examples at the given indices, in that order.
  MnistDataset gather(const std::vector<std::size_t>& indices) const;
};

/// Big-endian IDX image file (magic 0x00000803) -> [N,1,H,W] scaled to [0,1].
Tensor load_idx_images(const std::filesystem::path& path);
/// Big-endian IDX label file (magic 0x00000801).
std::vector<int> load_idx_labels(const std::filesystem::path& path);
/// Loads both files and checks that their counts agree and labels are < 10.
MnistDataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Standard file names inside an MNIST directory.
MnistDataset load_mnist_split(const std::filesystem::path& dir, bool train);

/// Writers used by tests to build fixtures; pixels are stored as given bytes.
void write_idx_images(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                      std::uint32_t count, std::uint32_t rows, std::uint32_t cols);
void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

/// Epoch-wise shuffled batches. The order is a seeded Fisher-Yates
/// permutation; the final short batch is kept.
class BatchIterator {
 public:
  BatchIterator(const MnistDataset& dataset, std::size_t batch_size, std::uint64_t seed);

  bool has_next() const { return cursor_ < order_.size(); }
  Batch next();
  std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const MnistDataset& dataset_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Fisher-Yates permutation of [0, n) driven by a 64-bit Mersenne Twister.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

/// Sub-window [top, top+h) x [left, left+w) of every image in a [B,C,H,W] batch.
Tensor crop(const Tensor& images, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

}  // namespace deqnca::data
