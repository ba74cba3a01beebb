#include "deqnca/mnist.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <string>

namespace deqnca::data {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) throw DataError("truncated IDX header in " + path.string());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

void check_magic(std::uint32_t magic, std::uint32_t expected, const std::filesystem::path& path) {
  if (magic != expected) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08x (expected 0x%08x) in ", magic, expected);
    throw DataError(buf + path.string());
  }
}

}  // namespace

MnistDataset MnistDataset::head(std::size_t count) const {
  count = std::min(count, size());
  if (count == 0) throw DataError("cannot take an empty subset");
  return {images.slice_batch(0, count), std::vector<int>(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count))};
}

MnistDataset MnistDataset::gather(const std::vector<std::size_t>& indices) const {
  if (indices.empty()) throw DataError("cannot gather an empty subset");
  const std::size_t stride = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = indices.size();
  MnistDataset out{Tensor(shape), {}};
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(images.data() + indices[i] * stride, stride, out.images.data() + i * stride);
    out.labels.push_back(labels[indices[i]]);
  }
  return out;
}

Tensor load_idx_images(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  check_magic(read_be32(bytes, 0, path), kIdxImageMagic, path);
  const std::uint64_t count = read_be32(bytes, 4, path);
  const std::uint64_t rows = read_be32(bytes, 8, path);
  const std::uint64_t cols = read_be32(bytes, 12, path);
  if (count == 0 || rows == 0 || cols == 0) throw DataError("empty IDX image file " + path.string());
  const std::uint64_t pixels = count * rows * cols;
  if (pixels / count != rows * cols || pixels > std::numeric_limits<std::size_t>::max() / sizeof(double)) {
    throw DataError("IDX dimensions overflow in " + path.string());
  }
  if (bytes.size() != 16 + pixels) {
    throw DataError("IDX image payload is " + std::to_string(bytes.size() - 16) + " bytes, header implies " +
                    std::to_string(pixels) + " in " + path.string());
  }
  Tensor images({count, 1, rows, cols});
  for (std::size_t i = 0; i < pixels; ++i) images[i] = static_cast<double>(bytes[16 + i]) / 255.0;
  return images;
}

std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  check_magic(read_be32(bytes, 0, path), kIdxLabelMagic, path);
  const std::uint64_t count = read_be32(bytes, 4, path);
  if (bytes.size() != 8 + count) {
    throw DataError("IDX label payload is " + std::to_string(bytes.size() - 8) + " bytes, header implies " +
                    std::to_string(count) + " in " + path.string());
  }
  return {bytes.begin() + 8, bytes.end()};
}

MnistDataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels) {
  MnistDataset ds{load_idx_images(images), load_idx_labels(labels)};
  if (ds.images.dim(0) != ds.labels.size()) {
    throw DataError("image file holds " + std::to_string(ds.images.dim(0)) + " images but label file holds " +
                    std::to_string(ds.labels.size()) + " labels");
  }
  for (int label : ds.labels) {
    if (label < 0 || label >= 10) throw DataError("label " + std::to_string(label) + " out of range in " + labels.string());
  }
  return ds;
}

MnistDataset load_mnist_split(const std::filesystem::path& dir, bool train) {
  const std::string prefix = train ? "train" : "t10k";
  return load_mnist(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
}

void write_idx_images(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                      std::uint32_t count, std::uint32_t rows, std::uint32_t cols) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  put_be32(out, kIdxImageMagic);
  put_be32(out, count);
  put_be32(out, rows);
  put_be32(out, cols);
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Explicit Fisher-Yates so the permutation does not depend on the
  // standard library's std::shuffle.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

BatchIterator::BatchIterator(const MnistDataset& dataset, std::size_t batch_size, std::uint64_t seed)
    : dataset_(dataset), batch_size_(batch_size), order_(shuffled_indices(dataset.size(), seed)) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
}

Batch BatchIterator::next() {
  if (!has_next()) throw std::out_of_range("batch iterator exhausted");
  const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
  std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                               order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  MnistDataset sub = dataset_.gather(idx);
  return {std::move(sub.images), std::move(sub.labels)};
}

Tensor crop(const Tensor& images, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  require_rank(images, 4, "crop");
  if (height == 0 || width == 0 || top + height > images.dim(2) || left + width > images.dim(3)) {
    throw std::out_of_range("crop window (" + std::to_string(top) + "," + std::to_string(left) + ") " +
                            std::to_string(height) + "x" + std::to_string(width) + " exceeds image " +
                            to_string(images.shape()));
  }
  const std::size_t B = images.dim(0), C = images.dim(1);
  Tensor out({B, C, height, width});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < height; ++h)
        for (std::size_t w = 0; w < width; ++w) out.at(b, c, h, w) = images.at(b, c, top + h, left + w);
  return out;
}

}  // namespace deqnca::data
