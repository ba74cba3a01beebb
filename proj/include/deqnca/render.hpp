#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deqnca/tensor.hpp"

namespace deqnca::data {

enum class ChannelMap { kFirst3, kPca3, kSingle };
enum class Normalization { kMinMax, kFixedTanh };

struct FrameSpec {
  ChannelMap channel_map = ChannelMap::kFirst3;
  std::size_t channel = 0;  // used by kSingle
  Normalization normalization = Normalization::kFixedTanh;
};

ChannelMap parse_channel_map(const std::string& name);
Normalization parse_normalization(const std::string& name);

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB triplets

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Maps the hidden channels of z [1,Cz,H,W] to colour.
///   kFixedTanh: v clamped to [-1,1], byte = trunc((v + 1) / 2 * 255).
///   kMinMax:    each colour channel stretched to [0,255] over this frame.
///   kPca3:      projection on the top three principal directions of this frame's pixel vectors.
RgbImage render_frame(const Tensor& z, const FrameSpec& spec);

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

/// "frame_0007.ppm"
std::string frame_filename(std::size_t step);

/// CSV `iter,residual`, one row per entry, 1-based iterations.
void write_csv_residuals(const std::filesystem::path& path, const std::vector<double>& trace);

}  // namespace deqnca::data
