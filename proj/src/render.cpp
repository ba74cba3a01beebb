#include "deqnca/render.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "deqnca/fixed_point.hpp"
#include "deqnca/mnist.hpp"

namespace deqnca::data {

namespace {

using PixelMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// [HW, 3] colour planes before normalization.
PixelMatrix select_planes(const Tensor& z, const FrameSpec& spec) {
  const std::size_t C = z.dim(1), HW = z.dim(2) * z.dim(3);
  Eigen::Map<const PixelMatrix> channels(z.data(), static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(HW));
  switch (spec.channel_map) {
    case ChannelMap::kSingle: {
      if (spec.channel >= C) {
        throw std::out_of_range("channel " + std::to_string(spec.channel) + " out of range for " + to_string(z.shape()));
      }
      return channels.row(static_cast<Eigen::Index>(spec.channel)).transpose().replicate(1, 3);
    }
    case ChannelMap::kFirst3:
      if (C < 3) throw ShapeError("first3 needs at least three channels, got " + to_string(z.shape()));
      return channels.topRows(3).transpose();
    case ChannelMap::kPca3: {
      if (C < 3) throw ShapeError("pca3 needs at least three channels, got " + to_string(z.shape()));
      PixelMatrix samples = channels.transpose();
      samples.rowwise() -= samples.colwise().mean();
      const Eigen::MatrixXd cov = samples.transpose() * samples;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
      Eigen::MatrixXd basis = eig.eigenvectors().rightCols(3).rowwise().reverse();
      for (Eigen::Index k = 0; k < 3; ++k) {
        Eigen::Index arg;
        basis.col(k).cwiseAbs().maxCoeff(&arg);
        if (basis(arg, k) < 0) basis.col(k) *= -1.0;
      }
      return samples * basis;
    }
  }
  throw std::logic_error("unknown channel map");
}

}  // namespace

ChannelMap parse_channel_map(const std::string& name) {
  if (name == "first3") return ChannelMap::kFirst3;
  if (name == "pca3") return ChannelMap::kPca3;
  if (name == "single") return ChannelMap::kSingle;
  throw std::invalid_argument("unknown channel map '" + name + "' (first3, pca3, single)");
}

Normalization parse_normalization(const std::string& name) {
  if (name == "minmax") return Normalization::kMinMax;
  if (name == "tanh" || name == "fixed") return Normalization::kFixedTanh;
  throw std::invalid_argument("unknown normalization '" + name + "' (minmax, tanh)");
}

RgbImage render_frame(const Tensor& z, const FrameSpec& spec) {
  require_rank(z, 4, "render_frame");
  if (z.dim(0) != 1) throw ShapeError("render_frame expects a single state, got " + to_string(z.shape()));
  const PixelMatrix planes = select_planes(z, spec);
  RgbImage image{z.dim(3), z.dim(2), std::vector<std::uint8_t>(planes.size())};
  for (Eigen::Index c = 0; c < 3; ++c) {
    double lo = -1.0, hi = 1.0;
    if (spec.normalization == Normalization::kMinMax) {
      lo = planes.col(c).minCoeff();
      hi = planes.col(c).maxCoeff();
    }
    const double span = hi - lo;
    for (Eigen::Index p = 0; p < planes.rows(); ++p) {
      const double t = span > 0.0 ? (std::clamp(planes(p, c), lo, hi) - lo) / span : 0.0;
      image.pixels[static_cast<std::size_t>(p * 3 + c)] = static_cast<std::uint8_t>(t * 255.0);
    }
  }
  return image;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  if (image.pixels.size() != image.width * image.height * 3) throw std::invalid_argument("RGB buffer size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic;
  RgbImage image;
  int maxval = 0;
  in >> magic >> image.width >> image.height >> maxval;
  if (!in || magic != "P6" || maxval != 255 || image.width == 0 || image.height == 0) {
    throw DataError("not a binary 8-bit PPM: " + path.string());
  }
  in.get();
  image.pixels.resize(image.width * image.height * 3);
  in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.pixels.size())) throw DataError("truncated PPM " + path.string());
  return image;
}

std::string frame_filename(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04zu.ppm", step);
  return buf;
}

void write_csv_residuals(const std::filesystem::path& path, const std::vector<double>& trace) {
  std::ofstream out(path, std::ios::trunc);
  out << fp::format_residual_csv(trace);
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace deqnca::data
