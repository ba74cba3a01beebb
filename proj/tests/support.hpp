#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "deqnca/tensor.hpp"

namespace deqnca::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// Central differences of a scalar function with respect to every entry of x.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& fn, const Tensor& x, double h = 1e-6) {
  Tensor grad = Tensor::zeros_like(x);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = fn(probe);
    probe[i] = x[i] - h;
    const double down = fn(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// max |a - b| scaled by the largest reference entry.
inline double max_rel_error(const Tensor& actual, const Tensor& reference) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    diff = std::max(diff, std::abs(actual[i] - reference[i]));
    scale = std::max(scale, std::abs(reference[i]));
  }
  return diff / std::max(scale, 1e-300);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("deqnca_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace deqnca::testing
