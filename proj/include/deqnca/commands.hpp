#pragma once

// The five commands behind the deqnca executable. Each one reads only what
// its RunConfig names and writes only under config.output_dir.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "deqnca/checkpoint.hpp"
#include "deqnca/deq.hpp"
#include "deqnca/fixed_point.hpp"
#include "deqnca/mnist.hpp"
#include "deqnca/model.hpp"
#include "deqnca/render.hpp"

namespace deqnca::cli {

/// Non-finite loss or state during a command.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::filesystem::path data_dir;
  std::filesystem::path output_dir = "run";
  std::filesystem::path checkpoint;

  int epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.005;
  double momentum = 0.9;
  /// 0 keeps the whole split.
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;

  fp::SolverConfig train_solver{.method = fp::Method::kBroyden, .max_iters = 40, .tol = 1e-3};
  fp::SolverConfig eval_solver{.method = fp::Method::kBroyden, .max_iters = 60, .tol = 1e-4};
  deq::BackwardConfig backward;
  int fallback_terms = 2;

  model::Widths widths;
  std::uint64_t init_seed = 1;
  std::uint64_t shuffle_seed = 2;
  std::uint64_t noise_seed = 3;
  std::size_t eval_chunk = 250;

  std::size_t image_index = 0;
  int steps = 60;
  data::FrameSpec frame;

  std::size_t crop_top = 0;
  std::size_t crop_left = 0;
  std::size_t crop_height = 14;
  std::size_t crop_width = 14;
};

/// SplitMix64 over (base, a, b); used for every derived seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

struct EvalReport {
  std::size_t count = 0;
  double accuracy = 0.0;
  double mean_iterations = 0.0;
  double mean_residual = 0.0;
  double max_residual = 0.0;
  std::size_t unconverged = 0;
  std::vector<int> predictions;
  /// confusion[true][predicted]
  std::array<std::array<std::size_t, model::kClasses>, model::kClasses> confusion{};
};

/// Forward pass over `dataset` in chunks; chunk i draws its noise from derive_seed(seed, i).
EvalReport evaluate(const model::ModelParams& params, const data::MnistDataset& dataset,
                    const fp::SolverConfig& solver, std::uint64_t seed, std::size_t chunk);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double mean_forward_iterations = 0.0;
  std::size_t unconverged = 0;
};

std::string format_metrics_csv(const std::vector<EpochMetrics>& history);

struct TrainReport {
  std::vector<EpochMetrics> history;
  std::filesystem::path checkpoint;
  model::ModelParams params;
};

/// Writes metrics.csv, checkpoint_epochNNN.bin per epoch and checkpoint.bin.
TrainReport cmd_train(const RunConfig& config, std::ostream* log = nullptr);
TrainReport train_on(const RunConfig& config, const data::MnistDataset& train, const data::MnistDataset& test,
                     std::ostream* log = nullptr);

EvalReport cmd_eval(const RunConfig& config, std::ostream* log = nullptr);

struct RolloutReport {
  int label = -1;
  int predicted = -1;
  std::vector<double> residual_trace;
  /// changes[k] = mean |z_{k+1} - z_k|, k = 0 .. steps-1.
  std::vector<double> changes;
  std::size_t frames = 0;
};

/// Frames frame_0000.ppm (initial noise) .. frame_{steps}.ppm and residuals.csv.
RolloutReport cmd_rollout(const RunConfig& config, std::ostream* log = nullptr);
RolloutReport rollout_image(const model::ModelParams& params, const Tensor& image, const RunConfig& config,
                            bool write_files);

EvalReport cmd_crop_eval(const RunConfig& config, std::ostream* log = nullptr);
EvalReport crop_evaluate(const model::ModelParams& params, const data::MnistDataset& dataset,
                         const RunConfig& config);

struct GradcheckOptions {
  int seeds = 10;
  std::uint64_t first_seed = 1;
  double tolerance = 1e-3;
  double step = 1e-4;
  fp::SolverConfig solver{.method = fp::Method::kAnderson, .max_iters = 200, .tol = 1e-10};
  deq::BackwardConfig backward{.method = deq::BackwardMethod::kAdjointFixedPoint, .max_iters = 200, .tol = 1e-12};
  /// Test hook: scales the analytic K2 gradient to prove the harness notices.
  double corrupt_k2_scale = 1.0;
};

struct GradcheckReport {
  std::array<const char*, model::ModelParams::kTensorCount> groups{};
  /// Worst relative error per group over all seeds.
  std::array<double, model::ModelParams::kTensorCount> max_rel_error{};
  bool passed = false;
};

/// Implicit gradients of a Ce=2, Cz=3, Hm=4 model on 6x6 inputs against
/// central finite differences of the solved loss.
GradcheckReport cmd_gradcheck(const GradcheckOptions& options, std::ostream* log = nullptr);

}  // namespace deqnca::cli
