#include "deqnca/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>

#include "deqnca/ops.hpp"

namespace deqnca::cli {

namespace {

constexpr std::array<const char*, model::ModelParams::kTensorCount> kGroupNames = {
    "k1_weight", "k1_bias", "k2_weight", "k2_bias", "mlp1_weight", "mlp1_bias", "mlp2_weight", "mlp2_bias"};

data::MnistDataset load_split(const RunConfig& config, bool train) {
  if (config.data_dir.empty()) throw data::DataError("no data directory given");
  data::MnistDataset ds = data::load_mnist_split(config.data_dir, train);
  const std::size_t limit = train ? config.train_limit : config.test_limit;
  return limit > 0 ? ds.head(limit) : ds;
}

void ensure_output_dir(const RunConfig& config) { std::filesystem::create_directories(config.output_dir); }

std::string checkpoint_name(int epoch) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "checkpoint_epoch%03d.bin", epoch);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ b);
}

EvalReport evaluate(const model::ModelParams& params, const data::MnistDataset& dataset,
                    const fp::SolverConfig& solver, std::uint64_t seed, std::size_t chunk) {
  if (dataset.size() == 0) throw data::DataError("cannot evaluate on an empty dataset");
  if (chunk == 0) throw std::invalid_argument("evaluation chunk must be >= 1");
  EvalReport report;
  report.count = dataset.size();
  std::size_t correct = 0, total_iters = 0;
  double residual_sum = 0.0;
  for (std::size_t start = 0, i = 0; start < dataset.size(); start += chunk, ++i) {
    const std::size_t n = std::min(chunk, dataset.size() - start);
    const model::ForwardResult fr =
        model::forward(params, dataset.images.slice_batch(start, n), solver, derive_seed(seed, i));
    const std::vector<int> pred = model::argmax_rows(fr.logits);
    for (std::size_t k = 0; k < n; ++k) {
      const int label = dataset.labels[start + k];
      correct += pred[k] == label;
      ++report.confusion[static_cast<std::size_t>(label)][static_cast<std::size_t>(pred[k])];
      report.predictions.push_back(pred[k]);
      const fp::SolverResult& s = fr.solves[k];
      total_iters += static_cast<std::size_t>(s.iterations);
      residual_sum += s.residual;
      report.max_residual = std::max(report.max_residual, s.residual);
      report.unconverged += !s.converged;
    }
  }
  const double count = static_cast<double>(report.count);
  report.accuracy = static_cast<double>(correct) / count;
  report.mean_iterations = static_cast<double>(total_iters) / count;
  report.mean_residual = residual_sum / count;
  return report;
}

std::string format_metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,train_loss,test_accuracy,mean_forward_iters,unconverged\n";
  char buf[160];
  for (const EpochMetrics& m : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%zu\n", m.epoch, m.train_loss, m.test_accuracy,
                  m.mean_forward_iterations, m.unconverged);
    out += buf;
  }
  return out;
}

TrainReport cmd_train(const RunConfig& config, std::ostream* log) {
  const data::MnistDataset train = load_split(config, true);
  const data::MnistDataset test = load_split(config, false);
  return train_on(config, train, test, log);
}

TrainReport train_on(const RunConfig& config, const data::MnistDataset& train, const data::MnistDataset& test,
                     std::ostream* log) {
  if (config.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  config.train_solver.validate();
  config.eval_solver.validate();
  ensure_output_dir(config);

  TrainReport report;
  report.params = model::init_params(config.widths, config.init_seed);
  model::TrainOptions options{config.train_solver, config.backward, config.fallback_terms};
  ops::SgdState sgd{config.learning_rate, config.momentum, {}};
  const std::size_t H = train.images.dim(2), W = train.images.dim(3);
  const auto started = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    data::BatchIterator batches(train, config.batch_size, derive_seed(config.shuffle_seed, static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    std::size_t seen = 0, iterations = 0, unconverged = 0, unconverged_bw = 0, fallbacks = 0;
    for (std::uint64_t b = 0; batches.has_next(); ++b) {
      const data::Batch batch = batches.next();
      const std::size_t n = batch.labels.size();
      const Tensor z0 = model::sample_initial_state(n, config.widths.state, H, W,
                                                    derive_seed(config.noise_seed, static_cast<std::uint64_t>(epoch), b));
      model::TrainStep step = model::loss_and_gradients(report.params, batch.images, batch.labels, options, z0);
      if (!std::isfinite(step.loss)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      auto targets = report.params.tensors();
      std::vector<Tensor> grads;
      grads.reserve(targets.size());
      for (const Tensor* g : step.grads.tensors()) grads.push_back(*g);
      ops::sgd_step(std::span<Tensor* const>(targets.data(), targets.size()), grads, sgd);

      loss_sum += step.loss * static_cast<double>(n);
      seen += n;
      for (const fp::SolverResult& s : step.solves) iterations += static_cast<std::size_t>(s.iterations);
      unconverged += static_cast<std::size_t>(step.unconverged_forward);
      unconverged_bw += static_cast<std::size_t>(step.unconverged_backward);
      fallbacks += static_cast<std::size_t>(step.backward_fallbacks);
    }
    for (const Tensor* t : report.params.tensors()) {
      if (!t->all_finite()) throw NumericalError("parameters became non-finite in epoch " + std::to_string(epoch));
    }

    const EvalReport ev = evaluate(report.params, test, config.eval_solver,
                                   derive_seed(config.noise_seed, 0, static_cast<std::uint64_t>(epoch)),
                                   config.eval_chunk);
    EpochMetrics m{epoch, loss_sum / static_cast<double>(seen), ev.accuracy,
                   static_cast<double>(iterations) / static_cast<double>(seen), unconverged};
    report.history.push_back(m);
    write_text(config.output_dir / "metrics.csv", format_metrics_csv(report.history));

    const model::Checkpoint ckpt{report.params, static_cast<std::uint32_t>(epoch), config.init_seed, ev.accuracy};
    model::save_checkpoint(config.output_dir / checkpoint_name(epoch), ckpt);
    report.checkpoint = config.output_dir / "checkpoint.bin";
    model::save_checkpoint(report.checkpoint, ckpt);

    if (log) {
      const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "epoch %d  loss %.4f  test acc %.4f  fwd iters %.1f  unconverged %zu  "
                    "adjoint unconverged %zu  fallbacks %zu  %.0fs\n",
                    epoch, m.train_loss, m.test_accuracy, m.mean_forward_iterations, unconverged, unconverged_bw,
                    fallbacks, elapsed);
      *log << buf << std::flush;
    }
  }
  if (log) *log << "checkpoint: " << report.checkpoint.string() << '\n';
  return report;
}

EvalReport cmd_eval(const RunConfig& config, std::ostream* log) {
  const model::Checkpoint ckpt = model::load_checkpoint(config.checkpoint);
  const data::MnistDataset test = load_split(config, false);
  const EvalReport report = evaluate(ckpt.params, test, config.eval_solver, config.noise_seed, config.eval_chunk);
  if (log) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "accuracy %.4f on %zu images (checkpoint says %.4f)\nmean iterations %.2f  mean residual %.3e  "
                  "max residual %.3e  unconverged %zu\n",
                  report.accuracy, report.count, ckpt.accuracy, report.mean_iterations, report.mean_residual,
                  report.max_residual, report.unconverged);
    *log << buf;
  }
  return report;
}

RolloutReport rollout_image(const model::ModelParams& params, const Tensor& image, const RunConfig& config,
                            bool write_files) {
  if (config.steps < 1) throw std::invalid_argument("rollout needs at least one step");
  if (write_files) ensure_output_dir(config);
  const model::EquilibriumMap map(params);
  const deq::EquilibriumContext ctx = map.make_context(model::encode(params, image), config.eval_solver);
  const Tensor z0 =
      model::sample_initial_state(1, params.widths.state, image.dim(2), image.dim(3), config.noise_seed);

  RolloutReport report;
  Tensor previous = z0;
  auto emit = [&](std::size_t step, const Tensor& z) {
    if (write_files) data::write_ppm(config.output_dir / data::frame_filename(step), data::render_frame(z, config.frame));
    ++report.frames;
  };
  emit(0, z0);
  deq::RolloutResult result;
  try {
    result = deq::nca_rollout(map, ctx, z0, config.steps, [&](int k, const Tensor& z, double) {
      report.changes.push_back(mean_abs_diff(z, previous));
      previous = z;
      emit(static_cast<std::size_t>(k), z);
    });
  } catch (const fp::DivergenceError& e) {
    if (write_files) data::write_csv_residuals(config.output_dir / "residuals.csv", e.trace());
    throw NumericalError(std::string("rollout diverged: ") + e.what());
  }
  report.residual_trace = result.residual_trace;
  if (write_files) data::write_csv_residuals(config.output_dir / "residuals.csv", report.residual_trace);
  report.predicted = model::argmax_rows(model::readout(params, result.final_state))[0];
  return report;
}

RolloutReport cmd_rollout(const RunConfig& config, std::ostream* log) {
  const model::Checkpoint ckpt = model::load_checkpoint(config.checkpoint);
  const data::MnistDataset test = load_split(config, false);
  if (config.image_index >= test.size()) {
    throw data::DataError("image index " + std::to_string(config.image_index) + " out of range (" +
                          std::to_string(test.size()) + " test images)");
  }
  RolloutReport report = rollout_image(ckpt.params, test.images.slice_batch(config.image_index, 1), config, true);
  report.label = test.labels[config.image_index];
  if (log) {
    *log << "wrote " << report.frames << " frames and residuals.csv to " << config.output_dir.string() << '\n'
         << "label " << report.label << "  predicted " << report.predicted << "  final residual "
         << report.residual_trace.back() << '\n';
  }
  return report;
}

EvalReport crop_evaluate(const model::ModelParams& params, const data::MnistDataset& dataset,
                         const RunConfig& config) {
  const data::MnistDataset cropped{
      data::crop(dataset.images, config.crop_top, config.crop_left, config.crop_height, config.crop_width),
      dataset.labels};
  return evaluate(params, cropped, config.eval_solver, config.noise_seed, config.eval_chunk);
}

EvalReport cmd_crop_eval(const RunConfig& config, std::ostream* log) {
  const model::Checkpoint ckpt = model::load_checkpoint(config.checkpoint);
  const EvalReport report = crop_evaluate(ckpt.params, load_split(config, false), config);
  if (log) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "crop (%zu,%zu) %zux%zu: accuracy %.4f on %zu images, mean iterations %.2f\n",
                  config.crop_top, config.crop_left, config.crop_height, config.crop_width, report.accuracy,
                  report.count, report.mean_iterations);
    *log << buf << "confusion (rows true, columns predicted):\n";
    for (const auto& row : report.confusion) {
      for (std::size_t k = 0; k < row.size(); ++k) *log << (k ? " " : "") << row[k];
      *log << '\n';
    }
  }
  return report;
}

GradcheckReport cmd_gradcheck(const GradcheckOptions& options, std::ostream* log) {
  const model::Widths widths{2, 3, 4};
  constexpr std::size_t kBatch = 2, kSide = 6;
  const fp::SolverConfig& solver = options.solver;
  const deq::BackwardConfig& backward = options.backward;

  GradcheckReport report;
  report.groups = kGroupNames;
  for (int s = 0; s < options.seeds; ++s) {
    const std::uint64_t seed = options.first_seed + static_cast<std::uint64_t>(s);
    model::ModelParams params = model::init_params(widths, seed);
    std::mt19937_64 rng(derive_seed(seed, 1));
    std::uniform_real_distribution<double> unit(0.0, 1.0), small(-0.1, 0.1);
    // Nonzero biases keep ReLU pre-activations away from the kink; a negative
    // centre self-tap makes the update contractive so every solve reaches tol.
    for (Tensor* t : {&params.k1_bias, &params.k2_bias, &params.mlp1_bias, &params.mlp2_bias}) {
      for (double& v : t->values()) v = small(rng);
    }
    for (std::size_t c = 0; c < widths.state; ++c) params.k2_weight.at(c, widths.encoder + c, 1, 1) -= 1.0;
    Tensor x({kBatch, 1, kSide, kSide});
    for (double& v : x.values()) v = unit(rng);
    std::vector<int> labels(kBatch);
    for (int& l : labels) l = static_cast<int>(rng() % model::kClasses);
    const Tensor z0 = model::sample_initial_state(kBatch, widths.state, kSide, kSide, seed);

    model::TrainStep step = model::loss_and_gradients(params, x, labels, {solver, backward, 0}, z0);
    step.grads.k2_weight *= options.corrupt_k2_scale;
    // Perturbed solves start from the unperturbed equilibrium so they stay on its branch.
    const Tensor warm = model::forward(params, x, solver, z0).z_star;
    auto loss_at = [&](const model::ModelParams& p) {
      return ops::softmax_cross_entropy(model::forward(p, x, solver, warm).logits, labels).loss;
    };

    const auto analytic = step.grads.tensors();
    const auto targets = params.tensors();
    for (std::size_t g = 0; g < targets.size(); ++g) {
      double worst = 0.0, scale = 0.0;
      for (std::size_t i = 0; i < targets[g]->size(); ++i) {
        double& w = (*targets[g])[i];
        const double saved = w;
        w = saved + options.step;
        const double up = loss_at(params);
        w = saved - options.step;
        const double down = loss_at(params);
        w = saved;
        const double numeric = (up - down) / (2.0 * options.step);
        worst = std::max(worst, std::abs((*analytic[g])[i] - numeric));
        scale = std::max(scale, std::abs(numeric));
      }
      const double rel = worst / std::max(scale, 1e-12);
      report.max_rel_error[g] = std::max(report.max_rel_error[g], rel);
    }
  }
  report.passed = std::all_of(report.max_rel_error.begin(), report.max_rel_error.end(),
                              [&](double e) { return e < options.tolerance; });
  if (log) {
    char buf[96];
    for (std::size_t g = 0; g < report.groups.size(); ++g) {
      std::snprintf(buf, sizeof buf, "%-12s max rel error %.3e %s\n", report.groups[g], report.max_rel_error[g],
                    report.max_rel_error[g] < options.tolerance ? "ok" : "FAIL");
      *log << buf;
    }
    *log << (report.passed ? "gradcheck passed" : "gradcheck FAILED") << " over " << options.seeds << " seeds\n";
  }
  return report;
}

}  // namespace deqnca::cli
