// Command-line front end: train | eval | rollout | crop-eval | gradcheck.

#include <CLI11.hpp>

#include <iostream>
#include <memory>

#include "deqnca/checkpoint.hpp"
#include "deqnca/commands.hpp"

using namespace deqnca;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumerical = 3 };

// Reads a flat key=value file and files every unsectioned key under the
// subcommand that was selected on the command line.
class FlatConfig : public CLI::ConfigINI {
 public:
  explicit FlatConfig(const CLI::App* app) : app_(app) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> items = CLI::ConfigINI::from_config(input);
    const auto selected = app_->get_subcommands();
    if (selected.empty()) return items;
    for (auto& item : items) {
      if (item.parents.empty() && item.name != "++" && item.name != "--") item.parents = {selected.front()->get_name()};
    }
    return items;
  }

 private:
  const CLI::App* app_;
};

struct SolverFlags {
  std::string method;
  void bind(CLI::App* app, const std::string& prefix, fp::SolverConfig& cfg) {
    method = std::string(fp::method_name(cfg.method));
    app->add_option("--" + prefix + "-solver", method, "picard | anderson | broyden")->capture_default_str();
    app->add_option("--" + prefix + "-max-iters", cfg.max_iters)->capture_default_str();
    app->add_option("--" + prefix + "-tol", cfg.tol)->capture_default_str();
    app->add_option("--" + prefix + "-anderson-memory", cfg.anderson_memory)->capture_default_str();
    app->add_option("--" + prefix + "-broyden-memory", cfg.broyden_memory)->capture_default_str();
    app->add_option("--" + prefix + "-damping", cfg.picard_damping)->capture_default_str();
  }
  void apply(fp::SolverConfig& cfg) const { cfg.method = fp::parse_method(method); }
};

void add_common(CLI::App* app, cli::RunConfig& cfg) {
  app->add_option("--data-dir", cfg.data_dir, "Directory with the MNIST IDX files")->envname("DEQNCA_DATA_DIR");
  app->add_option("--output-dir", cfg.output_dir)->capture_default_str();
  app->add_option("--ce", cfg.widths.encoder)->capture_default_str();
  app->add_option("--cz", cfg.widths.state)->capture_default_str();
  app->add_option("--hm", cfg.widths.mlp)->capture_default_str();
  app->add_option("--noise-seed", cfg.noise_seed)->capture_default_str();
  app->add_option("--test-limit", cfg.test_limit, "0 keeps the whole split")->capture_default_str();
  app->add_option("--eval-chunk", cfg.eval_chunk)->capture_default_str();
}

void add_checkpoint(CLI::App* app, cli::RunConfig& cfg) {
  app->add_option("--checkpoint", cfg.checkpoint)->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolutional deep equilibrium classifier for MNIST"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Flat key=value file; command-line flags take precedence");
  app.config_formatter(std::make_shared<FlatConfig>(&app));

  cli::RunConfig cfg;
  SolverFlags train_solver, eval_solver;
  std::string backward = std::string(deq::backward_method_name(cfg.backward.method));
  std::string channel_map = "first3", normalization = "tanh";

  auto* train = app.add_subcommand("train", "Train and write metrics.csv plus checkpoints");
  add_common(train, cfg);
  train->add_option("--epochs", cfg.epochs)->capture_default_str();
  train->add_option("--batch-size", cfg.batch_size)->capture_default_str();
  train->add_option("--learning-rate", cfg.learning_rate)->capture_default_str();
  train->add_option("--momentum", cfg.momentum)->capture_default_str();
  train->add_option("--train-limit", cfg.train_limit, "0 keeps the whole split")->capture_default_str();
  train->add_option("--init-seed", cfg.init_seed)->capture_default_str();
  train->add_option("--shuffle-seed", cfg.shuffle_seed)->capture_default_str();
  train->add_option("--backward", backward, "neumann | adjoint-fixed-point")->capture_default_str();
  train->add_option("--backward-max-iters", cfg.backward.max_iters)->capture_default_str();
  train->add_option("--backward-tol", cfg.backward.tol)->capture_default_str();
  train->add_option("--fallback-terms", cfg.fallback_terms)->capture_default_str();
  train_solver.bind(train, "train", cfg.train_solver);
  eval_solver.bind(train, "eval", cfg.eval_solver);

  auto* eval = app.add_subcommand("eval", "Test-set accuracy of a checkpoint");
  add_common(eval, cfg);
  add_checkpoint(eval, cfg);
  eval_solver.bind(eval, "eval", cfg.eval_solver);

  auto* rollout = app.add_subcommand("rollout", "Run the update map as a cellular automaton and dump frames");
  add_common(rollout, cfg);
  add_checkpoint(rollout, cfg);
  rollout->add_option("--image-index", cfg.image_index)->capture_default_str();
  rollout->add_option("--steps", cfg.steps)->capture_default_str();
  rollout->add_option("--channel-map", channel_map, "first3 | pca3 | single")->capture_default_str();
  rollout->add_option("--channel", cfg.frame.channel)->capture_default_str();
  rollout->add_option("--normalization", normalization, "tanh | minmax")->capture_default_str();

  auto* crop = app.add_subcommand("crop-eval", "Accuracy on a cropped window of every test image");
  add_common(crop, cfg);
  add_checkpoint(crop, cfg);
  eval_solver.bind(crop, "eval", cfg.eval_solver);
  crop->add_option("--crop-top", cfg.crop_top)->capture_default_str();
  crop->add_option("--crop-left", cfg.crop_left)->capture_default_str();
  crop->add_option("--crop-height", cfg.crop_height)->capture_default_str();
  crop->add_option("--crop-width", cfg.crop_width)->capture_default_str();

  cli::GradcheckOptions gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the implicit gradients");
  gradcheck->add_option("--seeds", gc.seeds)->capture_default_str();
  gradcheck->add_option("--first-seed", gc.first_seed)->capture_default_str();
  gradcheck->add_option("--tolerance", gc.tolerance)->capture_default_str();
  gradcheck->add_option("--step", gc.step)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    train_solver.apply(cfg.train_solver);
    eval_solver.apply(cfg.eval_solver);
    cfg.backward.method = deq::parse_backward_method(backward);
    cfg.frame.channel_map = data::parse_channel_map(channel_map);
    cfg.frame.normalization = data::parse_normalization(normalization);
    cfg.train_solver.validate();
    cfg.eval_solver.validate();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*train) {
      cli::cmd_train(cfg, &std::cout);
    } else if (*eval) {
      cli::cmd_eval(cfg, &std::cout);
    } else if (*rollout) {
      cli::cmd_rollout(cfg, &std::cout);
    } else if (*crop) {
      cli::cmd_crop_eval(cfg, &std::cout);
    } else if (*gradcheck) {
      return cli::cmd_gradcheck(gc, &std::cout).passed ? kOk : kNumerical;
    }
  } catch (const data::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const model::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kDataError;
  } catch (const cli::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const fp::DivergenceError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kOk;
}
