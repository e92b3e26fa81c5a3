#include <iostream>

#include "CLI11.hpp"
#include "lne/harness.hpp"

namespace h = lne::harness;

int main(int argc, char** argv) {
  CLI::App app{"Longitudinal neighbourhood embedding: synthetic cohorts, training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", h::version());

  std::string config_path;
  app.add_option("-c,--config", config_path, "JSON experiment config (defaults apply to absent keys)")
      ->check(CLI::ExistingFile);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Global seed (overrides the config)");

  h::GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic longitudinal cohort");
  gen_cmd->add_option("-o,--out", gen.out, "Dataset directory (default: paths.data)");
  gen_cmd->add_flag("-f,--force", gen.force, "Overwrite a non-empty directory");

  h::TrainCommandOptions train;
  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "Pretrain an encoder on one fold");
  train_cmd->add_option("-m,--method", train.method, "lne | ae | lssl")->capture_default_str();
  train_cmd->add_option("--fold", train.fold, "Fold index")->capture_default_str();
  train_cmd->add_option("--lambda-dir", train.lambda_dir, "Override the direction weight");
  train_cmd->add_option("--resume", resume, "Run directory to resume from")->check(CLI::ExistingDirectory);
  train_cmd->add_option("--stop-after", train.stop_after, "Stop after this many epochs in this invocation");
  train_cmd->add_option("-o,--out", train.out, "Run directory");

  h::EvalCommandOptions eval;
  std::string features;
  auto* eval_cmd = app.add_subcommand("eval", "Fit a downstream head on a pretrained encoder");
  eval_cmd->add_option("checkpoint", eval.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("-t,--task", eval.task, "age | group")->capture_default_str();
  eval_cmd->add_option("--mode", eval.mode, "frozen | finetune")->capture_default_str();
  eval_cmd->add_option("--features", features, "z | z+dz (default: z for age, z+dz for group)");
  eval_cmd->add_option("--fold", eval.fold, "Fold index")->capture_default_str();
  eval_cmd->add_option("--label", eval.label, "Method label written to metrics.csv")->capture_default_str();
  eval_cmd->add_option("-o,--out", eval.out, "Output directory");

  h::PlotCommandOptions plot;
  auto* plot_cmd = app.add_subcommand("plot", "Trajectory field of all pairs in the PCA plane");
  plot_cmd->add_option("checkpoint", plot.checkpoint, "Checkpoint directory")->required();
  plot_cmd->add_option("--color", plot.color, "age | group")->capture_default_str();
  plot_cmd->add_option("-o,--out", plot.out, "Output directory");

  h::GradcheckOptions grad;
  std::string corrupt;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  grad_cmd->add_option("--seeds", grad.seeds, "Random instances per check")->capture_default_str();
  grad_cmd->add_option("--corrupt", corrupt, "Scale the backward pass of one check by 1.5 (self-test)");

  h::CvCommandOptions cv;
  auto* cv_cmd = app.add_subcommand("cv", "Full cross-validated pretrain and evaluate pipeline");
  cv_cmd->add_option("-o,--out", cv.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? h::kSuccess : h::kUsageError;
  }

  try {
    h::ExperimentConfig config = config_path.empty() ? h::ExperimentConfig{} : h::load_config(config_path);
    if (seed) config.seed = *seed;
    if (*gen_cmd) return h::cmd_gen_data(config, gen, std::cout);
    if (*train_cmd) {
      if (!resume.empty()) train.resume = resume;
      return h::cmd_train(config, train, std::cout);
    }
    if (*eval_cmd) {
      if (!features.empty()) eval.features = features;
      return h::cmd_eval(config, eval, std::cout);
    }
    if (*plot_cmd) return h::cmd_plot(config, plot, std::cout);
    if (*grad_cmd) {
      if (!corrupt.empty()) grad.corrupt = corrupt;
      return h::cmd_gradcheck(grad, std::cout);
    }
    if (*cv_cmd) return h::cmd_cv(config, cv, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return h::exit_code_for(e);
  }
  return h::kUsageError;
}
