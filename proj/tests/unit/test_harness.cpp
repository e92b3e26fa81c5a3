#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "lne/harness.hpp"
#include "test_support.hpp"

using namespace lne;
using namespace lne::harness;

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ExperimentConfig small_experiment(const fs::path& root) {
  std::ostringstream j;
  j << R"({"seed": 3,
    "generator": {"n_subjects": 60, "image_size": 16},
    "architecture": {"encoder_channels": [4, 8, 8, 4], "decoder_channels": [8, 8, 4, 4], "input_size": 16},
    "training": {"epochs": 2, "batch_size": 8},
    "evaluation": {"head_epochs": 3, "finetune_epochs": 1},
    "paths": {"data": ")"
    << (root / "data").string() << R"(", "output": ")" << (root / "runs").string() << R"("}})";
  return parse_config(j.str());
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LNE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config defaults and strictness") {
  const auto c = parse_config("{}");
  CHECK(c.training.batch_size == 64);
  CHECK(c.training.n_nb == 5);
  CHECK(c.training.adam.lr == 5e-4);
  CHECK(c.training.adam.weight_decay == 1e-5);
  CHECK(c.training.epochs == 50);
  CHECK(c.training.weights.lambda_dir == 1.0);
  CHECK(c.training.weights.lambda_recon == 2.0);
  CHECK(c.generator.n_subjects == 200);
  CHECK(c.architecture.input_size == 32);

  CHECK_THROWS_AS(parse_config(R"({"trainig": {}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"training": {"learning_rate": 0.1}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"generator": {"n_subject": 3}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"training": {"epochs": "ten"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"training": {"batch_size": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_config("{ nope"), ConfigError);

  SUBCASE("serialization round trip") {
    auto custom = parse_config(R"({"seed": 9, "training": {"method": "lssl", "lambda_dir": 0.5, "detach_dh": false},
                                    "evaluation": {"tasks": ["age", "group"]}})");
    const auto text = to_json(custom);
    CHECK(to_json(parse_config(text)) == text);
    CHECK(parse_config(text).training.method == training::Method::LSSL);
  }
  SUBCASE("named seed streams") {
    auto a = parse_config(R"({"seed": 1})"), b = parse_config(R"({"seed": 2})");
    CHECK(a.generator_seed() != a.training_seed());
    CHECK(a.training_seed() != a.head_seed());
    CHECK(a.generator_seed() != b.generator_seed());
    CHECK(a.resolved_generator().seed == a.generator_seed());
    CHECK(a.resolved_training().seed == a.training_seed());
  }
}

TEST_CASE("exit code mapping") {
  CHECK(exit_code_for(ConfigError("x")) == kUsageError);
  CHECK(exit_code_for(CommandError(kIoError, "x")) == kIoError);
  CHECK(exit_code_for(cohort::DatasetIoError(cohort::DatasetIoError::Kind::MissingFile, "x")) == kIoError);
  CHECK(exit_code_for(std::runtime_error("x")) == kVerificationFailure);
}

TEST_CASE("command pipeline") {
  test::TempDir root("harness");
  const auto config = small_experiment(root.path());
  std::ostringstream log;

  REQUIRE(cmd_gen_data(config, {}, log) == kSuccess);
  const auto data = root.path() / "data";
  CHECK(fs::exists(data / "manifest.json"));
  CHECK(fs::exists(data / "config.resolved.json"));
  CHECK(fs::exists(data / "VERSION"));
  const auto cohort = cohort::load_cohort(data);
  CHECK(log.str().find("pairs: " + std::to_string(cohort::build_pairs(cohort).size()) + "\n") != std::string::npos);
  CHECK_THROWS_AS(cmd_gen_data(config, {}, log), CommandError);
  CHECK(cmd_gen_data(config, {data, true}, log) == kSuccess);

  TrainCommandOptions lne;
  lne.out = root.path() / "lne";
  REQUIRE(cmd_train(config, lne, log) == kSuccess);
  const auto metrics = read_file(lne.out / "metrics.csv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 2 * 2);
  CHECK(fs::exists(lne.out / "config.resolved.json"));

  SUBCASE("ae equals lne with zero direction weight") {
    TrainCommandOptions ae, zero;
    ae.method = "ae";
    ae.out = root.path() / "ae";
    zero.lambda_dir = 0.0;
    zero.out = root.path() / "zero";
    REQUIRE(cmd_train(config, ae, log) == kSuccess);
    REQUIRE(cmd_train(config, zero, log) == kSuccess);
    const auto a = model::load_checkpoint(ae.out / "final");
    const auto z = model::load_checkpoint(zero.out / "final");
    CHECK(a.params.identical(z.params));
    CHECK(read_file(ae.out / "metrics.csv").size() == read_file(zero.out / "metrics.csv").size());
    TrainCommandOptions bad;
    bad.method = "vae";
    CHECK_THROWS_AS(cmd_train(config, bad, log), CommandError);
  }
  SUBCASE("eval keeps the checkpoint and writes parseable metrics") {
    const auto ckpt = lne.out / "best";
    const auto before = read_file(ckpt / "ckpt.bin");
    for (const char* features : {"z", "z+dz"}) {
      EvalCommandOptions e;
      e.checkpoint = ckpt;
      e.task = "group";
      e.features = features;
      e.out = root.path() / ("eval_" + std::string(features == std::string("z") ? "z" : "zdz"));
      std::ostringstream elog;
      REQUIRE(cmd_eval(config, e, elog) == kSuccess);
      const auto dim = std::string(features) == "z" ? 4 : 8;
      CHECK(elog.str().find("(dim " + std::to_string(dim) + ")") != std::string::npos);
      const auto records = evalviz::parse_metrics_csv(read_file(e.out / "metrics.csv"));
      REQUIRE(records.size() == 1);
      CHECK(records[0].bacc.has_value());
      CHECK(evalviz::metrics_csv_row(records[0]) + "\n" ==
            read_file(e.out / "metrics.csv").substr(evalviz::metrics_csv_header().size() + 1));
    }
    CHECK(read_file(ckpt / "ckpt.bin") == before);
    EvalCommandOptions missing;
    missing.checkpoint = root.path() / "nowhere";
    missing.out = root.path() / "eval_missing";
    try {
      cmd_eval(config, missing, log);
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(exit_code_for(e) == kIoError);
    }
  }
  SUBCASE("plot is deterministic and reports group pairs") {
    for (const char* dir : {"plot_a", "plot_b"}) {
      PlotCommandOptions p;
      p.checkpoint = lne.out / "best";
      p.color = "group";
      p.out = root.path() / dir;
      REQUIRE(cmd_plot(config, p, log) == kSuccess);
    }
    for (const char* f : {"field.svg", "field.csv", "curve.json", "groups.csv"})
      CHECK(read_file(root.path() / "plot_a" / f) == read_file(root.path() / "plot_b" / f));
    const auto groups = read_file(root.path() / "plot_a" / "groups.csv");
    CHECK(std::count(groups.begin(), groups.end(), '\n') == 2);  // header + one pair of two groups
  }
  SUBCASE("resume reproduces the uninterrupted run") {
    TrainCommandOptions part;
    part.out = root.path() / "part";
    part.stop_after = 1;
    REQUIRE(cmd_train(config, part, log) == kSuccess);
    TrainCommandOptions rest;
    rest.resume = part.out;
    REQUIRE(cmd_train(config, rest, log) == kSuccess);
    CHECK(model::load_checkpoint(part.out / "final").params.identical(model::load_checkpoint(lne.out / "final").params));
  }
}

TEST_CASE("gradcheck command") {
  std::ostringstream out;
  CHECK(cmd_gradcheck({1, "mse"}, out) == kVerificationFailure);
  CHECK(out.str().find("FAIL") != std::string::npos);
  CHECK_THROWS_AS(cmd_gradcheck({1, "no_such_op"}, out), CommandError);
  const auto names = gradcheck_names();
  CHECK(std::find(names.begin(), names.end(), "model_lne_full") != names.end());
}

TEST_CASE("command line exit codes") {
  test::TempDir root("cli");
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("train --method") == 2);
  const auto cfg = root.path() / "bad.json";
  std::ofstream(cfg) << R"({"training": {"epoch": 3}})";
  CHECK(run_cli("-c " + cfg.string() + " gen-data -o " + (root.path() / "d").string()) == 2);
  CHECK(run_cli("eval " + (root.path() / "missing").string()) == 3);
  CHECK(run_cli("gradcheck --seeds 1 --corrupt dense") == 1);
}
