#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "lne/harness.hpp"
#include "lne/seed.hpp"

#ifndef LNE_VERSION
#define LNE_VERSION "unknown"
#endif

namespace lne::harness {

namespace fs = std::filesystem;
using nlohmann::json;

std::string version() { return LNE_VERSION; }

std::uint64_t ExperimentConfig::generator_seed() const { return derive_seed(seed, "generator"); }
std::uint64_t ExperimentConfig::training_seed() const { return derive_seed(seed, "training"); }
std::uint64_t ExperimentConfig::head_seed() const { return derive_seed(seed, "heads"); }

cohort::GeneratorConfig ExperimentConfig::resolved_generator() const {
  auto g = generator;
  g.seed = generator_seed();
  return g;
}

training::TrainConfig ExperimentConfig::resolved_training() const {
  auto t = training;
  t.seed = training_seed();
  return t;
}

evalviz::HeadTrainConfig ExperimentConfig::head_config() const {
  evalviz::HeadTrainConfig h;
  h.epochs = evaluation.head_epochs;
  h.finetune_epochs = evaluation.finetune_epochs;
  h.batch_size = evaluation.head_batch_size;
  h.adam = training.adam;
  h.adam.lr = evaluation.head_lr;
  h.adam.weight_decay = evaluation.head_weight_decay;
  h.seed = head_seed();
  return h;
}

evalviz::CvConfig ExperimentConfig::cv_config() const {
  evalviz::CvConfig cv;
  cv.folds = evaluation.folds;
  cv.validation_fraction = evaluation.validation_fraction;
  cv.methods.clear();
  for (const auto& m : evaluation.methods) cv.methods.push_back(training::method_from_string(m));
  cv.tasks.clear();
  for (const auto& t : evaluation.tasks) cv.tasks.push_back(evalviz::task_from_string(t));
  cv.modes.clear();
  for (const auto& m : evaluation.modes) cv.modes.push_back(evalviz::head_mode_from_string(m));
  cv.group_features = evalviz::feature_mode_from_string(evaluation.group_features);
  cv.train = resolved_training();
  cv.head = head_config();
  cv.arch = architecture;
  cv.include_no_pretrain = evaluation.include_no_pretrain;
  return cv;
}

void ExperimentConfig::validate() const {
  generator.validate(std::size_t{1} << architecture.encoder_channels.size());
  architecture.validate();
  if (generator.image_size != architecture.input_size) {
    throw ConfigError("generator.image_size must equal architecture.input_size");
  }
  training.validate();
  head_config().validate();
  if (evaluation.folds < 2) throw ConfigError("evaluation.folds must be at least 2");
  if (!(evaluation.validation_fraction >= 0.0 && evaluation.validation_fraction < 1.0)) {
    throw ConfigError("evaluation.validation_fraction must lie in [0,1)");
  }
  cv_config();  // validates the method/task/mode names
}

namespace {

void check_keys(const json& j, const std::string& section, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown key '" + key + "' in " + (section.empty() ? std::string("top level") : section));
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& target) {
  if (j.contains(key)) target = j.at(key).get<T>();
}

json generator_json(const cohort::GeneratorConfig& c) {
  return {{"n_subjects", c.n_subjects},         {"min_visits", c.min_visits},
          {"max_visits", c.max_visits},         {"age_min", c.age_min},
          {"age_max", c.age_max},               {"gap_min", c.gap_min},
          {"gap_max", c.gap_max},               {"image_size", c.image_size},
          {"noise_level", c.noise_level},       {"fast_fraction", c.fast_fraction},
          {"normal_speed_mean", c.normal_speed_mean}, {"normal_speed_sd", c.normal_speed_sd},
          {"fast_speed_mean", c.fast_speed_mean},     {"fast_speed_sd", c.fast_speed_sd},
          {"baseline_sd", c.baseline_sd},       {"nuisance_level", c.nuisance_level}};
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  try {
    check_keys(root, "", {"seed", "generator", "architecture", "training", "evaluation", "paths"});
    read(root, "seed", c.seed);
    if (root.contains("generator")) {
      const auto& g = root["generator"];
      const auto defaults = generator_json(c.generator);
      std::set<std::string> keys;
      for (const auto& [k, v] : defaults.items()) keys.insert(k);
      check_keys(g, "generator", keys);
      auto& t = c.generator;
      read(g, "n_subjects", t.n_subjects);
      read(g, "min_visits", t.min_visits);
      read(g, "max_visits", t.max_visits);
      read(g, "age_min", t.age_min);
      read(g, "age_max", t.age_max);
      read(g, "gap_min", t.gap_min);
      read(g, "gap_max", t.gap_max);
      read(g, "image_size", t.image_size);
      read(g, "noise_level", t.noise_level);
      read(g, "fast_fraction", t.fast_fraction);
      read(g, "normal_speed_mean", t.normal_speed_mean);
      read(g, "normal_speed_sd", t.normal_speed_sd);
      read(g, "fast_speed_mean", t.fast_speed_mean);
      read(g, "fast_speed_sd", t.fast_speed_sd);
      read(g, "baseline_sd", t.baseline_sd);
      read(g, "nuisance_level", t.nuisance_level);
    }
    if (root.contains("architecture")) {
      const auto& a = root["architecture"];
      check_keys(a, "architecture", {"encoder_channels", "decoder_channels", "input_size", "slope"});
      read(a, "encoder_channels", c.architecture.encoder_channels);
      read(a, "decoder_channels", c.architecture.decoder_channels);
      read(a, "input_size", c.architecture.input_size);
      read(a, "slope", c.architecture.slope);
    }
    if (root.contains("training")) {
      const auto& t = root["training"];
      check_keys(t, "training",
                 {"epochs", "batch_size", "n_nb", "lr", "weight_decay", "beta1", "beta2", "adam_eps", "lambda_recon",
                  "lambda_dir", "cosine_eps", "detach_dh", "augment", "method"});
      auto& tc = c.training;
      read(t, "epochs", tc.epochs);
      read(t, "batch_size", tc.batch_size);
      read(t, "n_nb", tc.n_nb);
      read(t, "lr", tc.adam.lr);
      read(t, "weight_decay", tc.adam.weight_decay);
      read(t, "beta1", tc.adam.beta1);
      read(t, "beta2", tc.adam.beta2);
      read(t, "adam_eps", tc.adam.eps);
      read(t, "lambda_recon", tc.weights.lambda_recon);
      read(t, "lambda_dir", tc.weights.lambda_dir);
      read(t, "cosine_eps", tc.weights.cosine_eps);
      read(t, "detach_dh", tc.detach_dh);
      read(t, "augment", tc.augment);
      if (t.contains("method")) tc.method = training::method_from_string(t["method"].get<std::string>());
    }
    if (root.contains("evaluation")) {
      const auto& e = root["evaluation"];
      check_keys(e, "evaluation",
                 {"folds", "validation_fraction", "head_epochs", "finetune_epochs", "head_batch_size", "head_lr",
                  "head_weight_decay", "methods", "tasks", "modes", "group_features", "include_no_pretrain"});
      auto& ev = c.evaluation;
      read(e, "folds", ev.folds);
      read(e, "validation_fraction", ev.validation_fraction);
      read(e, "head_epochs", ev.head_epochs);
      read(e, "finetune_epochs", ev.finetune_epochs);
      read(e, "head_batch_size", ev.head_batch_size);
      read(e, "head_lr", ev.head_lr);
      read(e, "head_weight_decay", ev.head_weight_decay);
      read(e, "methods", ev.methods);
      read(e, "tasks", ev.tasks);
      read(e, "modes", ev.modes);
      read(e, "group_features", ev.group_features);
      read(e, "include_no_pretrain", ev.include_no_pretrain);
    }
    if (root.contains("paths")) {
      const auto& p = root["paths"];
      check_keys(p, "paths", {"data", "output"});
      read(p, "data", c.paths.data);
      read(p, "output", c.paths.output);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  } catch (const training::TrainingError& e) {
    throw ConfigError(e.what());
  }
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const ExperimentConfig& c) {
  const auto& t = c.training;
  const auto& e = c.evaluation;
  json j{{"seed", c.seed},
         {"generator", generator_json(c.generator)},
         {"architecture",
          {{"encoder_channels", c.architecture.encoder_channels},
           {"decoder_channels", c.architecture.decoder_channels},
           {"input_size", c.architecture.input_size},
           {"slope", c.architecture.slope}}},
         {"training",
          {{"epochs", t.epochs},
           {"batch_size", t.batch_size},
           {"n_nb", t.n_nb},
           {"lr", t.adam.lr},
           {"weight_decay", t.adam.weight_decay},
           {"beta1", t.adam.beta1},
           {"beta2", t.adam.beta2},
           {"adam_eps", t.adam.eps},
           {"lambda_recon", t.weights.lambda_recon},
           {"lambda_dir", t.weights.lambda_dir},
           {"cosine_eps", t.weights.cosine_eps},
           {"detach_dh", t.detach_dh},
           {"augment", t.augment},
           {"method", training::to_string(t.method)}}},
         {"evaluation",
          {{"folds", e.folds},
           {"validation_fraction", e.validation_fraction},
           {"head_epochs", e.head_epochs},
           {"finetune_epochs", e.finetune_epochs},
           {"head_batch_size", e.head_batch_size},
           {"head_lr", e.head_lr},
           {"head_weight_decay", e.head_weight_decay},
           {"methods", e.methods},
           {"tasks", e.tasks},
           {"modes", e.modes},
           {"group_features", e.group_features},
           {"include_no_pretrain", e.include_no_pretrain}}},
         {"paths", {{"data", c.paths.data}, {"output", c.paths.output}}}};
  return j.dump(2) + "\n";
}

void write_run_metadata(const fs::path& dir, const ExperimentConfig& config) {
  fs::create_directories(dir);
  std::ofstream cfg(dir / "config.resolved.json", std::ios::trunc);
  std::ofstream ver(dir / "VERSION", std::ios::trunc);
  if (!cfg || !ver) throw cohort::DatasetIoError(cohort::DatasetIoError::Kind::Io, "cannot write run metadata in " + dir.string());
  cfg << to_json(config);
  ver << version() << "\n";
}

}  // namespace lne::harness
