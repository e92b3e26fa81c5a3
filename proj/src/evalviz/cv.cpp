#include <iostream>

#include "lne/evalviz.hpp"
#include "lne/seed.hpp"

namespace lne::evalviz {

namespace {

model::FeatureMode features_for(Task task, const CvConfig& config) {
  if (task == Task::Age) return model::FeatureMode::ZOnly;
  return config.group_features.value_or(model::FeatureMode::ZConcatDz);
}

void evaluate_encoder(const cohort::Cohort& cohort, const cohort::Fold& fold, std::size_t k,
                      const std::string& method, model::ModelParamsF& encoder, const CvConfig& config,
                      std::vector<MetricsRecord>& out) {
  HeadTrainConfig head = config.head;
  head.seed = derive_seed(config.head.seed, "fold", k);
  for (Task task : config.tasks) {
    const auto mode = features_for(task, config);
    for (HeadMode hm : config.modes) {
      Scores s;
      if (hm == HeadMode::Frozen) {
        const auto train = extract_features(encoder, config.arch, cohort, fold.train, mode);
        const auto val = extract_features(encoder, config.arch, cohort, fold.validation, mode);
        const auto test = extract_features(encoder, config.arch, cohort, fold.test, mode);
        s = fit_head_frozen(train, val, test, task, head).test;
      } else {
        s = fine_tune(encoder, config.arch, cohort, fold, task, mode, head).result.test;
      }
      out.push_back(make_record(task, method, hm, k, s));
      if (!config.quiet) std::cerr << metrics_csv_row(out.back()) << "\n";
    }
  }
}

}  // namespace

CvResult cross_validate(const cohort::Cohort& cohort, const CvConfig& config) {
  config.train.validate();
  config.head.validate();
  CvResult result;
  result.folds = cohort::split_folds(cohort, config.folds, config.train.seed, config.validation_fraction);
  for (std::size_t k = 0; k < result.folds.size(); ++k) {
    const auto& fold = result.folds[k];
    for (auto method : config.methods) {
      training::TrainConfig tc = config.train;
      tc.method = method;
      training::TrainOptions options;
      options.quiet = config.quiet;
      if (config.work_dir) options.out_dir = *config.work_dir / training::to_string(method) / ("fold" + std::to_string(k));
      model::ModelParamsF encoder;
      if (config.reuse_checkpoints && options.out_dir && std::filesystem::exists(*options.out_dir / "final" / "ckpt.json")) {
        encoder = model::load_checkpoint(*options.out_dir / "final").params;
      } else {
        encoder = training::train(cohort, fold, tc, config.arch, options).params;
      }
      evaluate_encoder(cohort, fold, k, training::to_string(method), encoder, config, result.records);
    }
    if (config.include_no_pretrain) {
      auto encoder = model::init_params<float>(config.arch, derive_seed(config.train.seed, "init"));
      evaluate_encoder(cohort, fold, k, "none", encoder, config, result.records);
    }
  }
  return result;
}

}  // namespace lne::evalviz
