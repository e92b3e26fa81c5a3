#include <algorithm>

#include "lne/evalviz.hpp"

namespace lne::evalviz {

std::string to_string(Task t) { return t == Task::Age ? "age" : "group"; }

Task task_from_string(const std::string& s) {
  if (s == "age") return Task::Age;
  if (s == "group") return Task::Group;
  throw EvalError("unknown task '" + s + "' (expected age or group)");
}

std::string to_string(HeadMode m) { return m == HeadMode::Frozen ? "frozen" : "finetune"; }

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "frozen") return HeadMode::Frozen;
  if (s == "finetune") return HeadMode::Finetune;
  throw EvalError("unknown mode '" + s + "' (expected frozen or finetune)");
}

std::string to_string(model::FeatureMode m) { return m == model::FeatureMode::ZOnly ? "z" : "z+dz"; }

model::FeatureMode feature_mode_from_string(const std::string& s) {
  if (s == "z") return model::FeatureMode::ZOnly;
  if (s == "z+dz") return model::FeatureMode::ZConcatDz;
  throw EvalError("unknown feature mode '" + s + "' (expected z or z+dz)");
}

Matrix encode_images(model::ModelParamsF& params, const model::Architecture& arch,
                     const std::vector<const cohort::Image*>& images, std::size_t chunk) {
  const std::size_t d = arch.latent_dim(), s = arch.input_size;
  Matrix out(images.size(), d);
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t end = std::min(images.size(), begin + chunk);
    std::vector<float> pixels;
    pixels.reserve((end - begin) * s * s);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& img = *images[i];
      if (img.height != s || img.width != s) {
        throw EvalError("image size " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                        " does not match the checkpoint input size " + std::to_string(s));
      }
      pixels.insert(pixels.end(), img.pixels.begin(), img.pixels.end());
    }
    ad::Tape<float> tape(false);
    const ad::TensorF x({end - begin, 1, s, s}, std::move(pixels));
    const auto z = model::encode(tape, params, arch, x, model::Mode::Eval);
    for (std::size_t i = 0; i < (end - begin) * d; ++i) out.data[begin * d + i] = z.data()[i];
  }
  return out;
}

EncodedPairs encode_pairs(model::ModelParamsF& params, const model::Architecture& arch,
                          const std::vector<cohort::ImagePair>& pairs) {
  std::vector<const cohort::Image*> xt, xs;
  EncodedPairs e;
  for (const auto& p : pairs) {
    xt.push_back(&p.x_t);
    xs.push_back(&p.x_s);
    e.age_t.push_back(p.age_t);
    e.groups.push_back(p.group);
    e.subject_ids.push_back(p.subject_id);
  }
  e.z_t = encode_images(params, arch, xt);
  e.z_s = encode_images(params, arch, xs);
  std::vector<double> dt;
  for (const auto& p : pairs) dt.push_back(p.delta_t);
  e.dz = graph::trajectory_vectors(e.z_t, e.z_s, dt);
  return e;
}

std::vector<std::string> class_names(const cohort::Cohort& cohort) {
  std::vector<cohort::Group> present;
  for (const auto& s : cohort.subjects) {
    if (s.group != cohort::Group::None && std::find(present.begin(), present.end(), s.group) == present.end()) {
      present.push_back(s.group);
    }
  }
  std::sort(present.begin(), present.end());
  std::vector<std::string> names;
  for (auto g : present) names.push_back(cohort::to_string(g));
  return names;
}

namespace {

int label_of(cohort::Group g, const std::vector<std::string>& names) {
  if (g == cohort::Group::None) return -1;
  const auto it = std::find(names.begin(), names.end(), cohort::to_string(g));
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

}  // namespace

FeatureSet extract_features(model::ModelParamsF& params, const model::Architecture& arch, const cohort::Cohort& cohort,
                            const std::vector<std::string>& subjects, model::FeatureMode mode) {
  FeatureSet set;
  set.mode = mode;
  set.class_names = class_names(cohort);
  if (mode == model::FeatureMode::ZOnly) {
    std::vector<const cohort::Image*> images;
    for (const auto& id : subjects) {
      const auto& s = cohort.subject(id);
      for (const auto& v : s.visits) {
        images.push_back(&v.image);
        set.ages.push_back(v.age);
        set.labels.push_back(label_of(s.group, set.class_names));
        set.subject_ids.push_back(s.id);
      }
    }
    set.features = encode_images(params, arch, images);
    return set;
  }
  const auto pairs = cohort::build_pairs(cohort, subjects);
  const auto e = encode_pairs(params, arch, pairs);
  const std::size_t d = e.z_t.cols;
  set.features = Matrix(pairs.size(), 2 * d);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      set.features(i, k) = e.z_t(i, k);
      set.features(i, d + k) = e.dz(i, k);
    }
    set.ages.push_back(pairs[i].age_t);
    set.labels.push_back(label_of(pairs[i].group, set.class_names));
    set.subject_ids.push_back(pairs[i].subject_id);
  }
  return set;
}

}  // namespace lne::evalviz
