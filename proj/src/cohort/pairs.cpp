#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>
#include <set>

#include "lne/cohort.hpp"
#include "lne/seed.hpp"

namespace lne::cohort {

namespace {

void append_pairs(const Subject& s, std::vector<ImagePair>& out) {
  const auto& v = s.visits;
  for (std::size_t t = 0; t < v.size(); ++t) {
    for (std::size_t u = t + 1; u < v.size(); ++u) {
      const double dt = v[u].age - v[t].age;
      if (!(dt > 0.0)) throw CohortError("subject " + s.id + " has visits out of age order");
      ImagePair p;
      p.x_t = v[t].image;
      p.x_s = v[u].image;
      p.delta_t = dt;
      p.subject_id = s.id;
      p.age_t = v[t].age;
      p.age_s = v[u].age;
      p.t_index = t;
      p.s_index = u;
      p.group = s.group;
      p.speed = s.speed;
      out.push_back(std::move(p));
    }
  }
}

}  // namespace

std::vector<ImagePair> build_pairs(const Cohort& cohort, PairStats* stats) {
  std::vector<ImagePair> out;
  std::size_t skipped = 0;
  for (const auto& s : cohort.subjects) {
    if (s.visits.size() < 2) {
      std::cerr << "warning: subject " << s.id << " has fewer than two visits; skipped\n";
      ++skipped;
      continue;
    }
    append_pairs(s, out);
  }
  if (stats) stats->skipped_subjects = skipped;
  return out;
}

std::vector<ImagePair> build_pairs(const Cohort& cohort, const std::vector<std::string>& subject_ids) {
  std::vector<ImagePair> out;
  for (const auto& id : subject_ids) {
    const auto& s = cohort.subject(id);
    if (s.visits.size() < 2) {
      std::cerr << "warning: subject " << s.id << " has fewer than two visits; skipped\n";
      continue;
    }
    append_pairs(s, out);
  }
  return out;
}

// ---------------------------------------------------------------------------

AugmentParams sample_augment(std::uint64_t seed) {
  Rng rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> angle(-kMaxRotationDeg, kMaxRotationDeg);
  std::uniform_int_distribution<int> shift(-kMaxShift, kMaxShift);
  AugmentParams p;
  p.flip = coin(rng);
  p.angle_deg = angle(rng);
  p.shift_x = shift(rng);
  p.shift_y = shift(rng);
  return p;
}

Image flip_horizontal(const Image& image) {
  Image out = image;
  for (std::size_t y = 0; y < image.height; ++y) {
    std::reverse(out.pixels.begin() + static_cast<std::ptrdiff_t>(y * image.width),
                 out.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * image.width));
  }
  return out;
}

namespace {

Image rotate(const Image& image, double angle_deg) {
  const double rad = angle_deg * M_PI / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cx = (static_cast<double>(image.width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(image.height) - 1.0) / 2.0;
  const auto H = static_cast<std::ptrdiff_t>(image.height), W = static_cast<std::ptrdiff_t>(image.width);
  auto sample = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> double {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0.0;
    return image.pixels[static_cast<std::size_t>(y * W + x)];
  };
  Image out{image.height, image.width, std::vector<float>(image.pixels.size(), 0.0f)};
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = cx + c * dx + s * dy;
      const double sy = cy - s * dx + c * dy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
      const double v = (1 - ay) * ((1 - ax) * sample(y0, x0) + ax * sample(y0, x0 + 1)) +
                       ay * ((1 - ax) * sample(y0 + 1, x0) + ax * sample(y0 + 1, x0 + 1));
      out.pixels[static_cast<std::size_t>(y * W + x)] = static_cast<float>(v);
    }
  }
  return out;
}

Image shift(const Image& image, int sx, int sy) {
  Image out{image.height, image.width, std::vector<float>(image.pixels.size(), 0.0f)};
  const auto H = static_cast<int>(image.height), W = static_cast<int>(image.width);
  for (int y = 0; y < H; ++y) {
    const int from_y = y - sy;
    if (from_y < 0 || from_y >= H) continue;
    for (int x = 0; x < W; ++x) {
      const int from_x = x - sx;
      if (from_x < 0 || from_x >= W) continue;
      out.pixels[static_cast<std::size_t>(y * W + x)] = image.pixels[static_cast<std::size_t>(from_y * W + from_x)];
    }
  }
  return out;
}

}  // namespace

Image apply_augment(const Image& image, const AugmentParams& params) {
  Image out = params.flip ? flip_horizontal(image) : image;
  if (params.angle_deg != 0.0) out = rotate(out, params.angle_deg);
  if (params.shift_x != 0 || params.shift_y != 0) out = shift(out, params.shift_x, params.shift_y);
  return out;
}

ImagePair augment_pair(const ImagePair& pair, const AugmentParams& params) {
  ImagePair out = pair;
  out.x_t = apply_augment(pair.x_t, params);
  out.x_s = apply_augment(pair.x_s, params);
  return out;
}

ImagePair augment_pair(const ImagePair& pair, std::uint64_t seed, AugmentParams* sampled) {
  const AugmentParams params = sample_augment(seed);
  if (sampled) *sampled = params;
  return augment_pair(pair, params);
}

// ---------------------------------------------------------------------------

std::vector<Fold> split_folds(const Cohort& cohort, std::size_t k, std::uint64_t seed, double validation_fraction) {
  const std::size_t n = cohort.subjects.size();
  if (k == 0 || k > n) {
    throw CohortError("cannot split " + std::to_string(n) + " subjects into " + std::to_string(k) + " folds");
  }
  std::vector<std::string> ids;
  for (const auto& s : cohort.subjects) ids.push_back(s.id);
  Rng rng = make_rng(seed, "folds");
  std::shuffle(ids.begin(), ids.end(), rng);

  std::vector<Fold> folds(k);
  for (std::size_t i = 0; i < n; ++i) folds[i % k].test.push_back(ids[i]);
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(folds[f].test.begin(), folds[f].test.end());
    const std::set<std::string> test(folds[f].test.begin(), folds[f].test.end());
    std::vector<std::string> train;
    for (const auto& s : cohort.subjects) {
      if (!test.count(s.id)) train.push_back(s.id);
    }
    std::size_t n_val = static_cast<std::size_t>(std::lround(validation_fraction * static_cast<double>(train.size())));
    if (validation_fraction > 0.0 && train.size() >= 2) n_val = std::max<std::size_t>(n_val, 1);
    n_val = std::min(n_val, train.size() > 0 ? train.size() - 1 : 0);
    std::vector<std::string> shuffled = train;
    Rng vrng = make_rng(seed, "validation", f);
    std::shuffle(shuffled.begin(), shuffled.end(), vrng);
    const std::set<std::string> val(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_val));
    for (const auto& id : train) (val.count(id) ? folds[f].validation : folds[f].train).push_back(id);
  }
  return folds;
}

}  // namespace lne::cohort
