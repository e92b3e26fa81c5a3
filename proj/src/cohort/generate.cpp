#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "lne/cohort.hpp"
#include "lne/seed.hpp"

namespace lne::cohort {

std::string to_string(Group g) {
  switch (g) {
    case Group::None: return "NONE";
    case Group::NC: return "NC";
    case Group::sMCI: return "sMCI";
    case Group::pMCI: return "pMCI";
    case Group::AD: return "AD";
  }
  return "NONE";
}

Group group_from_string(const std::string& s) {
  if (s == "NONE") return Group::None;
  if (s == "NC") return Group::NC;
  if (s == "sMCI") return Group::sMCI;
  if (s == "pMCI") return Group::pMCI;
  if (s == "AD") return Group::AD;
  throw CohortError("unknown group label: " + s);
}

void GeneratorConfig::validate(std::size_t divisor) const {
  if (min_visits < 2) throw CohortError("every subject needs at least two visits");
  if (max_visits < min_visits) throw CohortError("max_visits must be >= min_visits");
  if (!(age_max > age_min)) throw CohortError("age_max must exceed age_min");
  if (!(gap_min > 0.0) || gap_max < gap_min) throw CohortError("visit gaps must be positive with gap_max >= gap_min");
  if (gap_max * static_cast<double>(max_visits - 1) >= age_max - age_min) {
    throw CohortError("age range too narrow for the longest visit schedule");
  }
  if (image_size < 16 || image_size % divisor != 0) {
    throw CohortError("image size " + std::to_string(image_size) + " must be >= 16 and divisible by " +
                      std::to_string(divisor));
  }
  if (noise_level < 0.0 || nuisance_level < 0.0 || baseline_sd < 0.0) {
    throw CohortError("noise, nuisance and baseline spread must be nonnegative");
  }
  if (fast_fraction < 0.0 || fast_fraction > 1.0) throw CohortError("fast_fraction must lie in [0,1]");
  if (!(normal_speed_mean > 0.0) || !(fast_speed_mean > 0.0) || normal_speed_sd < 0.0 || fast_speed_sd < 0.0) {
    throw CohortError("aging-speed multipliers must be positive");
  }
}

const Subject& Cohort::subject(const std::string& id) const {
  auto it = std::lower_bound(subjects.begin(), subjects.end(), id,
                             [](const Subject& s, const std::string& key) { return s.id < key; });
  if (it == subjects.end() || it->id != id) throw CohortError("unknown subject " + id);
  return *it;
}

std::size_t Cohort::visit_count() const {
  std::size_t n = 0;
  for (const auto& s : subjects) n += s.visits.size();
  return n;
}

double brain_state(double baseline, double speed, double age, double age_min, double age_max) {
  const double u = (age - age_min) / (age_max - age_min);
  return baseline + speed * (u + u * u);
}

Image render_image(double state, std::size_t size, double noise_level, std::uint64_t seed, const Anatomy& anatomy) {
  if (size < 16) throw CohortError("render_image: size must be >= 16");
  const double half = static_cast<double>(size) / 2.0;
  const double cx = (static_cast<double>(size) - 1.0) / 2.0 + anatomy.center_dx;
  const double cy = (static_cast<double>(size) - 1.0) / 2.0 + anatomy.center_dy;
  const double outer = 0.8 * half * anatomy.head_scale;
  const double thickness = std::min(0.95, 0.15 + 0.35 * std::exp(-0.6 * state)) * outer;
  const double inner = outer - thickness;
  const double interior = 0.2 + 0.5 * std::exp(-0.6 * state);

  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> v(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double r = std::sqrt(dx * dx + dy * dy);
      const double in_outer = std::clamp(outer - r + 0.5, 0.0, 1.0);
      const double in_inner = std::clamp(inner - r + 0.5, 0.0, 1.0);
      double value = (in_outer - in_inner) + interior * in_inner;
      for (const auto& b : anatomy.blobs) {
        const double bx = static_cast<double>(x) - b.x, by = static_cast<double>(y) - b.y;
        value += b.amplitude * std::exp(-(bx * bx + by * by) / (2.0 * b.radius * b.radius));
      }
      if (noise_level > 0.0) value += noise_level * noise(rng);
      v[y * size + x] = value;
    }
  }
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double a : v) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  if (!(sd > 0.0)) throw CohortError("render_image: constant image cannot be z-scored");
  Image img{size, size, std::vector<float>(v.size())};
  for (std::size_t i = 0; i < v.size(); ++i) img.pixels[i] = static_cast<float>((v[i] - mean) / sd);
  return img;
}

Cohort generate_cohort(const GeneratorConfig& config) {
  config.validate();
  Cohort cohort;
  cohort.config = config;
  const double size = static_cast<double>(config.image_size);
  for (std::size_t i = 0; i < config.n_subjects; ++i) {
    Rng rng = make_rng(config.seed, "subject", i);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    Subject s;
    char id[16];
    std::snprintf(id, sizeof id, "S%05zu", i + 1);
    s.id = id;
    const bool fast = unit(rng) < config.fast_fraction;
    s.group = config.fast_fraction > 0.0 ? (fast ? Group::AD : Group::NC) : Group::None;
    const double mean = fast ? config.fast_speed_mean : config.normal_speed_mean;
    const double sd = fast ? config.fast_speed_sd : config.normal_speed_sd;
    s.speed = std::max(0.1, mean + sd * normal(rng));
    const double baseline = config.baseline_sd * normal(rng);

    std::uniform_int_distribution<std::size_t> nvis(config.min_visits, config.max_visits);
    const std::size_t visits = nvis(rng);
    std::uniform_real_distribution<double> gap(config.gap_min, config.gap_max);
    std::vector<double> ages(visits, 0.0);
    for (std::size_t j = 1; j < visits; ++j) ages[j] = ages[j - 1] + gap(rng);
    std::uniform_real_distribution<double> start(config.age_min, config.age_max - ages.back());
    const double first = start(rng);
    for (auto& a : ages) a += first;

    Anatomy anatomy;
    anatomy.head_scale = 0.9 + 0.2 * unit(rng);
    anatomy.center_dx = 2.0 * unit(rng) - 1.0;
    anatomy.center_dy = 2.0 * unit(rng) - 1.0;
    for (int b = 0; b < 3; ++b) {
      const double radius_frac = 0.5 * unit(rng);
      const double angle = 2.0 * M_PI * unit(rng);
      const double rr = radius_frac * 0.8 * size / 2.0;
      anatomy.blobs.push_back({(size - 1.0) / 2.0 + rr * std::cos(angle), (size - 1.0) / 2.0 + rr * std::sin(angle),
                               size * (0.08 + 0.1 * unit(rng)), config.nuisance_level * (2.0 * unit(rng) - 1.0)});
    }

    for (std::size_t j = 0; j < visits; ++j) {
      const double state = brain_state(baseline, s.speed, ages[j], config.age_min, config.age_max);
      s.visits.push_back({ages[j], render_image(state, config.image_size, config.noise_level,
                                                derive_seed(config.seed, "noise", i * 64 + j), anatomy)});
    }
    cohort.subjects.push_back(std::move(s));
  }
  std::sort(cohort.subjects.begin(), cohort.subjects.end(),
            [](const Subject& a, const Subject& b) { return a.id < b.id; });
  return cohort;
}

CohortSummary summarize(const Cohort& cohort) {
  CohortSummary s;
  s.subjects = cohort.subjects.size();
  double gap_sum = 0.0, pair_sum = 0.0;
  std::size_t gaps = 0;
  for (const auto& sub : cohort.subjects) {
    const auto v = sub.visits.size();
    s.visits += v;
    for (std::size_t j = 1; j < v; ++j) {
      gap_sum += sub.visits[j].age - sub.visits[j - 1].age;
      ++gaps;
    }
    for (std::size_t a = 0; a < v; ++a) {
      for (std::size_t b = a + 1; b < v; ++b) {
        pair_sum += sub.visits[b].age - sub.visits[a].age;
        ++s.pairs;
      }
    }
  }
  if (s.subjects) s.mean_visits = static_cast<double>(s.visits) / static_cast<double>(s.subjects);
  if (gaps) s.mean_interval = gap_sum / static_cast<double>(gaps);
  if (s.pairs) s.mean_pair_interval = pair_sum / static_cast<double>(s.pairs);
  return s;
}

}  // namespace lne::cohort
