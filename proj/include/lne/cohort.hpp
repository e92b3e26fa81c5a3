#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace lne::cohort {

class CohortError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset directory problems: malformed manifest, payload corruption,
/// missing image files, unsupported versions.
class DatasetIoError : public CohortError {
 public:
  enum class Kind { Malformed, Corrupt, MissingFile, Version, Io };
  DatasetIoError(Kind kind, const std::string& message) : CohortError(message), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

enum class Group { None, NC, sMCI, pMCI, AD };

std::string to_string(Group g);
Group group_from_string(const std::string& s);

/// Row-major single-channel image.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool operator==(const Image&) const = default;
};

struct Visit {
  double age = 0.0;
  Image image;
  bool operator==(const Visit&) const = default;
};

struct Subject {
  std::string id;
  Group group = Group::None;
  // Ground-truth aging-speed multiplier; evaluation only.
  double speed = 1.0;
  std::vector<Visit> visits;  // strictly increasing age
  bool operator==(const Subject&) const = default;
};

struct GeneratorConfig {
  std::size_t n_subjects = 200;
  std::size_t min_visits = 2;
  std::size_t max_visits = 4;
  double age_min = 20.0;
  double age_max = 90.0;
  // Gap between consecutive visits ~ U(gap_min, gap_max); mean 3.8 years.
  double gap_min = 1.0;
  double gap_max = 6.6;
  std::size_t image_size = 32;
  double noise_level = 0.1;
  // Fraction of subjects in the fast-aging group, labelled AD; the rest NC.
  // Zero yields an unlabelled healthy cohort (Group::None).
  double fast_fraction = 0.3;
  double normal_speed_mean = 1.0;
  double normal_speed_sd = 0.15;
  double fast_speed_mean = 2.0;
  double fast_speed_sd = 0.2;
  // Subject-level spread of baseline brain state.
  double baseline_sd = 0.3;
  // Amplitude of subject-specific static texture (anatomical nuisance).
  double nuisance_level = 0.4;
  std::uint64_t seed = 0;

  void validate(std::size_t divisor = 16) const;
  bool operator==(const GeneratorConfig&) const = default;
};

struct Cohort {
  GeneratorConfig config;
  std::vector<Subject> subjects;  // sorted by id

  const Subject& subject(const std::string& id) const;
  std::size_t visit_count() const;
  bool operator==(const Cohort&) const = default;
};

/// Static per-subject appearance that does not change with age.
struct Anatomy {
  double head_scale = 1.0;
  double center_dx = 0.0;
  double center_dy = 0.0;
  struct Blob {
    double x, y, radius, amplitude;
  };
  std::vector<Blob> blobs;
};

/// Brain state trajectory: baseline + speed * g(age), g(a) = u + u^2 with
/// u = (a - age_min) / (age_max - age_min).
double brain_state(double baseline, double speed, double age, double age_min, double age_max);

/// Renders a z-scored image whose ring thickness and interior intensity
/// shrink as brain_state grows, with additive Gaussian noise.
Image render_image(double brain_state, std::size_t size, double noise_level, std::uint64_t seed,
                   const Anatomy& anatomy = {});

Cohort generate_cohort(const GeneratorConfig& config);

struct ImagePair {
  Image x_t;
  Image x_s;
  double delta_t = 0.0;
  std::string subject_id;
  double age_t = 0.0;
  double age_s = 0.0;
  std::size_t t_index = 0;
  std::size_t s_index = 0;
  // Evaluation-only labels.
  Group group = Group::None;
  double speed = 1.0;
};

struct PairStats {
  std::size_t skipped_subjects = 0;
};

/// Every ordered same-subject pair (t < s).
std::vector<ImagePair> build_pairs(const Cohort& cohort, PairStats* stats = nullptr);
std::vector<ImagePair> build_pairs(const Cohort& cohort, const std::vector<std::string>& subject_ids);

struct AugmentParams {
  bool flip = false;
  double angle_deg = 0.0;
  int shift_x = 0;
  int shift_y = 0;

  bool is_identity() const { return !flip && angle_deg == 0.0 && shift_x == 0 && shift_y == 0; }
  bool operator==(const AugmentParams&) const = default;
};

inline constexpr double kMaxRotationDeg = 10.0;
inline constexpr int kMaxShift = 2;

AugmentParams sample_augment(std::uint64_t seed);
/// Flip, then rotate about the centre (bilinear, zero fill), then shift.
Image apply_augment(const Image& image, const AugmentParams& params);
Image flip_horizontal(const Image& image);
/// Applies one sampled transform to both images of the pair.
ImagePair augment_pair(const ImagePair& pair, std::uint64_t seed, AugmentParams* sampled = nullptr);
ImagePair augment_pair(const ImagePair& pair, const AugmentParams& params);

struct Fold {
  std::vector<std::string> test;
  std::vector<std::string> train;
  std::vector<std::string> validation;  // carved from the training side
};

std::vector<Fold> split_folds(const Cohort& cohort, std::size_t k, std::uint64_t seed,
                              double validation_fraction = 0.1);

// Dataset directory: manifest.json + images/<subject>_<visit>.f32 (raw
// little-endian float32, row-major).
inline constexpr int kDatasetVersion = 1;
void save_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort load_cohort(const std::filesystem::path& dir);

struct CohortSummary {
  std::size_t subjects = 0;
  std::size_t visits = 0;
  std::size_t pairs = 0;
  double mean_visits = 0.0;
  double mean_interval = 0.0;  // consecutive-visit gap
  double mean_pair_interval = 0.0;
};

CohortSummary summarize(const Cohort& cohort);

}  // namespace lne::cohort
