#include "doctest.h"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "lne/cohort.hpp"
#include "test_support.hpp"

using namespace lne;
using namespace lne::cohort;

namespace {

GeneratorConfig small_config(std::uint64_t seed, std::size_t n = 12) {
  GeneratorConfig c;
  c.n_subjects = n;
  c.image_size = 16;
  c.seed = seed;
  return c;
}

// Pixels at the ring's full intensity (the image maximum) in a noise-free render.
std::size_t ring_pixels(const Image& img) {
  const float top = *std::max_element(img.pixels.begin(), img.pixels.end());
  return std::count_if(img.pixels.begin(), img.pixels.end(), [&](float v) { return v > top - 1e-4f; });
}

std::uint64_t checksum(const Cohort& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& s : c.subjects)
    for (const auto& v : s.visits)
      for (float p : v.image.pixels) {
        std::uint32_t bits;
        std::memcpy(&bits, &p, 4);
        h = (h ^ bits) * 1099511628211ULL;
      }
  return h;
}

Subject subject_with_ages(const std::string& id, std::vector<double> ages) {
  Subject s;
  s.id = id;
  for (double a : ages) s.visits.push_back({a, render_image(a / 50.0, 16, 0.0, 1)});
  return s;
}

}  // namespace

TEST_CASE("render_image") {
  const auto a = render_image(0.7, 32, 0.0, 1), b = render_image(0.7, 32, 0.0, 99);
  CHECK(a == b);
  const auto noisy = render_image(0.3, 32, 0.2, 5);
  double mean = 0, var = 0;
  for (float p : noisy.pixels) mean += p;
  mean /= noisy.pixels.size();
  for (float p : noisy.pixels) var += (p - mean) * (p - mean);
  const double sd = std::sqrt(var / noisy.pixels.size());
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(sd - 1.0) < 1e-6);
  const auto t0 = ring_pixels(render_image(0.0, 32, 0.0, 0));
  const auto t1 = ring_pixels(render_image(0.5, 32, 0.0, 0));
  const auto t2 = ring_pixels(render_image(1.0, 32, 0.0, 0));
  CHECK(t0 > t1);
  CHECK(t1 > t2);
  CHECK_THROWS_AS(render_image(0.0, 8, 0.0, 0), CohortError);
}

TEST_CASE("generate_cohort") {
  CHECK(generate_cohort(small_config(0, 0)).subjects.empty());
  const auto a = generate_cohort(small_config(3)), b = generate_cohort(small_config(3));
  CHECK(a == b);
  CHECK(checksum(generate_cohort(small_config(4))) != checksum(a));
  for (const auto& s : a.subjects) {
    CHECK(s.visits.size() >= 2);
    CHECK(s.speed > 0.0);
    for (std::size_t v = 1; v < s.visits.size(); ++v) CHECK(s.visits[v].age > s.visits[v - 1].age);
    for (const auto& v : s.visits) {
      CHECK(v.age >= a.config.age_min);
      CHECK(v.age <= a.config.age_max);
    }
  }
  SUBCASE("image size must suit four pooling stages") {
    auto c = small_config(0);
    c.image_size = 20;
    CHECK_THROWS(generate_cohort(c));
  }
  SUBCASE("default cohort visit interval near 3.8 years") {
    GeneratorConfig c;
    const auto s = summarize(generate_cohort(c));
    CHECK(s.subjects == 200);
    CHECK(s.mean_interval > 0.8 * 3.8);
    CHECK(s.mean_interval < 1.2 * 3.8);
  }
  SUBCASE("noise-free renders are monotone along each subject") {
    auto c = small_config(8, 6);
    c.noise_level = 0.0;
    c.nuisance_level = 0.0;
    const auto cohort = generate_cohort(c);
    for (const auto& s : cohort.subjects)
      for (std::size_t v = 1; v < s.visits.size(); ++v)
        CHECK(ring_pixels(s.visits[v].image) <= ring_pixels(s.visits[v - 1].image));
  }
}

TEST_CASE("build_pairs") {
  Cohort c;
  c.subjects.push_back(subject_with_ages("A", {70, 72, 75}));
  c.subjects.push_back(subject_with_ages("B", {60, 61}));
  const auto pairs = build_pairs(c);
  REQUIRE(pairs.size() == 4);
  std::vector<double> dts;
  for (const auto& p : pairs)
    if (p.subject_id == "A") dts.push_back(p.delta_t);
  std::sort(dts.begin(), dts.end());
  CHECK(dts == std::vector<double>{2, 3, 5});
  SUBCASE("single-visit subjects are skipped") {
    c.subjects.push_back(subject_with_ages("C", {50}));
    PairStats stats;
    CHECK(build_pairs(c, &stats).size() == 4);
    CHECK(stats.skipped_subjects == 1);
  }
  SUBCASE("pair count law and provenance on generated cohorts") {
    const auto g = generate_cohort(small_config(5, 30));
    const auto ps = build_pairs(g);
    std::size_t expected = 0;
    for (const auto& s : g.subjects) expected += s.visits.size() * (s.visits.size() - 1) / 2;
    CHECK(ps.size() == expected);
    CHECK(ps.size() >= g.subjects.size());
    for (const auto& p : ps) {
      CHECK(p.delta_t > 0.0);
      const auto& s = g.subject(p.subject_id);
      CHECK(p.x_t == s.visits[p.t_index].image);
      CHECK(p.x_s == s.visits[p.s_index].image);
      CHECK(p.t_index < p.s_index);
    }
  }
}

TEST_CASE("augmentation") {
  Cohort c;
  c.subjects.push_back(subject_with_ages("A", {40, 60}));
  const auto pair = build_pairs(c).front();
  const auto same = augment_pair(pair, AugmentParams{});
  CHECK(same.x_t == pair.x_t);
  CHECK(same.x_s == pair.x_s);
  CHECK(flip_horizontal(flip_horizontal(pair.x_t)) == pair.x_t);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    AugmentParams sampled;
    const auto out = augment_pair(pair, seed, &sampled);
    CHECK(sampled == sample_augment(seed));
    CHECK(out.x_t == apply_augment(pair.x_t, sampled));
    CHECK(out.x_s == apply_augment(pair.x_s, sampled));
    CHECK(std::abs(sampled.angle_deg) <= kMaxRotationDeg);
    CHECK(std::abs(sampled.shift_x) <= kMaxShift);
    CHECK(std::abs(sampled.shift_y) <= kMaxShift);
  }
  SUBCASE("integer shift moves pixels and zero-fills") {
    AugmentParams p;
    p.shift_x = 1;
    const auto shifted = apply_augment(pair.x_t, p);
    for (std::size_t y = 0; y < 16; ++y) {
      CHECK(shifted.at(y, 0) == 0.0f);
      for (std::size_t x = 1; x < 16; ++x) CHECK(shifted.at(y, x) == pair.x_t.at(y, x - 1));
    }
  }
}

TEST_CASE("split_folds") {
  const auto ten = generate_cohort(small_config(1, 10));
  const auto folds = split_folds(ten, 5, 0);
  for (const auto& f : folds) CHECK(f.test.size() == 2);
  CHECK_THROWS(split_folds(ten, 11, 0));
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Cohort c;
    const std::size_t n = 10 + seed % 17;
    for (std::size_t i = 0; i < n; ++i) {
      Subject s;
      s.id = "S" + std::to_string(100 + i);
      c.subjects.push_back(s);
    }
    const auto fs = split_folds(c, 5, seed);
    std::multiset<std::string> seen;
    std::size_t lo = n, hi = 0;
    for (const auto& f : fs) {
      seen.insert(f.test.begin(), f.test.end());
      lo = std::min(lo, f.test.size());
      hi = std::max(hi, f.test.size());
      std::set<std::string> test(f.test.begin(), f.test.end());
      std::set<std::string> train(f.train.begin(), f.train.end());
      for (const auto& v : f.validation) {
        CHECK(test.count(v) == 0);
        CHECK(train.count(v) == 0);
      }
      for (const auto& t : f.train) CHECK(test.count(t) == 0);
      CHECK(f.test.size() + f.train.size() + f.validation.size() == n);
    }
    CHECK(seen.size() == n);
    CHECK(std::set<std::string>(seen.begin(), seen.end()).size() == n);
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("dataset round trip and corruption") {
  const auto cohort = generate_cohort(small_config(2, 5));
  test::TempDir dir("cohort");
  save_cohort(cohort, dir.path());
  CHECK(load_cohort(dir.path()) == cohort);

  SUBCASE("truncated image") {
    const auto f = dir.path() / "images" / (cohort.subjects[0].id + "_0.f32");
    REQUIRE(std::filesystem::exists(f));
    std::filesystem::resize_file(f, std::filesystem::file_size(f) - 4);
    try {
      load_cohort(dir.path());
      FAIL("expected a corruption error");
    } catch (const DatasetIoError& e) {
      CHECK(e.kind() == DatasetIoError::Kind::Corrupt);
    }
  }
  SUBCASE("missing image") {
    std::filesystem::remove(dir.path() / "images" / (cohort.subjects[1].id + "_1.f32"));
    try {
      load_cohort(dir.path());
      FAIL("expected a missing-file error");
    } catch (const DatasetIoError& e) {
      CHECK(e.kind() == DatasetIoError::Kind::MissingFile);
    }
  }
  SUBCASE("version mismatch and malformed manifest") {
    const auto m = dir.path() / "manifest.json";
    std::ifstream in(m);
    std::string text((std::istreambuf_iterator<char>(in)), {});
    in.close();
    auto pos = text.find("\"version\"");
    REQUIRE(pos != std::string::npos);
    const auto colon = text.find(':', pos);
    const auto end = text.find_first_of(",}\n", colon);
    std::ofstream(m) << text.substr(0, colon + 1) << " 99" << text.substr(end);
    try {
      load_cohort(dir.path());
      FAIL("expected a version error");
    } catch (const DatasetIoError& e) {
      CHECK(e.kind() == DatasetIoError::Kind::Version);
    }
    std::ofstream(m) << "{ not json";
    try {
      load_cohort(dir.path());
      FAIL("expected a malformed error");
    } catch (const DatasetIoError& e) {
      CHECK(e.kind() == DatasetIoError::Kind::Malformed);
    }
  }
}
