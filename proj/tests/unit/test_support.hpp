#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "lne/autodiff/tensor.hpp"
#include "lne/graph.hpp"
#include "lne/seed.hpp"

namespace lne::test {

inline ad::TensorD normal_tensor(Rng& rng, ad::Shape shape, bool requires_grad = true, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<double> v(ad::shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return ad::TensorD(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> uniform_values(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline graph::Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  graph::Matrix m(rows, cols);
  for (auto& x : m.data) x = dist(rng);
  return m;
}

inline graph::Matrix rows_matrix(const std::vector<std::vector<double>>& rows) {
  graph::Matrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("lne_test_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace lne::test
