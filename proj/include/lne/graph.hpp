#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "lne/autodiff/ops.hpp"

namespace lne::graph {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major dense matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  template <typename T>
  static Matrix from_tensor(const ad::Tensor<T>& t) {
    if (t.rank() != 2) throw GraphError("expected a rank-2 tensor");
    Matrix m(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<double>(t.data()[i]);
    return m;
  }
};

inline constexpr double kDegenerateSigma = 1e-12;

struct LatentBatch {
  Matrix z_t;
  Matrix z_s;
  std::vector<double> delta_t;
};

/// Directed k-NN graph over the start points of one batch. P and A are
/// [N,N]; neighbors[i] lists N_i in ascending distance (ties by index).
struct NeighborhoodGraph {
  Matrix distances;
  std::vector<std::vector<std::size_t>> neighbors;
  Matrix adjacency;
  std::vector<double> out_degree;
  std::vector<double> sigma;
  std::size_t n_nb = 0;
  bool clamped = false;

  std::size_t size() const { return distances.rows; }
  /// D^{-1} A: nonnegative weights, each row summing to one. Stays defined
  /// when every A_ij of a row underflows to zero in double precision.
  Matrix pooling_weights() const;
};

struct GraphResult {
  NeighborhoodGraph graph;
  Matrix dz;
  Matrix dh;
};

/// Row-wise (z_s - z_t) / delta_t on the tape.
template <typename T>
ad::Tensor<T> trajectory_vectors(ad::Tape<T>& tape, const ad::Tensor<T>& z_t, const ad::Tensor<T>& z_s,
                                 std::span<const T> delta_t);

Matrix trajectory_vectors(const Matrix& z_t, const Matrix& z_s, std::span<const double> delta_t);

/// Euclidean distances between rows; symmetric with zero diagonal.
Matrix pairwise_distances(const Matrix& z_t);

/// The n_nb nearest j != i for every i, ties broken by smaller index.
/// n_nb > N-1 is clamped to N-1 with a warning.
std::vector<std::vector<std::size_t>> knn_neighbors(const Matrix& distances, std::size_t n_nb,
                                                    bool* clamped = nullptr);

struct AdjacencyResult {
  Matrix adjacency;
  std::vector<double> sigma;
};

/// A_ij = exp(-P_ij^2 / (2 sigma_i^2)) on the neighbour set, with
/// sigma_i = max - min of the neighbour distances. When sigma_i falls below
/// kDegenerateSigma every neighbour gets weight 1.
AdjacencyResult adjacency(const Matrix& distances, const std::vector<std::vector<std::size_t>>& neighbors);

std::vector<double> out_degrees(const Matrix& adjacency);

/// dh_i = sum_j (A_ij / D_ii) dz_j.
Matrix pool_embedding(const Matrix& adjacency, const Matrix& dz);

/// weights [N,N] times dz [N,d].
Matrix apply_weights(const Matrix& weights, const Matrix& dz);

GraphResult build_graph(const LatentBatch& batch, std::size_t n_nb);
/// Graph over start points only (topology and weights).
NeighborhoodGraph build_neighborhood(const Matrix& z_t, std::size_t n_nb);

/// Text dump: header line, then `i,j,P_ij,A_ij` per edge, then
/// `node,i,sigma_i,out_degree_i` per node.
void write_graph_dump(std::ostream& out, const NeighborhoodGraph& graph);

}  // namespace lne::graph
