#include "lne/graph.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>

namespace lne::graph {

Matrix NeighborhoodGraph::pooling_weights() const {
  // Evaluated with the row's largest exponent shifted to zero: identical to
  // A_ij / D_ii, but finite when every A_ij of the row underflows.
  const std::size_t n = size();
  Matrix w(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& nb = neighbors[i];
    if (nb.empty()) throw GraphError("node " + std::to_string(i) + " has no neighbours");
    if (sigma[i] < kDegenerateSigma) {
      for (std::size_t j : nb) w(i, j) = 1.0 / static_cast<double>(nb.size());
      continue;
    }
    const double two_s2 = 2.0 * sigma[i] * sigma[i];
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j : nb) top = std::max(top, -distances(i, j) * distances(i, j) / two_s2);
    double total = 0.0;
    for (std::size_t j : nb) {
      w(i, j) = std::exp(-distances(i, j) * distances(i, j) / two_s2 - top);
      total += w(i, j);
    }
    for (std::size_t j : nb) w(i, j) /= total;
  }
  return w;
}

Matrix apply_weights(const Matrix& weights, const Matrix& dz) {
  if (weights.rows != weights.cols || weights.cols != dz.rows) throw GraphError("apply_weights: shape mismatch");
  Matrix out(weights.rows, dz.cols);
  for (std::size_t i = 0; i < weights.rows; ++i) {
    for (std::size_t j = 0; j < weights.cols; ++j) {
      const double w = weights(i, j);
      if (w == 0.0) continue;
      for (std::size_t k = 0; k < dz.cols; ++k) out(i, k) += w * dz(j, k);
    }
  }
  return out;
}

template <typename T>
ad::Tensor<T> trajectory_vectors(ad::Tape<T>& tape, const ad::Tensor<T>& z_t, const ad::Tensor<T>& z_s,
                                 std::span<const T> delta_t) {
  for (T d : delta_t) {
    if (!(d > T(0))) throw GraphError("trajectory_vectors: every delta_t must be positive");
  }
  return ad::row_divide(tape, ad::sub(tape, z_s, z_t), delta_t);
}

template ad::Tensor<float> trajectory_vectors(ad::Tape<float>&, const ad::Tensor<float>&, const ad::Tensor<float>&,
                                              std::span<const float>);
template ad::Tensor<double> trajectory_vectors(ad::Tape<double>&, const ad::Tensor<double>&,
                                               const ad::Tensor<double>&, std::span<const double>);

Matrix trajectory_vectors(const Matrix& z_t, const Matrix& z_s, std::span<const double> delta_t) {
  if (z_t.rows != z_s.rows || z_t.cols != z_s.cols || delta_t.size() != z_t.rows) {
    throw GraphError("trajectory_vectors: shape mismatch");
  }
  Matrix dz(z_t.rows, z_t.cols);
  for (std::size_t i = 0; i < z_t.rows; ++i) {
    if (!(delta_t[i] > 0.0)) throw GraphError("trajectory_vectors: every delta_t must be positive");
    for (std::size_t j = 0; j < z_t.cols; ++j) dz(i, j) = (z_s(i, j) - z_t(i, j)) / delta_t[i];
  }
  return dz;
}

Matrix pairwise_distances(const Matrix& z_t) {
  const std::size_t n = z_t.rows;
  Matrix p(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < z_t.cols; ++k) {
        const double d = z_t(i, k) - z_t(j, k);
        acc += d * d;
      }
      p(i, j) = p(j, i) = std::sqrt(acc);
    }
  }
  return p;
}

std::vector<std::vector<std::size_t>> knn_neighbors(const Matrix& distances, std::size_t n_nb, bool* clamped) {
  const std::size_t n = distances.rows;
  if (n < 2) throw GraphError("knn_neighbors: need at least two nodes");
  if (n_nb == 0) throw GraphError("knn_neighbors: n_nb must be positive");
  bool was_clamped = false;
  if (n_nb > n - 1) {
    std::cerr << "warning: n_nb=" << n_nb << " exceeds batch size - 1; clamped to " << n - 1 << "\n";
    n_nb = n - 1;
    was_clamped = true;
  }
  if (clamped) *clamped = was_clamped;
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    order.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) order.push_back(j);
    }
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_nb), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double da = distances(i, a), db = distances(i, b);
                        return da < db || (da == db && a < b);
                      });
    out[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_nb));
  }
  return out;
}

AdjacencyResult adjacency(const Matrix& distances, const std::vector<std::vector<std::size_t>>& neighbors) {
  const std::size_t n = distances.rows;
  if (neighbors.size() != n) throw GraphError("adjacency: need one neighbour list per node");
  AdjacencyResult r{Matrix(n, n), std::vector<double>(n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto& nb = neighbors[i];
    if (nb.empty()) throw GraphError("adjacency: node " + std::to_string(i) + " has no neighbours");
    double lo = distances(i, nb.front()), hi = lo;
    for (std::size_t j : nb) {
      if (j == i || j >= n) throw GraphError("adjacency: invalid neighbour index");
      lo = std::min(lo, distances(i, j));
      hi = std::max(hi, distances(i, j));
    }
    const double sigma = hi - lo;
    r.sigma[i] = sigma;
    for (std::size_t j : nb) {
      if (sigma < kDegenerateSigma) {
        r.adjacency(i, j) = 1.0;
      } else {
        const double p = distances(i, j);
        r.adjacency(i, j) = std::exp(-(p * p) / (2.0 * sigma * sigma));
      }
    }
  }
  return r;
}

std::vector<double> out_degrees(const Matrix& adjacency) {
  std::vector<double> d(adjacency.rows, 0.0);
  for (std::size_t i = 0; i < adjacency.rows; ++i) {
    for (std::size_t j = 0; j < adjacency.cols; ++j) d[i] += adjacency(i, j);
  }
  return d;
}

Matrix pool_embedding(const Matrix& adjacency, const Matrix& dz) {
  const std::size_t n = adjacency.rows;
  if (dz.rows != n) throw GraphError("pool_embedding: dz must have one row per node");
  const auto degree = out_degrees(adjacency);
  Matrix dh(n, dz.cols);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(degree[i] > 0.0)) throw GraphError("pool_embedding: zero out-degree at node " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) {
      const double a = adjacency(i, j);
      if (a == 0.0) continue;
      const double w = a / degree[i];
      for (std::size_t k = 0; k < dz.cols; ++k) dh(i, k) += w * dz(j, k);
    }
  }
  return dh;
}

NeighborhoodGraph build_neighborhood(const Matrix& z_t, std::size_t n_nb) {
  if (z_t.rows < 2) throw GraphError("build_graph: batch size must be at least 2");
  NeighborhoodGraph g;
  g.distances = pairwise_distances(z_t);
  g.neighbors = knn_neighbors(g.distances, n_nb, &g.clamped);
  g.n_nb = g.neighbors.front().size();
  auto adj = adjacency(g.distances, g.neighbors);
  g.adjacency = std::move(adj.adjacency);
  g.sigma = std::move(adj.sigma);
  g.out_degree = out_degrees(g.adjacency);
  return g;
}

GraphResult build_graph(const LatentBatch& batch, std::size_t n_nb) {
  GraphResult r;
  r.dz = trajectory_vectors(batch.z_t, batch.z_s, batch.delta_t);
  r.graph = build_neighborhood(batch.z_t, n_nb);
  r.dh = apply_weights(r.graph.pooling_weights(), r.dz);
  return r;
}

void write_graph_dump(std::ostream& out, const NeighborhoodGraph& graph) {
  out << std::setprecision(17);
  out << "i,j,P_ij,A_ij\n";
  for (std::size_t i = 0; i < graph.size(); ++i) {
    for (std::size_t j : graph.neighbors[i]) {
      out << i << "," << j << "," << graph.distances(i, j) << "," << graph.adjacency(i, j) << "\n";
    }
  }
  for (std::size_t i = 0; i < graph.size(); ++i) {
    out << "node," << i << "," << graph.sigma[i] << "," << graph.out_degree[i] << "\n";
  }
}

}  // namespace lne::graph
