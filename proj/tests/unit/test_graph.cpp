#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lne/graph.hpp"
#include "test_support.hpp"

using namespace lne;
using graph::Matrix;

namespace {

// Brute-force reference: sort (distance, index) per row, take the first
// n_nb, weight with the Gaussian kernel and normalize. Computed in long
// double so it is independent of the library's arithmetic.
struct Oracle {
  std::vector<std::vector<std::size_t>> neighbors;
  std::vector<std::vector<long double>> weights;  // row-normalized, [N,N]
};

Oracle oracle(const Matrix& z, std::size_t n_nb) {
  const std::size_t n = z.rows;
  Oracle o;
  o.weights.assign(n, std::vector<long double>(n, 0.0L));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<long double, std::size_t>> cand;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      long double s = 0;
      for (std::size_t k = 0; k < z.cols; ++k) s += std::pow((long double)z(i, k) - z(j, k), 2);
      cand.push_back({std::sqrt(s), j});
    }
    std::sort(cand.begin(), cand.end());
    cand.resize(std::min(n_nb, n - 1));
    std::vector<std::size_t> nb;
    for (auto& c : cand) nb.push_back(c.second);
    o.neighbors.push_back(nb);
    const long double sigma = cand.back().first - cand.front().first;
    long double total = 0;
    // Factor exp(-P_min^2/2s^2) out of every weight so no row underflows.
    for (auto& [p, j] : cand) {
      const long double w =
          sigma < 1e-12L ? 1.0L : std::exp(-(p * p - cand.front().first * cand.front().first) / (2 * sigma * sigma));
      o.weights[i][j] = w;
      total += w;
    }
    for (auto& w : o.weights[i]) w /= total;
  }
  return o;
}

Matrix transform(const Matrix& z, const std::function<void(std::span<const double>, std::span<double>)>& f) {
  Matrix out(z.rows, z.cols);
  for (std::size_t i = 0; i < z.rows; ++i) f(z.row(i), {out.data.data() + i * z.cols, z.cols});
  return out;
}

// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
std::vector<std::vector<double>> random_rotation(Rng& rng, std::size_t d) {
  std::normal_distribution<double> dist;
  std::vector<std::vector<double>> q;
  while (q.size() < d) {
    std::vector<double> v(d);
    for (auto& x : v) x = dist(rng);
    for (const auto& u : q) {
      const double dot = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
      for (std::size_t k = 0; k < d; ++k) v[k] -= dot * u[k];
    }
    const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    for (auto& x : v) x /= n;
    q.push_back(v);
  }
  return q;
}

}  // namespace

TEST_CASE("trajectory vectors") {
  const auto z_t = test::rows_matrix({{0, 0}, {1, 1}});
  const auto z_s = test::rows_matrix({{2, 4}, {1, 1}});
  std::vector<double> dt{2.0, 3.0};
  const auto dz = graph::trajectory_vectors(z_t, z_s, dt);
  CHECK(dz(0, 0) == 1.0);
  CHECK(dz(0, 1) == 2.0);
  CHECK(dz(1, 0) == 0.0);
  CHECK(dz(1, 1) == 0.0);
  std::vector<double> dt2{4.0, 6.0};
  const auto half = graph::trajectory_vectors(z_t, z_s, dt2);
  for (std::size_t i = 0; i < dz.data.size(); ++i) CHECK(half.data[i] == dz.data[i] / 2);
  std::vector<double> bad{1.0, 0.0};
  CHECK_THROWS_AS(graph::trajectory_vectors(z_t, z_s, bad), graph::GraphError);

  SUBCASE("tape version matches and is differentiable") {
    ad::Tape<double> tape;
    ad::TensorD a({2, 2}, {0, 0, 1, 1}, true), b({2, 2}, {2, 4, 1, 1}, true);
    auto t = graph::trajectory_vectors<double>(tape, a, b, dt);
    for (std::size_t i = 0; i < 4; ++i) CHECK(t[i] == dz.data[i]);
    tape.backward(ad::sum(tape, t));
    CHECK(b.grad()[0] == doctest::Approx(0.5));
    CHECK(a.grad()[2] == doctest::Approx(-1.0 / 3.0));
  }
}

TEST_CASE("pairwise distances") {
  const auto p = graph::pairwise_distances(test::rows_matrix({{0, 0}, {3, 4}}));
  CHECK(p(0, 1) == 5.0);
  CHECK(p(1, 0) == 5.0);
  CHECK(p(0, 0) == 0.0);
  const auto same = graph::pairwise_distances(test::rows_matrix({{1, 2}, {1, 2}, {1, 2}}));
  for (double v : same.data) CHECK(v == 0.0);
  CHECK_THROWS_AS(graph::knn_neighbors(graph::pairwise_distances(test::rows_matrix({{1, 2}})), 1), graph::GraphError);
  Rng rng(1);
  const auto z = test::random_matrix(rng, 6, 3);
  const auto shifted = transform(z, [](auto in, auto out) {
    for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] + 10.0 * (k + 1);
  });
  const auto p1 = graph::pairwise_distances(z), p2 = graph::pairwise_distances(shifted);
  for (std::size_t i = 0; i < p1.data.size(); ++i) CHECK(p2.data[i] == doctest::Approx(p1.data[i]).epsilon(1e-12));
}

TEST_CASE("knn neighbours") {
  const auto z = test::rows_matrix({{0}, {1}, {3}});
  const auto nb = graph::knn_neighbors(graph::pairwise_distances(z), 1);
  CHECK(nb[0] == std::vector<std::size_t>{1});
  CHECK(nb[1] == std::vector<std::size_t>{0});
  CHECK(nb[2] == std::vector<std::size_t>{1});
  const auto all = graph::knn_neighbors(graph::pairwise_distances(z), 2);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(all[i].size() == 2);
    CHECK(std::find(all[i].begin(), all[i].end(), i) == all[i].end());
  }
  SUBCASE("ties go to the lower index") {
    const auto tie = graph::knn_neighbors(graph::pairwise_distances(test::rows_matrix({{0}, {-1}, {1}})), 1);
    CHECK(tie[0] == std::vector<std::size_t>{1});
  }
  SUBCASE("clamped with a warning flag") {
    bool clamped = false;
    const auto c = graph::knn_neighbors(graph::pairwise_distances(z), 5, &clamped);
    CHECK(clamped);
    CHECK(c[0].size() == 2);
  }
}

TEST_CASE("adjacency worked example") {
  const auto p = graph::pairwise_distances(test::rows_matrix({{0}, {1}, {3}}));
  const auto nb = graph::knn_neighbors(p, 2);
  const auto a = graph::adjacency(p, nb);
  CHECK(a.sigma[0] == 2.0);
  CHECK(a.adjacency(0, 1) == doctest::Approx(0.8824969025845955).epsilon(1e-12));
  CHECK(a.adjacency(0, 2) == doctest::Approx(0.32465246735834974).epsilon(1e-12));
  CHECK(a.adjacency(0, 0) == 0.0);
  SUBCASE("degenerate bandwidth") {
    const auto nb1 = graph::knn_neighbors(p, 1);
    const auto a1 = graph::adjacency(p, nb1);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a1.sigma[i] == 0.0);
      CHECK(a1.adjacency(i, nb1[i][0]) == 1.0);
    }
  }
  SUBCASE("pooled embedding") {
    const auto dz = test::rows_matrix({{0, 0}, {1, 0}, {0, 1}});
    const auto dh = graph::pool_embedding(a.adjacency, dz);
    CHECK(dh(0, 0) == doctest::Approx(0.7310).epsilon(1e-4));
    CHECK(dh(0, 1) == doctest::Approx(0.2690).epsilon(1e-4));
    const double w1 = std::exp(-1.0 / 8), w2 = std::exp(-9.0 / 8);
    CHECK(std::abs(dh(0, 0) - w1 / (w1 + w2)) < 1e-12);
  }
}

TEST_CASE("pooling") {
  SUBCASE("identical neighbour trajectories") {
    Rng rng(2);
    const auto z = test::random_matrix(rng, 5, 3);
    Matrix dz(5, 2);
    for (std::size_t i = 0; i < 5; ++i) {
      dz(i, 0) = 0.3;
      dz(i, 1) = -1.2;
    }
    const auto g = graph::build_neighborhood(z, 3);
    const auto dh = graph::apply_weights(g.pooling_weights(), dz);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(dh(i, 0) == doctest::Approx(0.3));
      CHECK(dh(i, 1) == doctest::Approx(-1.2));
    }
  }
  SUBCASE("zero out-degree is rejected") {
    CHECK_THROWS_AS(graph::pool_embedding(Matrix(2, 2, 0.0), Matrix(2, 1, 1.0)), graph::GraphError);
  }
  SUBCASE("two nodes swap trajectories") {
    const auto z_t = test::rows_matrix({{0, 0}, {1, 0}});
    const auto z_s = test::rows_matrix({{1, 2}, {1, 3}});
    const auto r = graph::build_graph({z_t, z_s, {1.0, 2.0}}, 1);
    CHECK(r.dh(0, 0) == r.dz(1, 0));
    CHECK(r.dh(0, 1) == r.dz(1, 1));
    CHECK(r.dh(1, 0) == r.dz(0, 0));
    CHECK(r.dh(1, 1) == r.dz(0, 1));
  }
  SUBCASE("equal distances give the arithmetic mean") {
    const auto z = test::rows_matrix({{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1}});
    const auto g = graph::build_neighborhood(z, 4);
    Rng rng(3);
    const auto dz = test::random_matrix(rng, 5, 2);
    const auto dh = graph::apply_weights(g.pooling_weights(), dz);
    for (std::size_t k = 0; k < 2; ++k) {
      const double mean = (dz(1, k) + dz(2, k) + dz(3, k) + dz(4, k)) / 4;
      CHECK(dh(0, k) == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("stable weights where the literal kernel underflows") {
    // P/sigma ~ 1e3: exp(-P^2/2s^2) is exactly zero in double precision.
    const auto z = test::rows_matrix({{0}, {1000}, {1001}, {5000}});
    const auto g = graph::build_neighborhood(z, 2);
    CHECK(g.out_degree[0] == 0.0);
    const auto w = g.pooling_weights();
    const auto o = oracle(z, 2);
    for (std::size_t i = 0; i < 4; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        row += w(i, j);
        CHECK(std::abs(w(i, j) - (double)o.weights[i][j]) < 1e-9);
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("random graphs agree with the brute-force oracle") {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(1000 + s);
    std::uniform_int_distribution<std::size_t> nd(2, 12), kd(1, 6), dd(1, 5);
    const std::size_t n = nd(rng), k = kd(rng), d = dd(rng);
    const auto z = test::random_matrix(rng, n, d);
    const auto dz = test::random_matrix(rng, n, d);
    const auto g = graph::build_neighborhood(z, k);
    const auto o = oracle(z, k);
    const auto w = g.pooling_weights();
    const auto dh = graph::apply_weights(w, dz);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(g.neighbors[i] == o.neighbors[i]);
      std::size_t nonzero = 0;
      double row = 0;
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(std::abs(w(i, j) - (double)o.weights[i][j]) < 1e-9);
        CHECK(w(i, j) >= 0.0);
        row += w(i, j);
        nonzero += g.adjacency(i, j) > 0.0;
        CHECK(g.distances(i, j) == g.distances(j, i));
      }
      CHECK(g.distances(i, i) == 0.0);
      CHECK(std::abs(row - 1.0) < 1e-6);
      CHECK(nonzero <= std::min(k, n - 1));
      // Convex hull bound per coordinate.
      for (std::size_t c = 0; c < d; ++c) {
        double lo = INFINITY, hi = -INFINITY;
        for (auto j : g.neighbors[i]) {
          lo = std::min(lo, dz(j, c));
          hi = std::max(hi, dz(j, c));
        }
        CHECK(dh(i, c) >= lo - 1e-12);
        CHECK(dh(i, c) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("graph invariances on 100 random instances") {
  std::size_t checked = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(5000 + s);
    const std::size_t n = 8, d = 4, k = 3;
    const auto z = test::random_matrix(rng, n, d);
    const auto dz = test::random_matrix(rng, n, d);
    const auto base = graph::build_neighborhood(z, k);
    const auto w0 = base.pooling_weights();
    const auto compare = [&](const graph::NeighborhoodGraph& g) {
      REQUIRE(g.neighbors == base.neighbors);
      const auto w = g.pooling_weights();
      for (std::size_t i = 0; i < w.data.size(); ++i) CHECK(std::abs(w.data[i] - w0.data[i]) < 1e-9);
      for (std::size_t i = 0; i < w.data.size(); ++i) CHECK(std::abs(g.adjacency.data[i] - base.adjacency.data[i]) < 1e-9);
    };
    const auto shift = test::uniform_values(rng, d, -5, 5);
    compare(graph::build_neighborhood(transform(z, [&](auto in, auto out) {
                                        for (std::size_t c = 0; c < d; ++c) out[c] = in[c] + shift[c];
                                      }),
                                      k));
    const auto q = random_rotation(rng, d);
    compare(graph::build_neighborhood(transform(z, [&](auto in, auto out) {
                                        for (std::size_t r = 0; r < d; ++r)
                                          out[r] = std::inner_product(q[r].begin(), q[r].end(), in.begin(), 0.0);
                                      }),
                                      k));
    const double c = std::uniform_real_distribution<double>(0.1, 10.0)(rng);
    compare(graph::build_neighborhood(transform(z, [&](auto in, auto out) {
                                        for (std::size_t r = 0; r < d; ++r) out[r] = c * in[r];
                                      }),
                                      k));
    // Batch permutation: relabelled graph, permuted dh.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix zp(n, d), dzp(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c2 = 0; c2 < d; ++c2) {
        zp(i, c2) = z(perm[i], c2);
        dzp(i, c2) = dz(perm[i], c2);
      }
    const auto gp = graph::build_neighborhood(zp, k);
    const auto dh = graph::apply_weights(w0, dz), dhp = graph::apply_weights(gp.pooling_weights(), dzp);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c2 = 0; c2 < d; ++c2) CHECK(std::abs(dhp(i, c2) - dh(perm[i], c2)) < 1e-12);
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("graph dump") {
  const auto g = graph::build_neighborhood(test::rows_matrix({{0}, {1}, {3}}), 2);
  std::ostringstream out;
  graph::write_graph_dump(out, g);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "i,j,P_ij,A_ij");
  std::size_t edges = 0, nodes = 0;
  while (std::getline(in, line)) (line.rfind("node,", 0) == 0 ? nodes : edges)++;
  CHECK(edges == 6);
  CHECK(nodes == 3);
}
