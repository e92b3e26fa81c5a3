#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "lne/evalviz.hpp"
#include "lne/seed.hpp"

namespace lne::evalviz {

std::array<double, 2> Pca2::project(std::span<const double> point) const {
  if (point.size() != mean.size()) throw EvalError("projected point has the wrong dimension");
  std::array<double, 2> p{0.0, 0.0};
  for (int c = 0; c < 2; ++c) {
    for (std::size_t j = 0; j < point.size(); ++j) p[c] += (point[j] - mean[j]) * components[c][j];
  }
  return p;
}

namespace {

using Vec = std::vector<double>;

Vec mat_vec(const Matrix& m, const Vec& v) {
  Vec out(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) out[i] += m(i, j) * v[j];
  }
  return out;
}

double norm(const Vec& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

/// Dominant eigenpair of a symmetric PSD matrix.
std::pair<double, Vec> power_iteration(const Matrix& c, std::uint64_t seed) {
  Rng rng = make_rng(seed, "pca");
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec v(c.rows);
  for (auto& x : v) x = normal(rng);
  double n = norm(v);
  for (auto& x : v) x /= n;
  for (std::size_t it = 0; it < kPcaMaxIterations; ++it) {
    Vec w = mat_vec(c, v);
    n = norm(w);
    if (n == 0.0) return {0.0, v};
    for (auto& x : w) x /= n;
    double diff = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) diff = std::max(diff, std::abs(w[i] - v[i]));
    v = std::move(w);
    if (diff < kPcaTolerance) break;
  }
  const Vec cv = mat_vec(c, v);
  double lambda = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) lambda += v[i] * cv[i];
  return {lambda, v};
}

void fix_sign(Vec& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (v[best] < 0.0) {
    for (auto& x : v) x = -x;
  }
}

}  // namespace

Pca2 pca_2d(const Matrix& points) {
  const std::size_t m = points.rows, d = points.cols;
  if (m < 3 || d < 2) throw EvalError("pca_2d needs at least 3 points of dimension >= 2");
  Pca2 pca;
  pca.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d; ++j) pca.mean[j] += points(i, j);
  }
  for (auto& x : pca.mean) x /= static_cast<double>(m);
  Matrix cov(d, d);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      const double da = points(i, a) - pca.mean[a];
      for (std::size_t b = a; b < d; ++b) cov(a, b) += da * (points(i, b) - pca.mean[b]);
    }
  }
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) /= static_cast<double>(m - 1);
      cov(b, a) = cov(a, b);
    }
  }
  for (int c = 0; c < 2; ++c) {
    auto [lambda, v] = power_iteration(cov, static_cast<std::uint64_t>(c));
    fix_sign(v);
    pca.eigenvalues[c] = lambda;
    pca.components[c] = v;
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) cov(a, b) -= lambda * v[a] * v[b];
    }
  }
  if (!(pca.eigenvalues[0] > 0.0) || !(pca.eigenvalues[1] > 1e-12 * pca.eigenvalues[0])) {
    throw EvalError("point cloud is rank-deficient: fewer than two nonzero principal variances");
  }
  pca.projection = Matrix(m, 2);
  for (std::size_t i = 0; i < m; ++i) {
    const auto p = pca.project(points.row(i));
    pca.projection(i, 0) = p[0];
    pca.projection(i, 1) = p[1];
  }
  return pca;
}

// ---------------------------------------------------------------------------

QuadraticFit least_squares_quadratic(std::span<const double> x, std::span<const double> y,
                                     std::span<const double> weights) {
  const std::size_t m = x.size();
  if (y.size() != m || (!weights.empty() && weights.size() != m)) throw EvalError("quadratic fit: length mismatch");
  if (std::set<double>(x.begin(), x.end()).size() < 3) {
    throw EvalError("quadratic fit needs at least three distinct abscissae");
  }
  Eigen::MatrixXd a(m, 3);
  Eigen::VectorXd b(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double sw = weights.empty() ? 1.0 : std::sqrt(weights[i]);
    a(static_cast<Eigen::Index>(i), 0) = sw;
    a(static_cast<Eigen::Index>(i), 1) = sw * x[i];
    a(static_cast<Eigen::Index>(i), 2) = sw * x[i] * x[i];
    b(static_cast<Eigen::Index>(i)) = sw * y[i];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < 3) throw EvalError("quadratic fit: degenerate design matrix");
  const Eigen::VectorXd coef = qr.solve(b);
  QuadraticFit f;
  f.a = coef(0);
  f.b = coef(1);
  f.c = coef(2);
  f.converged = true;
  return f;
}

namespace {

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

}  // namespace

QuadraticFit robust_quadratic_fit(std::span<const double> x, std::span<const double> y) {
  constexpr double kDelta = 1.345;
  constexpr std::size_t kMaxIterations = 50;
  constexpr double kTolerance = 1e-8;
  QuadraticFit fit = least_squares_quadratic(x, y);
  fit.converged = false;
  std::vector<double> r(x.size()), w(x.size());
  for (std::size_t it = 1; it <= kMaxIterations; ++it) {
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = y[i] - fit(x[i]);
    const double med = median(r);
    std::vector<double> dev(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) dev[i] = std::abs(r[i] - med);
    const double scale = std::max(median(dev) / 0.6745, 1e-12);
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double u = std::abs(r[i]) / scale;
      w[i] = u <= kDelta ? 1.0 : kDelta / u;
    }
    QuadraticFit next = least_squares_quadratic(x, y, w);
    const double change =
        std::max({std::abs(next.a - fit.a), std::abs(next.b - fit.b), std::abs(next.c - fit.c)});
    next.iterations = it;
    next.converged = change < kTolerance;
    fit = next;
    if (fit.converged) break;
  }
  return fit;
}

// ---------------------------------------------------------------------------

WelchTest welch_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw EvalError("Welch test needs at least two samples per group");
  auto moments = [](std::span<const double> v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::pair{mean, ss / static_cast<double>(v.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double qa = va / na, qb = vb / nb;
  const double se2 = qa + qb;
  WelchTest w;
  if (se2 == 0.0) {
    if (ma != mb) throw EvalError("Welch test undefined: both groups constant with different means");
    w.t = 0.0;
    w.df = na + nb - 2.0;
  } else {
    w.t = (ma - mb) / std::sqrt(se2);
    w.df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  }
  if (!(w.df > 30.0)) {
    throw EvalError("Welch test: " + std::to_string(w.df) +
                    " degrees of freedom is too few for the normal approximation (need > 30)");
  }
  w.p = std::erfc(std::abs(w.t) / std::sqrt(2.0));
  return w;
}

GroupNormStats group_norm_stats(const Matrix& dz, const std::vector<std::string>& group_labels) {
  if (group_labels.size() != dz.rows) throw EvalError("group_norm_stats: one label per trajectory vector required");
  std::map<std::string, std::vector<double>> norms;
  for (std::size_t i = 0; i < dz.rows; ++i) {
    double acc = 0.0;
    for (double v : dz.row(i)) acc += v * v;
    norms[group_labels[i]].push_back(std::sqrt(acc));
  }
  GroupNormStats out;
  for (const auto& [name, v] : norms) {
    if (v.size() < 2) throw EvalError("group " + name + " has fewer than two samples");
    GroupNorm g;
    g.group = name;
    g.n = v.size();
    for (double x : v) g.mean_norm += x;
    g.mean_norm /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - g.mean_norm) * (x - g.mean_norm);
    g.sd_norm = std::sqrt(ss / static_cast<double>(v.size() - 1));
    out.groups.push_back(g);
  }
  for (auto i = norms.begin(); i != norms.end(); ++i) {
    for (auto j = std::next(i); j != norms.end(); ++j) {
      out.comparisons.push_back({i->first, j->first, welch_test(i->second, j->second)});
    }
  }
  return out;
}

}  // namespace lne::evalviz
