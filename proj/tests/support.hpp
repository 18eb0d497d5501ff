#pragma once

#include <cstdint>
#include <random>

#include "gee/gee.hpp"

namespace gee::testing {

// Hand-rolled generators for property tests. std::mt19937_64 keeps them
// independent of the library's own generator.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }

  Matrix matrix(Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    Matrix m(r, c);
    for (Eigen::Index a = 0; a < r; ++a)
      for (Eigen::Index b = 0; b < c; ++b) m(a, b) = scale * normal();
    return m;
  }

  Vector vector(Eigen::Index n, double scale = 1.0) { return matrix(n, 1, scale).col(0); }

  Matrix symmetric(Eigen::Index n) {
    const Matrix m = matrix(n, n);
    return 0.5 * (m + m.transpose());
  }

  // SPD with eigenvalues in [lo, hi].
  Matrix spd(Eigen::Index n, double lo = 0.5, double hi = 2.0) {
    const Eigen::HouseholderQR<Matrix> qr(matrix(n, n));
    const Matrix q = qr.householderQ();
    Vector d(n);
    for (Eigen::Index k = 0; k < n; ++k) d(k) = uniform(lo, hi);
    const Matrix out = q * d.asDiagonal() * q.transpose();
    return 0.5 * (out + out.transpose());
  }

  // Unit-diagonal SPD correlation matrix.
  Matrix correlation(Eigen::Index n) {
    const Matrix s = spd(n, 0.3, 2.0);
    const Vector inv = s.diagonal().cwiseSqrt().cwiseInverse();
    Matrix r = inv.asDiagonal() * s * inv.asDiagonal();
    r.diagonal().setOnes();
    return r;
  }

  // Random clusters of size 1..m_max with normal regressors; y from `mean_of`.
  template <class F>
  Dataset dataset(std::size_t n, Eigen::Index p, Eigen::Index m_max, F&& y_of, double x_scale = 1.0) {
    Dataset d;
    d.p = p;
    d.m_max = m_max;
    for (std::size_t i = 1; i <= n; ++i) {
      Cluster c;
      c.index = i;
      const Eigen::Index m = integer(1, static_cast<int>(m_max));
      c.x = matrix(m, p, x_scale);
      c.y = y_of(c.x, *this);
      d.clusters.push_back(std::move(c));
    }
    return d;
  }

 private:
  std::mt19937_64 rng_;
};

inline double max_rel_err(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / std::max(1.0, std::abs(b(i, j))));
  return worst;
}

}  // namespace gee::testing
