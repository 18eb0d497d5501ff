#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "support.hpp"

using namespace gee;
using gee::testing::Gen;

namespace {

// Number of eigenvalues of symmetric M below x, from the signs of the
// leading principal minors of M - xI (Sylvester inertia, long double pivots).
int count_below(const Matrix& m, double x) {
  const Eigen::Index n = m.rows();
  std::vector<std::vector<long double>> a(n, std::vector<long double>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a[i][j] = m(i, j) - (i == j ? x : 0.0);
  int negative = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    long double pivot = a[k][k];
    if (pivot == 0.0L) pivot = 1e-300L;
    if (pivot < 0) ++negative;
    for (Eigen::Index i = k + 1; i < n; ++i) {
      const long double f = a[i][k] / pivot;
      for (Eigen::Index j = k + 1; j < n; ++j) a[i][j] -= f * a[k][j];
    }
  }
  return negative;
}

// k-th smallest root of det(M - xI) by bisection on the counting function.
double bisect_eigenvalue(const Matrix& m, int k) {
  double lo = -m.cwiseAbs().rowwise().sum().maxCoeff() - 1.0;
  double hi = -lo;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (count_below(m, mid) > k) hi = mid;
    else lo = mid;
  }
  return 0.5 * (lo + hi);
}

double power_iteration_norm(const Matrix& m) {
  const Matrix g = m.transpose() * m;
  Vector v = Vector::Ones(g.rows());
  for (int it = 0; it < 5000; ++it) v = (g * v).normalized();
  return std::sqrt(v.dot(g * v));
}

}  // namespace

TEST(SymEigen, IdentityExtremes) {
  const auto e = linalg::sym_eigen_extremes(Matrix::Identity(3, 3));
  EXPECT_DOUBLE_EQ(e.lambda_min, 1.0);
  EXPECT_DOUBLE_EQ(e.lambda_max, 1.0);
}

TEST(SymEigen, TwoByTwoCorrelation) {
  Matrix m(2, 2);
  m << 1, 0.5, 0.5, 1;
  const auto e = linalg::sym_eigen_extremes(m);
  EXPECT_NEAR(e.lambda_min, 0.5, 1e-14);
  EXPECT_NEAR(e.lambda_max, 1.5, 1e-14);
}

TEST(SymEigen, MatchesBisectionOracle) {
  Gen gen(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = gen.symmetric(5);
    const Vector values = linalg::sym_eigenvalues(m);
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(values(k), bisect_eigenvalue(m, k), 1e-8);
  }
}

TEST(SymEigen, VectorsDiagonalize) {
  Gen gen(12);
  const Matrix m = gen.symmetric(6);
  const auto se = linalg::sym_eigen(m);
  const Matrix rebuilt = se.vectors * se.values.asDiagonal() * se.vectors.transpose();
  EXPECT_LT((rebuilt - m).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SymEigen, RejectsAsymmetry) {
  Matrix m(2, 2);
  m << 1, 0.5, 0.4, 1;
  EXPECT_THROW(linalg::sym_eigen_extremes(m), SymmetryViolation);
}

TEST(SymEigen, ToleratesRoundoffAsymmetry) {
  Matrix m(2, 2);
  m << 1, 0.5, 0.5 + 1e-12, 1;
  EXPECT_NO_THROW(linalg::sym_eigen_extremes(m));
}

TEST(SymEigen, RejectsNaN) {
  Matrix m = Matrix::Identity(2, 2);
  m(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(linalg::sym_eigen_extremes(m), InvalidInput);
  EXPECT_THROW(linalg::spectral_norm(m), InvalidInput);
  EXPECT_THROW(linalg::numerical_radius(m), InvalidInput);
}

TEST(SymEigen, CorrelationMatrixBoundedByDimension) {
  Gen gen(13);
  for (int m = 1; m <= 8; ++m) {
    const Matrix r = gen.correlation(m);
    EXPECT_LE(linalg::sym_eigen_extremes(r).lambda_max, m + 1e-12);
  }
}

TEST(SpectralNorm, DiagonalAndIdentity) {
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 1;
  d(1, 1) = -3;
  EXPECT_NEAR(linalg::spectral_norm(d), 3.0, 1e-14);
  EXPECT_NEAR(linalg::spectral_norm(Matrix::Identity(4, 4)), 1.0, 1e-14);
}

TEST(SpectralNorm, MatchesPowerIteration) {
  Gen gen(14);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix m = gen.matrix(4, 4);
    const double ref = power_iteration_norm(m);
    EXPECT_NEAR(linalg::spectral_norm(m) / ref, 1.0, 1e-8);
  }
}

TEST(SpectralNorm, Rectangular) {
  Gen gen(15);
  const Matrix m = gen.matrix(2, 5);
  EXPECT_NEAR(linalg::spectral_norm(m) / power_iteration_norm(m), 1.0, 1e-8);
}

TEST(NumericalRadius, SymmetricEqualsLargestAbsEigenvalue) {
  Gen gen(16);
  const Matrix m = gen.symmetric(4);
  EXPECT_NEAR(linalg::numerical_radius(m), linalg::sym_eigenvalues(m).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_NEAR(linalg::numerical_radius(Matrix::Identity(3, 3)), 1.0, 1e-15);
}

TEST(NumericalRadius, NilpotentMatchesGridSearch) {
  Matrix m(2, 2);
  m << 0, 1, 0, 0;
  double grid = 0.0;
  for (int k = 0; k < 200000; ++k) {
    const double t = std::numbers::pi * k / 200000.0;
    Vector x(2);
    x << std::cos(t), std::sin(t);
    grid = std::max(grid, std::abs(x.dot(m * x)));
  }
  EXPECT_NEAR(linalg::numerical_radius(m), grid, 1e-4);
  EXPECT_NEAR(linalg::numerical_radius(m), 0.5, 1e-15);
}

TEST(NormInequality, RadiusSpectralChain) {
  Gen gen(17);
  int lower = 0;
  int upper = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Index n = gen.integer(2, 6);
    const Matrix m = gen.matrix(n, n);
    const double w = linalg::numerical_radius(m);
    const double s = linalg::spectral_norm(m);
    if (!(w <= s + 1e-12)) ++lower;
    if (!(s <= 2.0 * w + 1e-12)) ++upper;
  }
  EXPECT_EQ(lower, 0);
  EXPECT_EQ(upper, 0);
}

TEST(NormInequality, SampleMeanForms) {
  Gen gen(18);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index n = 2 + trial % 5;
    const int k = 2 + trial % 7;
    Matrix mean = Matrix::Zero(n, n);
    double mean_radius = 0.0;
    double mean_norm = 0.0;
    for (int j = 0; j < k; ++j) {
      const Matrix a = gen.matrix(n, n);
      mean += a / k;
      mean_radius += linalg::numerical_radius(a) / k;
      mean_norm += linalg::spectral_norm(a) / k;
    }
    EXPECT_LE(linalg::numerical_radius(mean), mean_radius + 1e-12);
    EXPECT_LE(linalg::spectral_norm(mean), 2.0 * mean_norm + 1e-12);
  }
}

TEST(SpdSolve, IdentityAndDiagonal) {
  Gen gen(19);
  const Matrix b = gen.matrix(3, 2);
  EXPECT_EQ(linalg::spd_solve(Matrix::Identity(3, 3), b), b);
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 2;
  d(1, 1) = 4;
  const Matrix x = linalg::spd_solve(d, Matrix(Matrix::Identity(2, 2)));
  EXPECT_NEAR(x(0, 0), 0.5, 1e-16);
  EXPECT_NEAR(x(1, 1), 0.25, 1e-16);
  EXPECT_EQ(x(0, 1), 0.0);
}

TEST(SpdSolve, MultiplyBackRandom) {
  Gen gen(20);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix m = gen.spd(5, 0.1, 10.0);
    const Matrix b = gen.matrix(5, 3);
    const Matrix x = linalg::spd_solve(m, b);
    EXPECT_LT((m * x - b).cwiseAbs().maxCoeff(), 1e-10 * b.cwiseAbs().maxCoeff());
  }
}

// At condition number 1e8 the residual of any fp64 solution is about
// eps * cond * ||B||, so the check is on the normwise backward error.
TEST(SpdSolve, IllConditionedBackwardError) {
  Gen gen(21);
  for (double cond : {1e2, 1e4, 1e6, 1e8}) {
    const Matrix m = gen.spd(5, 1.0 / cond, 1.0);
    const Matrix b = gen.matrix(5, 2);
    const Matrix x = linalg::spd_solve(m, b);
    const double lhs = (m * x - b).lpNorm<Eigen::Infinity>();
    const double scale = m.lpNorm<Eigen::Infinity>() * x.lpNorm<Eigen::Infinity>() + b.lpNorm<Eigen::Infinity>();
    EXPECT_LT(lhs, 1e-10 * scale) << "cond=" << cond;
  }
}

TEST(SpdSolve, NotPositiveDefiniteCarriesLambdaMin) {
  Matrix m(2, 2);
  m << 1, 2, 2, 1;
  try {
    linalg::spd_solve(m, Vector(Vector::Ones(2)));
    FAIL() << "expected NotPositiveDefinite";
  } catch (const NotPositiveDefinite& e) {
    EXPECT_NEAR(e.lambda_min(), -1.0, 1e-12);
  }
}

TEST(SymSqrt, SquaresBack) {
  Gen gen(22);
  const Matrix m = gen.spd(4);
  const Matrix r = linalg::sym_sqrt(m);
  EXPECT_LT((r * r - m).cwiseAbs().maxCoeff(), 1e-12);
}
