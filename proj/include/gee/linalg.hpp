#pragma once

// Small dense matrix numerics. Every matrix handled here is at most a few
// dozen rows wide (cluster sizes and parameter dimensions), so the routines
// favour robustness over asymptotic speed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "gee/error.hpp"

namespace gee {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace linalg {

inline constexpr double kSymmetryTolerance = 1e-10;
inline constexpr double kJacobiTolerance = 1e-12;
inline constexpr int kJacobiMaxSweeps = 100;
inline constexpr double kSpdMinEigenvalue = 1e-12;

struct EigenExtremes {
  double lambda_min = 0.0;
  double lambda_max = 0.0;
};

// Eigenvalues in ascending order; column k of `vectors` belongs to values(k).
struct SymmetricEigen {
  Vector values;
  Matrix vectors;
};

inline void require_square(const Matrix& m) {
  if (m.rows() != m.cols()) {
    throw InvalidInput("expected a square matrix, got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

inline void require_finite(const Matrix& m) {
  if (!m.allFinite()) throw InvalidInput("matrix has non-finite entries");
}

inline double max_asymmetry(const Matrix& m) {
  return m.rows() == 0 ? 0.0 : (m - m.transpose()).cwiseAbs().maxCoeff();
}

// Validates and returns (M + M^T)/2.
inline Matrix symmetrized(const Matrix& m, double tolerance = kSymmetryTolerance) {
  require_square(m);
  require_finite(m);
  const double asym = max_asymmetry(m);
  if (asym > tolerance) throw SymmetryViolation(asym);
  return 0.5 * (m + m.transpose());
}

namespace detail {

inline double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

// Cyclic Jacobi on an already symmetric matrix.
inline SymmetricEigen jacobi(Matrix a, bool want_vectors) {
  const Eigen::Index n = a.rows();
  Matrix v = want_vectors ? Matrix::Identity(n, n) : Matrix();
  const double scale = a.norm();
  if (scale > 0.0) {
    for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
      if (off_diagonal_norm(a) <= kJacobiTolerance * scale) break;
      for (Eigen::Index p = 0; p < n - 1; ++p) {
        for (Eigen::Index q = p + 1; q < n; ++q) {
          const double apq = a(p, q);
          if (apq == 0.0) continue;
          const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
          const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
          const double c = 1.0 / std::sqrt(t * t + 1.0);
          const double s = t * c;
          for (Eigen::Index k = 0; k < n; ++k) {
            const double akp = a(k, p);
            const double akq = a(k, q);
            a(k, p) = c * akp - s * akq;
            a(k, q) = s * akp + c * akq;
          }
          for (Eigen::Index k = 0; k < n; ++k) {
            const double apk = a(p, k);
            const double aqk = a(q, k);
            a(p, k) = c * apk - s * aqk;
            a(q, k) = s * apk + c * aqk;
          }
          if (want_vectors) {
            for (Eigen::Index k = 0; k < n; ++k) {
              const double vkp = v(k, p);
              const double vkq = v(k, q);
              v(k, p) = c * vkp - s * vkq;
              v(k, q) = s * vkp + c * vkq;
            }
          }
        }
      }
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return a(x, x) < a(y, y); });
  SymmetricEigen out;
  out.values.resize(n);
  if (want_vectors) out.vectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index src = order[static_cast<std::size_t>(k)];
    out.values(k) = a(src, src);
    if (want_vectors) out.vectors.col(k) = v.col(src);
  }
  return out;
}

}  // namespace detail

// Full symmetric eigendecomposition (cyclic Jacobi).
inline SymmetricEigen sym_eigen(const Matrix& m, bool want_vectors = true) {
  return detail::jacobi(symmetrized(m), want_vectors);
}

inline Vector sym_eigenvalues(const Matrix& m) { return sym_eigen(m, false).values; }

inline EigenExtremes sym_eigen_extremes(const Matrix& m) {
  if (m.rows() == 0) throw InvalidInput("empty matrix");
  const Vector values = sym_eigenvalues(m);
  return {values(0), values(values.size() - 1)};
}

// sup over unit x of ||Mx||. Rectangular inputs are accepted.
inline double spectral_norm(const Matrix& m) {
  require_finite(m);
  if (m.size() == 0) return 0.0;
  const Matrix gram = m.transpose() * m;
  const Vector values = detail::jacobi(0.5 * (gram + gram.transpose()), false).values;
  return std::sqrt(std::max(0.0, values(values.size() - 1)));
}

// sup over real unit x of |x^T M x|, i.e. the largest |eigenvalue| of (M + M^T)/2.
inline double numerical_radius(const Matrix& m) {
  require_square(m);
  require_finite(m);
  if (m.rows() == 0) return 0.0;
  const Vector values = detail::jacobi(0.5 * (m + m.transpose()), false).values;
  return std::max(std::abs(values(0)), std::abs(values(values.size() - 1)));
}

// Cholesky-backed solve of M X = B for symmetric positive definite M, followed
// by one refinement step with the residual accumulated in extended precision.
inline Matrix spd_solve(const Matrix& m, const Matrix& b) {
  const Matrix sym = symmetrized(m);
  if (b.rows() != sym.rows()) throw InvalidInput("spd_solve: right-hand side has wrong row count");
  require_finite(b);
  const double lambda_min = detail::jacobi(sym, false).values(0);
  if (!(lambda_min > kSpdMinEigenvalue)) throw NotPositiveDefinite(lambda_min);
  const Eigen::LLT<Matrix> llt(sym);
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite(lambda_min);
  Matrix x = llt.solve(b);
  using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  const LMatrix residual = b.cast<long double>() - sym.cast<long double>() * x.cast<long double>();
  x += llt.solve(residual.cast<double>());
  return x;
}

inline Vector spd_solve(const Matrix& m, const Vector& b) {
  return spd_solve(m, Matrix(b)).col(0);
}

inline Matrix spd_inverse(const Matrix& m) { return spd_solve(m, Matrix(Matrix::Identity(m.rows(), m.cols()))); }

// Symmetric square root via eigendecomposition; requires a PSD input.
inline Matrix sym_sqrt(const Matrix& m) {
  const SymmetricEigen e = sym_eigen(m);
  if (e.values.size() > 0 && e.values(0) < -kSymmetryTolerance) throw NotPositiveDefinite(e.values(0), "in sym_sqrt");
  const Vector root = e.values.cwiseMax(0.0).cwiseSqrt();
  return e.vectors * root.asDiagonal() * e.vectors.transpose();
}

// log|det M| and its sign from a partial-pivoting LU factorization.
struct LogDeterminant {
  double log_abs = -std::numeric_limits<double>::infinity();
  int sign = 0;
};

inline LogDeterminant log_determinant(const Matrix& m) {
  require_square(m);
  require_finite(m);
  LogDeterminant out;
  if (m.rows() == 0) return {0.0, 1};
  const Eigen::PartialPivLU<Matrix> lu(m);
  const Matrix& packed = lu.matrixLU();
  out.sign = lu.permutationP().determinant();
  out.log_abs = 0.0;
  for (Eigen::Index i = 0; i < packed.rows(); ++i) {
    const double u = packed(i, i);
    if (u == 0.0) return {-std::numeric_limits<double>::infinity(), 0};
    if (u < 0.0) out.sign = -out.sign;
    out.log_abs += std::log(std::abs(u));
  }
  return out;
}

}  // namespace linalg
}  // namespace gee
